import numpy as np
import pytest

from conformal_monitor.core import (
    Dataset,
    DatasetError,
    LabeledExample,
    LabelUniverse,
    TabularData,
    Verdict,
    check_epsilon,
    validate_dataset,
)

from conftest import make_dataset


def well_formed(rng, n=6, d=4, C=3):
    p = rng.dirichlet(np.ones(C), size=n)
    return make_dataset(embeddings=rng.normal(size=(n, d)), probs=p,
                        labels=np.arange(n) % C, n_classes=C)


class TestValidateDataset:
    def test_well_formed_has_no_violations(self, rng):
        assert validate_dataset(well_formed(rng)) == []

    def test_bad_probability_sum_names_the_example(self, rng):
        ds = well_formed(rng)
        p = ds.probs.copy()
        p[2] = [0.5, 0.2, 0.1]
        bad = make_dataset(embeddings=ds.embeddings, probs=p, labels=ds.labels)
        v = validate_dataset(bad)
        assert len(v) == 1
        assert v[0].example_id == "r2"
        assert "sum" in v[0].rule

    def test_empty(self):
        ds = make_dataset(embeddings=np.zeros((0, 2)), labels=np.zeros(0, dtype=int))
        assert [v.rule for v in validate_dataset(ds)] == ["empty dataset"]

    def test_label_out_of_range(self, rng):
        ds = make_dataset(embeddings=rng.normal(size=(3, 2)), labels=[0, 1, 3])
        v = validate_dataset(ds)
        assert [x.example_id for x in v] == ["r2"]

    def test_non_finite_embedding(self, rng):
        e = rng.normal(size=(3, 2))
        e[1, 0] = np.inf
        v = validate_dataset(make_dataset(embeddings=e, labels=[0, 1, 2]))
        assert [x.example_id for x in v] == ["r1"]

    def test_no_features(self):
        ds = make_dataset(labels=[0, 1])
        assert any("no embedding" in v.rule for v in validate_dataset(ds))

    def test_probability_tolerance_is_1e6(self, rng):
        p = np.array([[0.5, 0.5 + 5e-7, 0.0], [0.5, 0.5 + 5e-6, 0.0]])
        v = validate_dataset(make_dataset(probs=p, labels=[0, 1]))
        assert [x.example_id for x in v] == ["r1"]

    def test_pure(self, rng):
        ds = make_dataset(embeddings=rng.normal(size=(3, 2)), labels=[0, 5, 9])
        assert validate_dataset(ds) == validate_dataset(ds)


def test_label_universe_needs_two_classes():
    with pytest.raises(DatasetError):
        LabelUniverse(("only",))
    with pytest.raises(DatasetError):
        LabelUniverse(("a", "a"))
    u = LabelUniverse(("a", "b"))
    assert u.index_of("b") == 1
    with pytest.raises(DatasetError):
        u.index_of("c")


def test_dataset_is_immutable(rng):
    ds = well_formed(rng)
    with pytest.raises(ValueError):
        ds.embeddings[0, 0] = 1.0
    with pytest.raises(AttributeError):
        ds.role = None


def test_from_examples_round_trip(rng):
    ds = well_formed(rng)
    again = Dataset.from_examples(list(ds), ds.universe)
    assert again == ds


def test_from_examples_rejects_mixed_presence():
    exs = [LabeledExample(id="a", label=0, embedding=np.zeros(2)),
           LabeledExample(id="b", label=1, probs=np.array([0.5, 0.5]))]
    with pytest.raises(DatasetError):
        Dataset.from_examples(exs, LabelUniverse.of_size(2))


def test_tabular_shape_check():
    with pytest.raises(DatasetError):
        TabularData(ids=["a"], X=np.zeros((2, 3)), labels=[0, 1], universe=LabelUniverse.of_size(2))


@pytest.mark.parametrize("size, verdict", [(0, Verdict.EMPTY), (1, Verdict.SINGLE),
                                           (2, Verdict.REJECT), (7, Verdict.REJECT)])
def test_verdict_from_set_size(size, verdict):
    assert Verdict.from_set_size(size) is verdict


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_check_epsilon_rejects(eps):
    with pytest.raises(ValueError):
        check_epsilon(eps)
