import numpy as np
import pytest

from conformal_monitor.core import DatasetError, LabelUniverse, Role, TabularData, validate_dataset
from conformal_monitor.refmodel import (
    MlpModel,
    TrainConfig,
    accuracy,
    default_hidden_width,
    export_features,
    forward,
    init_params,
    loss_and_grads,
    train,
)

from oracles import (
    cross_entropy,
    finite_difference_grads,
    logistic_regression_accuracy,
    relative_error,
)


def blobs(n=400, seed=0, gap=6.0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(size=(n, 2)) + gap * y[:, None]
    return TabularData(ids=[str(i) for i in range(n)], X=X, labels=y,
                       universe=LabelUniverse(("neg", "pos")))


@pytest.mark.parametrize("d_in, C, h", [(24, 4, 20), (3, 2, 4), (10, 5, 11)])
def test_default_hidden_width(d_in, C, h):
    assert default_hidden_width(d_in, C) == h


class TestForward:
    def test_zero_weights_give_uniform_probs(self):
        m = MlpModel.from_weights(np.zeros((3, 4)), np.zeros(4), np.zeros((4, 5)), np.zeros(5))
        emb, z, p = forward(m, [1.0, -2.0, 3.0])
        np.testing.assert_array_equal(emb, 0.0)
        np.testing.assert_allclose(p, 0.2)

    def test_hand_computed_toy(self):
        # x -> relu(x - 1) -> logits (2h, -h)
        m = MlpModel.from_weights([[1.0]], [-1.0], [[2.0, -1.0]], [0.0, 0.0])
        emb, z, p = forward(m, [3.0])
        assert emb.tolist() == [2.0]
        assert z.tolist() == [4.0, -2.0]
        assert p[0] == pytest.approx(1 / (1 + np.exp(-6.0)))
        emb, z, _ = forward(m, [0.5])
        assert emb.tolist() == [0.0] and z.tolist() == [0.0, 0.0]

    def test_standardisation_applies(self):
        base = MlpModel.from_weights([[1.0]], [0.0], [[1.0, 0.0]], [0.0, 0.0])
        m = MlpModel(base.W1, base.b1, base.W2, base.b2, np.array([2.0]), np.array([4.0]),
                     base.universe)
        assert forward(m, [10.0])[0].tolist() == [2.0]

    def test_width_mismatch(self):
        m = MlpModel.from_weights(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            forward(m, [1.0, 2.0])


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        W1, b1, W2, b2 = init_params(3, 4, 3, rng)
        b1 = rng.normal(size=4) * 0.1
        X, y = rng.normal(size=(6, 3)), rng.integers(0, 3, 6)
        _, analytic = loss_and_grads(W1, b1, W2, b2, X, y)
        params = [W1, b1, W2, b2]
        numeric = finite_difference_grads(lambda *p: cross_entropy(*p, X, y), params)
        for a, n in zip(analytic, numeric):
            assert relative_error(a, n) <= 1e-4


def test_loss_value_matches_oracle(rng):
    W1, b1, W2, b2 = init_params(4, 5, 3, rng)
    X, y = rng.normal(size=(10, 4)), rng.integers(0, 3, 10)
    loss, _ = loss_and_grads(W1, b1, W2, b2, X, y)
    assert loss == pytest.approx(cross_entropy(W1, b1, W2, b2, X, y), rel=1e-12)


def test_full_batch_loss_is_monotone():
    data = blobs(200, gap=2.0)
    cfg = TrainConfig(learning_rate=0.02, epochs=60, batch_size=10_000, early_stop_patience=60)
    hist = train(data, cfg).history
    tr = [h[0] for h in hist]
    assert all(b <= a + 1e-12 for a, b in zip(tr, tr[1:]))


def test_separable_blobs():
    data = blobs()
    assert logistic_regression_accuracy(data.X, data.labels) >= 0.99
    m = train(data, TrainConfig(epochs=50))
    assert accuracy(m, data) >= 0.99


def test_seeded_training_is_bit_identical():
    data = blobs(200, seed=3, gap=1.5)
    cfg = TrainConfig(epochs=15, seed=9)
    a, b = train(data, cfg), train(data, cfg)
    for name in ("W1", "b1", "W2", "b2", "x_mean", "x_scale"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = train(data, TrainConfig(epochs=15, seed=10))
    assert not np.array_equal(a.W1, c.W1)


def test_early_stopping_keeps_best_holdout():
    data = blobs(300, gap=0.5)
    m = train(data, TrainConfig(epochs=200, early_stop_patience=5, learning_rate=0.2))
    assert len(m.history) < 200


def test_train_rejects_single_class():
    data = TabularData(ids=["a", "b"], X=np.zeros((2, 2)), labels=[0, 0],
                       universe=LabelUniverse.of_size(2))
    with pytest.raises(DatasetError):
        train(data)


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"epochs": 0}, {"holdout_fraction": 1.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_export_features():
    data = blobs(50)
    data = data.subset(range(50), Role.TEST)
    m = train(data, TrainConfig(epochs=5, hidden=7))
    ds = export_features(m, data)
    assert ds.embeddings.shape == (50, 7)
    assert ds.logits.shape == ds.probs.shape == (50, 2)
    assert ds.role is Role.TEST
    np.testing.assert_allclose(ds.probs.sum(axis=1), 1.0)
    assert np.all(ds.embeddings >= 0)
    np.testing.assert_array_equal(ds.labels, data.labels)
    assert validate_dataset(ds) == []
    z = ds.logits
    want = np.exp(z - z.max(axis=1, keepdims=True))
    np.testing.assert_allclose(ds.probs, want / want.sum(axis=1, keepdims=True), rtol=1e-12)
