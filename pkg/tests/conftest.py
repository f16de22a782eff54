import numpy as np
import pytest

from conformal_monitor.core import Dataset, LabelUniverse
from conformal_monitor.synthetic import GaussianMixture, gaussian_splits


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_splits():
    """A quick 3-class mixture, small enough for per-test use."""
    return gaussian_splits(seed=7, n_train=600, n_calib=300, n_validation=300, n_test=600,
                           mixture=GaussianMixture(n_classes=3, dim=4, scale=2.5))


def make_dataset(embeddings=None, probs=None, logits=None, labels=None, n_classes=3):
    n = len(labels)
    return Dataset(ids=[f"r{i}" for i in range(n)], labels=labels,
                   universe=LabelUniverse.of_size(n_classes),
                   embeddings=embeddings, probs=probs, logits=logits)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for a criterion, then assert it."""

    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
