"""Seeded synthetic data for tests, benchmarks and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, LabelUniverse, Role, TabularData


@dataclass(frozen=True)
class GaussianMixture:
    """Equal-weight classes with unit covariance and means ``scale * e_c``.

    The means are the scaled standard basis vectors, i.e. the vertices of a
    regular simplex.
    """

    n_classes: int = 5
    dim: int = 16
    scale: float = 3.0

    def __post_init__(self) -> None:
        if self.n_classes > self.dim:
            raise ValueError("need dim >= n_classes for simplex means")

    @property
    def means(self) -> np.ndarray:
        mu = np.zeros((self.n_classes, self.dim))
        mu[np.arange(self.n_classes), np.arange(self.n_classes)] = self.scale
        return mu

    def bayes_logits(self, X: np.ndarray) -> np.ndarray:
        """Log class posteriors up to a constant: ``-|x - mu_c|^2 / 2``."""
        diff = X[:, None, :] - self.means[None, :, :]
        return -0.5 * np.einsum("ncd,ncd->nc", diff, diff)

    def sample(self, n: int, rng: np.random.Generator, role: Role | None = None,
               prefix: str = "x") -> Dataset:
        y = rng.integers(0, self.n_classes, n)
        X = self.means[y] + rng.standard_normal((n, self.dim))
        z = self.bayes_logits(X)
        z_shift = z - z.max(axis=1, keepdims=True)
        p = np.exp(z_shift) / np.exp(z_shift).sum(axis=1, keepdims=True)
        return Dataset(ids=[f"{prefix}{i}" for i in range(n)], labels=y,
                       universe=LabelUniverse.of_size(self.n_classes),
                       embeddings=X, logits=z, probs=p, role=role)


def gaussian_splits(
    seed: int = 0,
    n_train: int = 4000,
    n_calib: int = 1000,
    n_validation: int = 1000,
    n_test: int = 5000,
    mixture: GaussianMixture = GaussianMixture(),
) -> dict[str, Dataset]:
    rng = np.random.default_rng(seed)
    return {
        "train": mixture.sample(n_train, rng, Role.TRAIN, "tr"),
        "calib": mixture.sample(n_calib, rng, Role.CALIBRATION, "ca"),
        "validation": mixture.sample(n_validation, rng, Role.VALIDATION, "va"),
        "test": mixture.sample(n_test, rng, Role.TEST, "te"),
    }


def calibrated_logits(n: int, n_classes: int, temperature: float, seed: int = 0,
                      concentration: float = 0.5) -> Dataset:
    """Logits ``T0 * log p`` whose labels are drawn from ``p`` itself.

    ``softmax(z / T0)`` recovers ``p`` exactly and is calibrated by
    construction, so a temperature fit should land near ``T0``.
    """
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(n_classes, concentration), size=n)
    p = np.clip(p, 1e-12, None)
    p /= p.sum(axis=1, keepdims=True)
    y = np.array([rng.choice(n_classes, p=row) for row in p])
    return Dataset(ids=[f"t{i}" for i in range(n)], labels=y,
                   universe=LabelUniverse.of_size(n_classes),
                   logits=temperature * np.log(p), role=Role.VALIDATION)


def clustered_encodings(n: int, dim: int, n_classes: int, seed: int = 0,
                        spread: float = 3.0) -> Dataset:
    """Nonnegative class-clustered vectors shaped like ReLU penultimate activations."""
    rng = np.random.default_rng(seed)
    centers = np.abs(rng.normal(0.0, spread, (n_classes, dim)))
    y = rng.integers(0, n_classes, n)
    X = np.maximum(centers[y] + rng.standard_normal((n, dim)), 0.0)
    z = X @ (centers.T / dim) - 0.5 * (centers * centers).sum(axis=1) / dim
    return Dataset(ids=[f"g{i}" for i in range(n)], labels=y,
                   universe=LabelUniverse.of_size(n_classes),
                   embeddings=X, logits=z, role=Role.TRAIN)


def wall_following_like(n: int = 5456, n_inputs: int = 24, seed: int = 0,
                        noise: float = 0.6) -> TabularData:
    """Stand-in for the 24-sensor, 4-action navigation table.

    Class frequencies follow the real file (about 40/38/15/6 %). Readings
    are positive ranges with class-dependent means. It exercises the
    pipeline only; it is not the real dataset.
    """
    rng = np.random.default_rng(seed)
    names = ("Move-Forward", "Sharp-Right-Turn", "Slight-Left-Turn", "Slight-Right-Turn")
    freq = np.array([2205, 2097, 826, 328], dtype=float)
    y = rng.choice(4, size=n, p=freq / freq.sum())
    base = rng.uniform(0.5, 3.0, (4, n_inputs))
    X = np.abs(base[y] + rng.normal(0.0, noise, (n, n_inputs)))
    return TabularData(ids=[str(i) for i in range(n)], X=X, labels=y,
                       universe=LabelUniverse(names))
