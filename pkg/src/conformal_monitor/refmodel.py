"""One-hidden-layer ReLU classifier used to produce embeddings and logits.

The hidden layer is the embedding. Inputs are standardised with statistics
from the training split, and those statistics travel with the model.
Training is plain mini-batch SGD on cross-entropy with early stopping on a
held-out slice of the training data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, DatasetError, LabelUniverse, TabularData, softmax

log = logging.getLogger(__name__)


def default_hidden_width(d_in: int, n_classes: int) -> int:
    """Rule-of-thumb hidden width ``floor(2 * d_in / 3 + n_classes)``."""
    if d_in < 1 or n_classes < 2:
        raise ValueError("need d_in >= 1 and at least two classes")
    return (2 * d_in + 3 * n_classes) // 3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 400
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int = 25
    holdout_fraction: float = 0.1
    hidden: int | None = None

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for name in ("epochs", "batch_size", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")
        if self.hidden is not None and self.hidden < 1:
            raise ValueError("hidden must be positive")


@dataclass(frozen=True, eq=False)
class MlpModel:
    W1: np.ndarray  # (d_in, h)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (h, C)
    b2: np.ndarray  # (C,)
    x_mean: np.ndarray
    x_scale: np.ndarray
    universe: LabelUniverse
    history: tuple[tuple[float, float], ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        for name in ("W1", "b1", "W2", "b2", "x_mean", "x_scale"):
            a = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if not np.isfinite(a).all():
                raise ValueError(f"{name} has non-finite entries")
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        d_in, h = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[0] != h or self.b2.shape != self.W2.shape[1:]:
            raise ValueError("inconsistent layer shapes")
        if self.x_mean.shape != (d_in,) or self.x_scale.shape != (d_in,):
            raise ValueError("standardisation vectors must match the input width")
        if self.W2.shape[1] != self.universe.size:
            raise ValueError("output width must equal the number of classes")

    @classmethod
    def from_weights(cls, W1, b1, W2, b2, universe: LabelUniverse | None = None) -> MlpModel:
        """A model with identity input scaling."""
        W1 = np.asarray(W1, dtype=np.float64)
        C = np.asarray(W2).shape[1]
        return cls(W1, b1, W2, b2, np.zeros(W1.shape[0]), np.ones(W1.shape[0]),
                   universe or LabelUniverse.of_size(C))

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[1]

    def forward_batch(self, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d_in:
            raise ValueError(f"input has width {X.shape[1]}, model expects {self.d_in}")
        Xs = (X - self.x_mean) / self.x_scale
        emb = np.maximum(Xs @ self.W1 + self.b1, 0.0)
        logits = emb @ self.W2 + self.b2
        return emb, logits, softmax(logits)


def forward(m: MlpModel, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(embedding, logits, probs) for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward takes a single input vector")
    emb, z, p = m.forward_batch(x[None, :])
    return emb[0], z[0], p[0]


def init_params(d_in: int, h: int, C: int, rng: np.random.Generator):
    """Glorot-uniform weights, zero biases."""
    a1 = np.sqrt(6.0 / (d_in + h))
    a2 = np.sqrt(6.0 / (h + C))
    return (rng.uniform(-a1, a1, (d_in, h)), np.zeros(h),
            rng.uniform(-a2, a2, (h, C)), np.zeros(C))


def loss_and_grads(W1, b1, W2, b2, X, y):
    """Mean cross-entropy over ``(X, y)`` and its gradient for each parameter."""
    n = X.shape[0]
    pre = X @ W1 + b1
    hid = np.maximum(pre, 0.0)
    z = hid @ W2 + b2
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(s[:, 0]) + zmax[:, 0] - z[np.arange(n), y]))

    dz = e / s
    dz[np.arange(n), y] -= 1.0
    dz /= n
    gW2 = hid.T @ dz
    gb2 = dz.sum(axis=0)
    dpre = (dz @ W2.T) * (pre > 0)
    gW1 = X.T @ dpre
    gb1 = dpre.sum(axis=0)
    return loss, (gW1, gb1, gW2, gb2)


def _loss(params, X, y) -> float:
    W1, b1, W2, b2 = params
    z = np.maximum(X @ W1 + b1, 0.0) @ W2 + b2
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def train(data: TabularData, cfg: TrainConfig = TrainConfig()) -> MlpModel:
    """Fit the reference classifier. Deterministic for a given ``cfg.seed``.

    The returned model carries ``history``: one ``(train_loss, holdout_loss)``
    pair per completed epoch. Weights are those of the epoch with the lowest
    holdout loss.
    """
    n = len(data)
    C = data.universe.size
    if n == 0:
        raise DatasetError("no training data")
    present = np.unique(data.labels)
    if len(present) < 2:
        raise DatasetError("training data must contain at least two classes")
    rng = np.random.default_rng(cfg.seed)

    X = data.X.astype(np.float64)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = (X - mean) / scale
    y = data.labels

    perm = rng.permutation(n)
    n_hold = min(n - 1, max(1, int(round(n * cfg.holdout_fraction))))
    hold, fit = perm[:n_hold], perm[n_hold:]
    Xf, yf, Xh, yh = Xs[fit], y[fit], Xs[hold], y[hold]

    h = cfg.hidden or default_hidden_width(X.shape[1], C)
    params = list(init_params(X.shape[1], h, C, rng))
    best = ([p.copy() for p in params], _loss(params, Xh, yh))
    stale = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(fit))
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            _, grads = loss_and_grads(*params, Xf[b], yf[b])
            for p, g in zip(params, grads):
                p -= cfg.learning_rate * g
        tr, ho = _loss(params, Xf, yf), _loss(params, Xh, yh)
        history.append((tr, ho))
        if ho < best[1]:
            best, stale = ([p.copy() for p in params], ho), 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.info("early stop after epoch %d (best holdout loss %.4f)", epoch + 1, best[1])
                break
    W1, b1, W2, b2 = best[0]
    return MlpModel(W1, b1, W2, b2, mean, scale, data.universe, tuple(history))


def accuracy(m: MlpModel, data: TabularData) -> float:
    _, z, _ = m.forward_batch(data.X)
    return float(np.mean(np.argmax(z, axis=1) == data.labels))


def export_features(m: MlpModel, data: TabularData) -> Dataset:
    """Embeddings, logits and probabilities for every row of ``data``."""
    if data.X.shape[1] != m.d_in:
        raise ValueError(f"data has {data.X.shape[1]} columns, model expects {m.d_in}")
    emb, z, p = m.forward_batch(data.X)
    return Dataset(ids=data.ids, labels=data.labels, universe=data.universe,
                   embeddings=emb, logits=z, probs=p, role=data.role)
