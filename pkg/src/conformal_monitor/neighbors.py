"""Exact Euclidean nearest-neighbour search over stored embeddings.

The index is a k-d tree: every internal node splits its points at the
median of the dimension with the largest spread, and recursion stops at
buckets of at most ``LEAF_SIZE`` points. Each leaf keeps the tight
bounding box of its points.

Queries rank the leaves by the squared distance from the query to their
boxes and scan them in that order with vectorised distance evaluation. A
leaf is skipped only when its box is strictly farther than the current
k-th best distance, so results are exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

LEAF_SIZE = 16

# Box bounds and point distances are reduced in different array shapes, so
# their float rounding can differ by a few ulps. Pruning allows for that.
_PRUNE_SLACK = 1e-10
_CHUNK_ELEMS = 1 << 17


@dataclass(frozen=True)
class NeighborHit:
    distance: float
    label: int
    point_index: int


@dataclass(frozen=True, eq=False)
class TreeArrays:
    """Flat node table of a built tree.

    ``split_dim`` is -1 for leaves. ``start``/``end`` index into ``order``,
    which lists insertion indices grouped leaf by leaf.
    """

    split_dim: np.ndarray
    split_value: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    order: np.ndarray


def _build_tree(points: np.ndarray, leaf_size: int) -> TreeArrays:
    split_dim: list[int] = []
    split_value: list[float] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    end: list[int] = []
    order: list[np.ndarray] = []
    filled = 0

    def new_node() -> int:
        for col in (split_dim, left, right, start, end):
            col.append(-1)
        split_value.append(0.0)
        return len(split_dim) - 1

    def build(idx: np.ndarray) -> int:
        nonlocal filled
        node = new_node()
        pts = points[idx]
        spread = pts.max(axis=0) - pts.min(axis=0) if len(idx) > leaf_size else None
        if spread is None or spread.max() == 0.0:
            start[node], end[node] = filled, filled + len(idx)
            order.append(idx)
            filled += len(idx)
            return node
        dim = int(np.argmax(spread))
        idx = idx[np.argsort(pts[:, dim], kind="stable")]
        mid = len(idx) // 2
        split_dim[node] = dim
        split_value[node] = float(points[idx[mid], dim])
        start[node] = filled
        left[node] = build(idx[:mid])
        right[node] = build(idx[mid:])
        end[node] = filled
        return node

    build(np.arange(points.shape[0], dtype=np.int64))
    as_int = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
    return TreeArrays(
        split_dim=as_int(split_dim),
        split_value=np.asarray(split_value, dtype=np.float64),
        left=as_int(left),
        right=as_int(right),
        start=as_int(start),
        end=as_int(end),
        order=np.concatenate(order).astype(np.int64),
    )


class NeighborIndex:
    """Read-only k-d tree over labelled points.

    Build with :func:`build_index`. Queries allocate only local scratch, so
    one index can serve many threads.
    """

    def __init__(self, points: np.ndarray, labels: np.ndarray, tree: TreeArrays):
        self.points = points
        self.labels = labels
        self.tree = tree
        for a in (points, labels, *vars(tree).values()):
            a.flags.writeable = False

        leaves = np.flatnonzero(tree.split_dim < 0)
        self._leaf_start = tree.start[leaves]
        self._leaf_size = tree.end[leaves] - self._leaf_start
        order = tree.order
        self._sorted_points = points[order]
        self._sorted_index = order
        self._sorted_labels = labels[order]
        self._leaf_of = np.repeat(np.arange(len(leaves)), self._leaf_size)
        self._leaf_lo = np.minimum.reduceat(self._sorted_points, self._leaf_start, axis=0)
        self._leaf_hi = np.maximum.reduceat(self._sorted_points, self._leaf_start, axis=0)

        self.classes = np.unique(labels)
        cls_pos = np.searchsorted(self.classes, self._sorted_labels)
        self._sorted_class_pos = cls_pos
        mask = np.zeros((len(leaves), len(self.classes)), dtype=bool)
        mask[self._leaf_of, cls_pos] = True
        self._leaf_classes = mask

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_leaves(self) -> int:
        return self._leaf_lo.shape[0]

    def __len__(self) -> int:
        return self.size

    @property
    def nbytes(self) -> int:
        """Approximate resident size of the index arrays."""
        own = [self.points, self.labels, self._sorted_points, self._sorted_index,
               self._sorted_labels, self._leaf_of, self._leaf_lo, self._leaf_hi,
               self._leaf_classes, self._sorted_class_pos]
        return sum(a.nbytes for a in own) + sum(a.nbytes for a in vars(self.tree).values())

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.dim:
            raise ValueError(f"query has dimension {v.shape[0]}, index has {self.dim}")
        return v

    def _leaf_bounds(self, v: np.ndarray) -> np.ndarray:
        gap = np.maximum(self._leaf_lo - v, 0.0) + np.maximum(v - self._leaf_hi, 0.0)
        return np.einsum("ij,ij->i", gap, gap)

    def _scan(self, v: np.ndarray, leaves: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Sorted positions and squared distances of all points in ``leaves``."""
        if len(leaves) == 1:
            s = self._leaf_start[leaves[0]]
            pos = np.arange(s, s + self._leaf_size[leaves[0]])
        else:
            take = np.zeros(self.n_leaves, dtype=bool)
            take[leaves] = True
            pos = np.flatnonzero(take[self._leaf_of])
            if 3 * len(pos) > self.size:
                # gathering most rows costs more than a contiguous pass
                return pos, self._all_d2(v)[pos]
        diff = self._sorted_points[pos] - v
        return pos, np.einsum("ij,ij->i", diff, diff)

    def _all_d2(self, v: np.ndarray) -> np.ndarray:
        pts = self._sorted_points
        out = np.empty(pts.shape[0])
        step = max(1, _CHUNK_ELEMS // pts.shape[1])
        for s in range(0, pts.shape[0], step):
            diff = pts[s:s + step] - v
            out[s:s + step] = np.einsum("ij,ij->i", diff, diff)
        return out

    def knn_arrays(self, v, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Insertion indices and squared distances of the k nearest points.

        Sorted by distance, equal distances by smaller insertion index.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        v = self._check(v)
        k = min(k, self.size)
        bound = self._leaf_bounds(v)
        ranked = np.argsort(bound, kind="stable")
        first = int(np.searchsorted(np.cumsum(self._leaf_size[ranked]), k)) + 1
        pos, d2 = self._scan(v, ranked[:first])
        kth = np.partition(d2, k - 1)[k - 1]
        rest = ranked[first:]
        cut = int(np.searchsorted(bound[rest], kth * (1 + _PRUNE_SLACK), side="right"))
        if cut:
            pos2, d22 = self._scan(v, rest[:cut])
            pos, d2 = np.concatenate([pos, pos2]), np.concatenate([d2, d22])
            kth = np.partition(d2, k - 1)[k - 1]
        keep = d2 <= kth
        pos, d2 = pos[keep], d2[keep]
        idx = self._sorted_index[pos]
        top = np.lexsort((idx, d2))[:k]
        return idx[top], d2[top]

    def nearest_per_class_arrays(self, v) -> np.ndarray:
        """Squared distance to the nearest point of each class in ``self.classes``."""
        v = self._check(v)
        bound = self._leaf_bounds(v)
        ranked = np.argsort(bound, kind="stable")
        seen = np.logical_or.accumulate(self._leaf_classes[ranked], axis=0)
        first = int(np.argmax(seen.all(axis=1))) + 1
        best = np.full(len(self.classes), np.inf)
        pos, d2 = self._scan(v, ranked[:first])
        np.minimum.at(best, self._sorted_class_pos[pos], d2)
        rest = ranked[first:]
        if len(rest):
            useful = self._leaf_classes[rest] & (
                bound[rest, None] <= best[None, :] * (1 + _PRUNE_SLACK)
            )
            more = rest[useful.any(axis=1)]
            if len(more):
                pos, d2 = self._scan(v, more)
                np.minimum.at(best, self._sorted_class_pos[pos], d2)
        return best


def build_index(
    points: Sequence | np.ndarray,
    labels: Iterable[int] | np.ndarray,
    leaf_size: int = LEAF_SIZE,
) -> NeighborIndex:
    """Build a k-d tree over ``points`` (n x d) tagged with integer ``labels``.

    Deterministic for a given input order; duplicate points are all kept.
    """
    points = np.array(points, dtype=np.float64, copy=True)
    if points.ndim == 1 and points.size:
        points = points.reshape(1, -1)
    if points.ndim != 2:
        raise ValueError("points must form an (n, d) array of equal-length vectors")
    if points.shape[0] == 0:
        raise ValueError("cannot build an index over zero points")
    if points.shape[1] == 0:
        raise ValueError("points have dimension zero")
    if not np.isfinite(points).all():
        raise ValueError("points contain non-finite values")
    labels = np.array(list(labels) if not isinstance(labels, np.ndarray) else labels,
                      dtype=np.int64, copy=True).reshape(-1)
    if labels.shape[0] != points.shape[0]:
        raise ValueError("one label per point is required")
    return NeighborIndex(points, labels, _build_tree(points, leaf_size))


def build_index_from_pairs(pairs: Iterable[tuple[Sequence[float], int]]) -> NeighborIndex:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot build an index over zero points")
    dims = {len(p) for p, _ in pairs}
    if len(dims) != 1:
        raise ValueError(f"inconsistent point dimensions: {sorted(dims)}")
    return build_index([p for p, _ in pairs], [y for _, y in pairs])


def query_knn(idx: NeighborIndex, v, k: int) -> list[NeighborHit]:
    ids, d2 = idx.knn_arrays(v, k)
    return [
        NeighborHit(float(np.sqrt(d)), int(idx.labels[i]), int(i))
        for i, d in zip(ids, d2)
    ]


def query_nearest_per_class(idx: NeighborIndex, v) -> dict[int, float]:
    best = idx.nearest_per_class_arrays(v)
    return {int(c): float(np.sqrt(d)) for c, d in zip(idx.classes, best)}

