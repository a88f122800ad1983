"""Image-to-class classifiers over bags of descriptors.

* NBNN: sum of squared nearest-neighbour distances from each patch to the
  pooled training descriptors of a class, smallest sum wins.
* NBNL: average over patches of the best prototype score of a class, largest
  average wins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Dataset, FeatureBag, InvalidInputError
from .ml3 import class_scores, parse_q

# query rows processed per block in the exhaustive scan; bounds the
# block x support x d temporary
_SCAN_BLOCK_ELEMS = 1 << 22


def exhaustive_nn(X: np.ndarray, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest row of ``Z`` for every row of ``X``.

    Distances are computed from explicit differences, not the expanded
    ``|x|^2 - 2 x.z + |z|^2`` form, so they are exact up to a single rounding
    per term and ties resolve to the lowest index.
    """
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    n, d = X.shape
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    block = max(1, _SCAN_BLOCK_ELEMS // max(1, Z.shape[0] * d))
    for lo in range(0, n, block):
        diff = X[lo:lo + block, None, :] - Z[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        j = np.argmin(sq, axis=1)
        idx[lo:lo + block] = j
        dist[lo:lo + block] = sq[np.arange(sq.shape[0]), j]
    return idx, dist


class ExactKDTree:
    """k-d tree accelerator that returns exactly what :func:`exhaustive_nn` returns.

    The tree supplies the nearest distance; every support row inside that
    radius (plus a rounding margin) is then rescored with explicit differences
    and the lowest-index minimum is kept.
    """

    def __init__(self, Z: np.ndarray):
        from scipy.spatial import cKDTree

        self.Z = np.asarray(Z, dtype=np.float64)
        self._tree = cKDTree(self.Z)

    def query(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=np.float64)
        r, _ = self._tree.query(X, k=1)
        idx = np.empty(X.shape[0], dtype=np.int64)
        dist = np.empty(X.shape[0])
        for i, (x, ri) in enumerate(zip(X, r)):
            cand = np.array(sorted(self._tree.query_ball_point(x, ri * (1 + 1e-9) + 1e-12)), dtype=np.int64)
            diff = self.Z[cand] - x
            sq = np.einsum("ij,ij->i", diff, diff)
            j = int(np.argmin(sq))
            idx[i], dist[i] = cand[j], sq[j]
        return idx, dist


@dataclass(frozen=True)
class NbnnModel:
    supports: tuple
    d: int
    c: int
    use_kdtree: bool = False

    def __post_init__(self):
        object.__setattr__(self, "supports", tuple(np.asarray(s, dtype=np.float64) for s in self.supports))
        if len(self.supports) != self.c:
            raise InvalidInputError(f"{len(self.supports)} supports for {self.c} classes")
        for y, s in enumerate(self.supports):
            if s.ndim != 2 or s.shape[0] == 0:
                raise InvalidInputError(f"class {y + 1} has an empty support")
            if s.shape[1] != self.d:
                raise InvalidInputError(f"class {y + 1} support has dimension {s.shape[1]}, expected {self.d}")
        if self.use_kdtree:
            object.__setattr__(self, "_trees", tuple(ExactKDTree(s) for s in self.supports))

    def nearest(self, X: np.ndarray, y: int) -> tuple[np.ndarray, np.ndarray]:
        if self.use_kdtree:
            return self._trees[y].query(X)
        return exhaustive_nn(X, self.supports[y])


def build_support(train: Dataset, use_kdtree: bool = False) -> NbnnModel:
    """Pool the patches of every training bag into its class support, in dataset order."""
    labels = train.labels()
    pools = [[] for _ in range(train.c)]
    for bag, y in zip(train.bags, labels):
        pools[y].append(bag.patches)
    for y, pool in enumerate(pools):
        if not pool:
            raise InvalidInputError(f"class {y + 1} has no training bags")
    return NbnnModel(tuple(np.concatenate(p, axis=0) for p in pools), train.d, train.c, use_kdtree)


def _bag_patches(bag, d: int) -> np.ndarray:
    X = bag.patches if isinstance(bag, FeatureBag) else np.asarray(bag, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != d:
        raise InvalidInputError(f"bag dimension {X.shape[-1]} does not match model dimension {d}")
    return X


def i2c_distance(model: NbnnModel, bag, y: int) -> float:
    """Sum over patches of the squared distance to the nearest support descriptor of class ``y``."""
    if not 0 <= y < model.c:
        raise InvalidInputError(f"class {y + 1} out of range 1..{model.c}")
    X = _bag_patches(bag, model.d)
    return float(model.nearest(X, y)[1].sum())


def i2c_distances(model: NbnnModel, bag) -> np.ndarray:
    X = _bag_patches(bag, model.d)
    return np.array([model.nearest(X, y)[1].sum() for y in range(model.c)])


def nbnn_predict(model: NbnnModel, bag) -> int:
    return int(np.argmin(i2c_distances(model, bag)))


def nbnl_scores(W, bag, q: float = math.inf) -> np.ndarray:
    """Per-class mean over patches of ``phi(W_y^T x, q)``.

    With ``q = inf`` this is the average of the per-patch maxima, truncated at
    zero.
    """
    W = np.asarray(getattr(W, "W", W), dtype=np.float64)
    X = _bag_patches(bag, W.shape[0])
    return class_scores(W, X, parse_q(q)).mean(axis=0)


def nbnl_predict(W, bag, q: float = math.inf) -> int:
    return int(np.argmax(nbnl_scores(W, bag, q)))


def check_nbnl_bound(W, bag, y: int, tau: float) -> tuple[float, float, bool]:
    """Both sides of ``sum_x min_i |x - w_i|^2 <= n (1 + tau) - 2 sum_x max_i w_i^T x``.

    The max on the right is the untruncated maximum over the class prototypes.
    Requires ``|w|^2 <= tau`` for every prototype of class ``y`` and ``|x| <= 1``
    for every patch.
    """
    W = np.asarray(getattr(W, "W", W), dtype=np.float64)
    X = _bag_patches(bag, W.shape[0])
    if not 0 <= y < W.shape[2]:
        raise InvalidInputError(f"class {y + 1} out of range 1..{W.shape[2]}")
    Wy = W[:, :, y]
    col_sq = (Wy * Wy).sum(axis=0)
    bad = np.flatnonzero(col_sq > tau + 1e-12)
    if bad.size:
        raise InvalidInputError(
            f"prototype column {int(bad[0])} of class {y + 1} has squared norm {col_sq[bad[0]]:.6g} > tau={tau}")
    row_sq = (X * X).sum(axis=1)
    bad = np.flatnonzero(row_sq > 1.0 + 1e-12)
    if bad.size:
        raise InvalidInputError(f"patch {int(bad[0])} has norm {math.sqrt(row_sq[bad[0]]):.6g} > 1")
    lhs = float(exhaustive_nn(X, Wy.T)[1].sum())
    rhs = X.shape[0] * (1.0 + tau) - 2.0 * float((X @ Wy).max(axis=1).sum())
    return lhs, rhs, lhs <= rhs + 1e-9
