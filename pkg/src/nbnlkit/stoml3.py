"""Stochastic ML3 trainer (stochastic majorization-minimization).

Each update draws an example (or a minibatch), builds the first-order
surrogate of the regularized softmax loss at the current prototypes and moves
to the minimizer of the running surrogate average::

    gamma_t = 1 - 1/sqrt(t)
    A_k    <- gamma_t A_k    + 1/sqrt(t) * softmax_k * grad_phi(s_k) x^T
    B_k    <- gamma_t B_k    + 1/sqrt(t) * [k == y] * grad_phi(s_y) x^T
    Wbar_k <- gamma_t Wbar_k + 1/sqrt(t) * W_k
    W_k    <- (Wbar_k - A_k + B_k) / (1 + lambda)

The proximal weight of the surrogate is fixed to ``LIPSCHITZ = 1``; the closed
form above is the minimizer of the averaged surrogates for that value.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Optional, Union

import numpy as np

from .core import (Dataset, InvalidInputError, InvalidParameterError,
                   NumericalFailureError, PrototypeTensor)
from .ml3 import (_loss_from_scores, grad_phi, loss_gradient, parse_q, phi,
                  raw_scores, softmax, softmax_loss)

log = logging.getLogger("nbnlkit.train")

LIPSCHITZ = 1.0


@dataclass(frozen=True)
class TrainerState:
    A: np.ndarray
    B: np.ndarray
    Wbar: np.ndarray
    W: np.ndarray
    t: int
    lam: float
    q: float
    rng_seed: int = 0

    @property
    def shape(self) -> tuple:
        return self.W.shape

    def prototypes(self) -> PrototypeTensor:
        return PrototypeTensor(self.W, q=self.q, lam=self.lam)


def init_trainer(d: int, k: int, c: int, lam: float = 1.0, q: float = 2.0,
                 init_scale: float = 0.01, seed: int = 0) -> TrainerState:
    """Zero running statistics and uniform ``[-init_scale, init_scale]`` prototypes."""
    if min(d, k, c) < 1:
        raise InvalidParameterError(f"d, k, c must be >= 1, got {(d, k, c)}")
    if lam < 0:
        raise InvalidParameterError(f"lambda must be >= 0, got {lam}")
    if not init_scale > 0:
        raise InvalidParameterError(f"init_scale must be > 0, got {init_scale}")
    q = parse_q(q)
    rng = np.random.default_rng(seed)
    W0 = rng.uniform(-init_scale, init_scale, size=(d, k, c))
    zeros = np.zeros((d, k, c))
    return TrainerState(zeros, zeros.copy(), zeros.copy(), W0, 0, float(lam), q, seed)


def fresh_terms(W: np.ndarray, X: np.ndarray, y: np.ndarray, q: float):
    """Batch-averaged A and B increments at frozen prototypes ``W``.

    Returns ``(dA, dB, losses)`` where ``losses`` are the per-example softmax
    losses at ``W``.
    """
    s = np.swapaxes(raw_scores(W, X), -1, -2)  # b x c x k
    f = phi(s, q)  # b x c
    g = grad_phi(s, q)  # b x c x k
    sigma = softmax(f)
    b = X.shape[0]
    rows = np.arange(b)
    onehot = np.zeros_like(f)
    onehot[rows, y] = 1.0
    dA = _outer_sum(X, g * sigma[..., None]) / b
    dB = _outer_sum(X, g * onehot[..., None]) / b
    return dA, dB, _loss_from_scores(f, y)


def _outer_sum(X: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``sum_b x_b (G_b)^T`` as a d x k x c tensor, via one matmul."""
    b, c, k = G.shape
    return (X.T @ G.reshape(b, c * k)).reshape(-1, c, k).transpose(0, 2, 1)


def _apply(state: TrainerState, dA: np.ndarray, dB: np.ndarray) -> TrainerState:
    t = state.t + 1
    w = 1.0 / math.sqrt(t)
    gamma = 1.0 - w
    A = gamma * state.A + w * dA
    B = gamma * state.B + w * dB
    Wbar = gamma * state.Wbar + w * state.W
    W = (Wbar - A + B) / (1.0 + state.lam)
    if not np.all(np.isfinite(W)):
        raise NumericalFailureError(f"non-finite prototypes after update {t}")
    return replace(state, A=A, B=B, Wbar=Wbar, W=W, t=t)


def _validate_batch(state: TrainerState, X: np.ndarray, y: np.ndarray) -> None:
    d, _, c = state.shape
    if X.ndim != 2 or X.shape[1] != d:
        raise InvalidInputError(f"examples must be b x {d}, got shape {X.shape}")
    if X.shape[0] == 0:
        raise InvalidInputError("empty minibatch")
    if y.shape != (X.shape[0],):
        raise InvalidInputError("one label per example required")
    if np.any(y < 0) or np.any(y >= c):
        raise InvalidInputError(f"label out of range for {c} classes")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("non-finite example")
    if np.any((X * X).sum(axis=1) > 1.0 + 1e-9):
        warnings.warn("example with norm > 1; cap_norm the inputs", RuntimeWarning, stacklevel=3)


def step(state: TrainerState, x: np.ndarray, y: int) -> TrainerState:
    """One update on a single labeled descriptor."""
    return step_minibatch(state, np.asarray(x, dtype=np.float64)[None, :], np.array([y]))


def step_minibatch(state: TrainerState, X, y=None) -> TrainerState:
    """One update (one increment of ``t``) with batch-averaged fresh terms.

    ``X`` is either a b x d matrix with labels ``y``, or a list of ``(x, y)``
    pairs.
    """
    if y is None:
        pairs = list(X)
        if not pairs:
            raise InvalidInputError("empty minibatch")
        X = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
        y = np.array([p[1] for p in pairs])
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _validate_batch(state, X, y)
    dA, dB, _ = fresh_terms(state.W, X, y, state.q)
    return _apply(state, dA, dB)


# ---------------------------------------------------------------------------
# data sources and the epoch driver


class PatchArray:
    """In-memory labeled examples with random access by index array."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise InvalidInputError("PatchArray needs an n x d matrix and n labels")

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "PatchArray":
        """Every patch becomes an independent example carrying its bag's label."""
        labels = ds.labels()
        X = np.concatenate([b.patches for b in ds.bags], axis=0)
        y = np.repeat(labels, [b.n for b in ds.bags])
        return cls(X, y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, idx):
        return self.X[idx], self.y[idx]


ChunkStream = Callable[[], Iterable[tuple]]


@dataclass
class TrainReport:
    updates: int = 0
    epoch_loss: list = field(default_factory=list)
    seconds_per_update: float = 0.0
    W: Optional[PrototypeTensor] = None
    state: Optional[TrainerState] = None


def _batches_from_array(source: PatchArray, batch_size: int,
                        rng: Optional[np.random.Generator]) -> Iterator[tuple]:
    n = len(source)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for lo in range(0, n, batch_size):
        yield source[order[lo:lo + batch_size]]


def _batches_from_stream(chunks: Iterable[tuple], batch_size: int) -> Iterator[tuple]:
    """Regroup a stream of ``(X, y)`` chunks into batches of ``batch_size``."""
    bufX, bufy, have = [], [], 0
    for X, y in chunks:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim == 1:
            X, y = X[None, :], np.atleast_1d(y)
        lo = 0
        while lo < X.shape[0]:
            take = min(batch_size - have, X.shape[0] - lo)
            bufX.append(X[lo:lo + take])
            bufy.append(y[lo:lo + take])
            have += take
            lo += take
            if have == batch_size:
                yield np.concatenate(bufX), np.concatenate(bufy)
                bufX, bufy, have = [], [], 0
    if have:
        yield np.concatenate(bufX), np.concatenate(bufy)


def train(source: Union[PatchArray, Dataset, ChunkStream], epochs: int = 1,
          batch_size: int = 1, shuffle_seed: Optional[int] = 0,
          state: Optional[TrainerState] = None, **init_kwargs) -> TrainReport:
    """Run ``epochs`` passes of STOML3 over ``source``.

    ``source`` is a :class:`PatchArray`, a labeled :class:`Dataset` (flattened
    to patches), or a zero-argument callable returning an iterable of
    ``(X, y)`` chunks, re-invoked once per epoch. Array sources are visited in
    a seeded permutation per epoch (``shuffle_seed=None`` keeps file order);
    chunk streams are consumed in order, holding at most one batch.
    """
    if epochs < 1:
        raise InvalidParameterError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise InvalidParameterError(f"batch size must be >= 1, got {batch_size}")
    if isinstance(source, Dataset):
        source = PatchArray.from_dataset(source)
    if state is None:
        if not isinstance(source, PatchArray):
            raise InvalidParameterError("a stream source needs an explicit initial state")
        c = int(source.y.max()) + 1
        state = init_trainer(source.d, c=init_kwargs.pop("c", c), **init_kwargs)
    if isinstance(source, PatchArray) and source.d != state.shape[0]:
        raise InvalidInputError(f"data dimension {source.d} does not match trainer dimension {state.shape[0]}")

    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    report = TrainReport()
    total_time = 0.0
    for epoch in range(1, epochs + 1):
        if isinstance(source, PatchArray):
            batches = _batches_from_array(source, batch_size, rng)
        else:
            batches = _batches_from_stream(source(), batch_size)
        loss_sum, count, ups, t0 = 0.0, 0, 0, time.perf_counter()
        for X, y in batches:
            _validate_batch(state, X, y)
            dA, dB, losses = fresh_terms(state.W, X, y, state.q)
            state = _apply(state, dA, dB)
            loss_sum += float(losses.sum())
            count += X.shape[0]
            ups += 1
        elapsed = time.perf_counter() - t0
        total_time += elapsed
        report.updates += ups
        avg = loss_sum / max(count, 1)
        report.epoch_loss.append(avg)
        log.info("epoch=%d avg_loss=%.6f updates=%d ups=%.1f",
                 epoch, avg, ups, ups / elapsed if elapsed > 0 else float("inf"))
    report.seconds_per_update = total_time / max(report.updates, 1)
    report.state = state
    report.W = state.prototypes()
    return report


def surrogate_value(state: TrainerState, V, W, x: np.ndarray, y: int,
                    L: float = LIPSCHITZ) -> float:
    """First-order surrogate of the regularized loss anchored at ``V``, evaluated at ``W``.

    ``h(W) = g1(V) + <grad g1(V), W - V> + L/2 ||W - V||^2 + lambda * ||W||^2``
    with ``g1`` the softmax loss on ``(x, y)`` and ``lambda`` from ``state``.
    """
    V = np.asarray(getattr(V, "W", V), dtype=np.float64)
    W = np.asarray(getattr(W, "W", W), dtype=np.float64)
    if V.shape != W.shape:
        raise InvalidInputError(f"anchor shape {V.shape} differs from evaluation point {W.shape}")
    if not L > 0:
        raise InvalidParameterError("L must be > 0")
    diff = W - V
    g1 = softmax_loss(V, x, y, state.q)
    grad = loss_gradient(V, x, y, state.q)
    return float(g1 + np.vdot(grad, diff) + 0.5 * L * np.vdot(diff, diff) + state.lam * np.vdot(W, W))


def regularized_loss(state: TrainerState, W, x: np.ndarray, y: int) -> float:
    W = np.asarray(getattr(W, "W", W), dtype=np.float64)
    return softmax_loss(W, x, y, state.q) + state.lam * float(np.vdot(W, W))
