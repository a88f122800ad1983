"""ML3 score function, per-class scores, and the softmax loss with its gradient.

The score of class ``y`` at ``x`` is ``phi(W_y^T x)`` with
``phi(z) = ||[z]_+||_q``. ``q = inf`` gives ``max(0, max(z))``.
"""
from __future__ import annotations

import math

import numpy as np

from .core import InvalidInputError, InvalidParameterError

# beyond this exponent the power formulas overflow; use the max branch instead
Q_INF_THRESHOLD = 1e6


def parse_q(q) -> float:
    if isinstance(q, str):
        q = math.inf if q.strip().lower() in ("inf", "infinity", "+inf") else float(q)
    q = float(q)
    if math.isnan(q) or q < 1.0:
        raise InvalidParameterError(f"q must be >= 1, got {q}")
    return q


def _is_inf(q: float) -> bool:
    return q > Q_INF_THRESHOLD


def phi(z: np.ndarray, q: float) -> np.ndarray:
    """q-norm of the positive part along the last axis."""
    q = parse_q(q)
    zp = np.maximum(np.asarray(z, dtype=np.float64), 0.0)
    if _is_inf(q):
        return zp.max(axis=-1)
    if q == 1.0:
        return zp.sum(axis=-1)
    # rescale by the max so zp ** q neither overflows nor underflows
    m = zp.max(axis=-1, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    return (safe[..., 0] * ((zp / safe) ** q).sum(axis=-1) ** (1.0 / q)) * (m[..., 0] > 0)


def grad_phi(z: np.ndarray, q: float) -> np.ndarray:
    """Gradient of :func:`phi` along the last axis.

    Where phi is zero the zero vector is returned. For ``q = inf`` the result
    is one-hot at the first maximal positive entry.
    """
    q = parse_q(q)
    z = np.asarray(z, dtype=np.float64)
    zp = np.maximum(z, 0.0)
    if _is_inf(q):
        idx = np.argmax(zp, axis=-1)
        g = np.zeros_like(zp)
        np.put_along_axis(g, idx[..., None], 1.0, axis=-1)
        return g * (zp.max(axis=-1, keepdims=True) > 0)
    if q == 1.0:
        return (z > 0).astype(np.float64)
    f = phi(zp, q)[..., None]
    safe = np.where(f > 0, f, 1.0)
    return np.where(f > 0, (zp / safe) ** (q - 1.0), 0.0)


def _check(W: np.ndarray, x: np.ndarray) -> None:
    if W.ndim != 3:
        raise InvalidInputError(f"prototype tensor must be d x k x c, got shape {W.shape}")
    if x.shape[-1] != W.shape[0]:
        raise InvalidInputError(f"descriptor dimension {x.shape[-1]} does not match prototypes {W.shape[0]}")


def _as_array(W) -> np.ndarray:
    return np.asarray(getattr(W, "W", W), dtype=np.float64)


def raw_scores(W, X: np.ndarray) -> np.ndarray:
    """Inner products ``W_y^T x`` as an array of shape ``X.shape[:-1] + (k, c)``."""
    W = _as_array(W)
    X = np.asarray(X, dtype=np.float64)
    _check(W, X)
    return np.tensordot(X, W, axes=([-1], [0]))


def class_scores(W, x: np.ndarray, q: float) -> np.ndarray:
    """``[phi(W_1^T x), ..., phi(W_c^T x)]``; accepts a batch of rows."""
    s = raw_scores(W, x)
    return phi(np.swapaxes(s, -1, -2), q)


def softmax(f: np.ndarray) -> np.ndarray:
    e = np.exp(f - f.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _loss_from_scores(f: np.ndarray, y) -> np.ndarray:
    fmax = f.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(f - fmax).sum(axis=-1))
    fy = np.take_along_axis(f, np.asarray(y)[..., None], axis=-1)[..., 0]
    return lse - (fy - fmax[..., 0])


def _check_label(y, c: int) -> None:
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= c):
        raise InvalidInputError(f"label out of range for {c} classes")


def softmax_loss(W, x: np.ndarray, y, q: float):
    """Multiclass logistic loss ``log(1 + sum_{r != y} exp(f_r - f_y))``.

    Accepts a single descriptor with an int label, or a batch of rows with a
    label vector (returns per-row losses).
    """
    W = _as_array(W)
    _check_label(y, W.shape[2])
    f = class_scores(W, x, q)
    loss = np.maximum(_loss_from_scores(f, y), 0.0)
    return float(loss) if loss.ndim == 0 else loss


def loss_gradient(W, x: np.ndarray, y: int, q: float) -> np.ndarray:
    """Gradient of :func:`softmax_loss` w.r.t. ``W``, shape d x k x c.

    Class ``r`` gets ``(softmax_r - [r == y]) * grad_phi(W_r^T x) x^T``.
    """
    W = _as_array(W)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError("loss_gradient expects a single descriptor")
    _check_label(y, W.shape[2])
    s = raw_scores(W, x).T  # c x k
    f = phi(s, q)
    coef = softmax(f)
    coef[y] -= 1.0
    g = grad_phi(s, q) * coef[:, None]  # c x k
    return np.einsum("d,ck->dkc", x, g)
