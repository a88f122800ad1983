"""Seeded synthetic data: XOR blobs, a labeled example stream, and texture images."""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .core import cap_norm

XOR_CORNERS = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
XOR_LABELS = np.array([0, 0, 1, 1])


def xor_clusters(n: int = 2000, sigma: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Four Gaussian blobs at ``(+-1, +-1)``; opposite corners share a class.

    Points are raw (not norm-capped).
    """
    rng = np.random.default_rng(seed)
    corner = rng.integers(0, 4, size=n)
    X = XOR_CORNERS[corner] + sigma * rng.standard_normal((n, 2))
    return X, XOR_LABELS[corner]


def example_stream(n: int, d: int, c: int, chunk: int = 10_000, noise: float = 0.5,
                   seed: int = 0) -> Callable[[], Iterator[tuple[np.ndarray, np.ndarray]]]:
    """Factory for a stream of ``n`` labeled examples generated on the fly, chunk by chunk.

    Class ``y`` draws ``cap_norm(mu_y + noise * N(0, I/d))`` with random unit
    centres ``mu_y``. Each call of the returned function replays the same stream.
    """
    centres = np.random.default_rng(seed).standard_normal((c, d))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)

    def chunks():
        rng = np.random.default_rng(seed + 1)
        left = n
        while left > 0:
            m = min(chunk, left)
            y = rng.integers(0, c, size=m)
            X = centres[y] + noise / np.sqrt(d) * rng.standard_normal((m, d))
            yield cap_norm(X), y
            left -= m

    return chunks


def stripe_image(orientation: str, size: tuple[int, int] = (160, 200), seed: int = 0,
                 noise: float = 0.05) -> np.ndarray:
    """Gray sinusoidal stripes, ``'h'`` (varying down the rows) or ``'v'`` (across columns).

    Period, phase and a small tilt are drawn from ``seed``.
    """
    rng = np.random.default_rng(seed)
    h, w = size
    period = rng.uniform(40.0, 64.0)
    phase = rng.uniform(0, 2 * np.pi)
    tilt = rng.uniform(-0.15, 0.15)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coord = yy + tilt * xx if orientation == "h" else xx + tilt * yy
    img = 0.5 + 0.4 * np.sin(2 * np.pi * coord / period + phase)
    img += noise * rng.standard_normal((h, w))
    return np.clip(img, 0.0, 1.0)
