"""Matching-cost volumes between feature maps.

Channel ``k`` of a radius-``D`` volume holds the cost for displacement
``(dx, dy) = (k % (2D+1) - D, k // (2D+1) - D)``.
"""

from __future__ import annotations

import numpy as np

from .engine import DTYPE, ShapeError, Tensor, _make


def num_channels(radius: int) -> int:
    return (2 * radius + 1) ** 2


def displacements(radius: int) -> list[tuple[int, int]]:
    """(dx, dy) for every channel, in channel order."""
    side = 2 * radius + 1
    return [(k % side - radius, k // side - radius) for k in range(side * side)]


def channel_index(dx: int, dy: int, radius: int) -> int:
    return (dy + radius) * (2 * radius + 1) + (dx + radius)


def correlation(f1: Tensor, f2: Tensor, radius: int) -> Tensor:
    """Normalised dot-product cost of ``f1(x)`` against ``f2(x + o)`` for all ``|o|_inf <= radius``.

    Matches that land outside ``f2`` cost 0.
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    if f1.shape != f2.shape:
        axis = next("NCHW"[i] for i in range(4) if f1.shape[i] != f2.shape[i])
        raise ShapeError(f"correlation: feature shapes differ {f1.shape} vs {f2.shape}", axis=axis)
    n, c, h, w = f1.shape
    r = radius
    inv = DTYPE(1.0 / c)
    a = f1.data
    bp = np.pad(f2.data, ((0, 0), (0, 0), (r, r), (r, r)))
    offs = displacements(r)
    out = np.empty((n, len(offs), h, w), dtype=DTYPE)
    for k, (dx, dy) in enumerate(offs):
        shifted = bp[:, :, r + dy:r + dy + h, r + dx:r + dx + w]
        out[:, k] = np.einsum("nchw,nchw->nhw", a, shifted) * inv

    def _back(g):
        g1 = np.zeros(a.shape, dtype=DTYPE) if f1.requires_grad else None
        g2p = np.zeros(bp.shape, dtype=DTYPE) if f2.requires_grad else None
        for k, (dx, dy) in enumerate(offs):
            gk = g[:, k:k + 1] * inv
            if g1 is not None:
                g1 += gk * bp[:, :, r + dy:r + dy + h, r + dx:r + dx + w]
            if g2p is not None:
                g2p[:, :, r + dy:r + dy + h, r + dx:r + dx + w] += gk * a
        g2 = g2p[:, :, r:r + h, r:r + w] if g2p is not None else None
        return g1, g2

    return _make(out, (f1, f2), _back)


def auto_correlation(f1: Tensor, radius: int) -> Tensor:
    """Self-similarity volume of one feature map; identical to ``correlation(f1, f1, radius)``."""
    return correlation(f1, f1, radius)
