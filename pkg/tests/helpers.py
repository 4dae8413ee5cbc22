"""Fixture builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from epsbeta.density import from_expressions, radial_holder
from epsbeta.grid import GridCluster


def two_squares() -> GridCluster:
    """Two adjacent unit squares labelled 1 and 2."""
    return GridCluster(np.array([[1], [2]]), spacing=1.0)


def flat(n: int = 256) -> GridCluster:
    """Chamber 1 fills the lower half of the unit square; the upper half is exterior."""
    lab = np.zeros((n, n), dtype=int)
    lab[:, : n // 2] = 1
    return GridCluster(lab, spacing=1.0 / n)


def disk(n: int = 256, R: float = 0.3, center=(0.5, 0.5), origin=(0.0, 0.0), extent: float = 1.0) -> GridCluster:
    """A single disk chamber on an ``n x n`` grid covering ``[origin, origin + extent]``."""
    h = extent / n
    xs = origin[0] + (np.arange(n) + 0.5) * h
    ys = origin[1] + (np.arange(n) + 0.5) * h
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    lab = ((X - center[0]) ** 2 + (Y - center[1]) ** 2 <= R * R).astype(int)
    return GridCluster(lab, spacing=h, origin=origin)


def nested_annuli(n: int = 128) -> GridCluster:
    """Three nested square annuli; only consecutive chambers touch, the outermost touches the exterior."""
    lab = np.zeros((n, n), dtype=int)
    q = n // 8
    lab[q:n - q, q:n - q] = 3
    lab[2 * q:n - 2 * q, 2 * q:n - 2 * q] = 2
    lab[3 * q:n - 3 * q, 3 * q:n - 3 * q] = 1
    return GridCluster(lab, spacing=1.0 / n)


def vertical_split(n: int = 64) -> GridCluster:
    """Chamber 1 on the left half, chamber 2 on the right half (interface normal e1)."""
    lab = np.ones((n, n), dtype=int)
    lab[n // 2:, :] = 2
    return GridCluster(lab, spacing=1.0 / n)


def enclosed_pair(n: int = 256) -> np.ndarray:
    """Chamber 1 fills the grid up to a margin; chamber 2 is a box inside it.

    The (1,2) interface runs along the column ``x = n/2`` between rows ``n/4``
    and ``3n/4``. Chamber 2 avoids the exterior, so the pair is admissible.
    """
    lab = np.zeros((n, n), dtype=int)
    lab[4:n - 4, 4:n - 4] = 1
    lab[n // 2:3 * n // 4, n // 4:3 * n // 4] = 2
    return lab


def quadrants(n: int = 64) -> GridCluster:
    lab = np.zeros((n, n), dtype=int)
    h = n // 2
    lab[:h, :h] = 1
    lab[:h, h:] = 2
    lab[h:, :h] = 3
    lab[h:, h:] = 4
    return GridCluster(lab, spacing=1.0 / n)


def lipschitz_radial():
    """``g = 1 + 0.5 |x - (0.5, 0.5)|``: Lipschitz, alpha = 1."""
    return radial_holder(center=(0.5, 0.5), alpha=1.0, amplitude=0.5, cap=10.0)


def linear_g():
    """``g = 1 + 0.5 x1`` declared as an alpha = 0 family; its modulus is ``omega(t) = t``."""
    return from_expressions("1", "1 + 0.5*x1", alpha=0.0)
