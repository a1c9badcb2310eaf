"""Small numerical helpers shared by the modules."""

from __future__ import annotations

import numpy as np

from .errors import InsufficientLadder


def fd_weights(x0: float, xs, m: int) -> np.ndarray:
    """Finite-difference weights for the m-th derivative at x0 (Fornberg)."""
    xs = np.asarray(xs, dtype=float)
    n = xs.size
    c = np.zeros((n, m + 1))
    c1 = 1.0
    c4 = xs[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = xs[i] - x0
        for j in range(i):
            c3 = xs[i] - xs[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


def central_weights(m: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Offsets and unit-spacing weights of the centered stencil."""
    q = (m + 1) // 2 + order // 2 - 1
    offs = np.arange(-q, q + 1)
    return offs, fd_weights(0.0, offs, m)


def fit_order(hs, errs) -> float:
    """Least-squares slope of log(err) against log(h)."""
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if hs.size < 3:
        raise InsufficientLadder(f"need >= 3 resolutions, got {hs.size}")
    slope, _ = np.polyfit(np.log(hs), np.log(errs), 1)
    return float(slope)


def pairwise_orders(hs, errs) -> list[float]:
    """Observed order between consecutive ladder entries."""
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    return [float(np.log(errs[i] / errs[i + 1]) / np.log(hs[i] / hs[i + 1]))
            for i in range(hs.size - 1)]


def simpson_weights(n: int, h: float) -> np.ndarray:
    """Composite Simpson weights on n (odd) equispaced nodes."""
    if n % 2 == 0 or n < 3:
        raise ValueError("Simpson rule needs an odd node count >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


def smoothstep(x):
    """C^2 step: 0 for x <= 0, 1 for x >= 1, quintic in between."""
    x = np.clip(x, 0.0, 1.0)
    return x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x)


def smoothstep_prime(x):
    inside = (x > 0.0) & (x < 1.0)
    x = np.clip(x, 0.0, 1.0)
    return np.where(inside, 30.0 * x * x * (1.0 - x) ** 2, 0.0)
