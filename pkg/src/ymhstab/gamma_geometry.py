"""Geometry of the holomorphic curve Gamma in C^2 = R^4 and its Fermi chart.

Gamma is parametrised by (s, theta) in (0, pi/2) x [0, 2 pi) as
z = e^{is} (cos theta, sin theta) / sqrt(sin 2s), with unit normals
m = i e^{-is} Theta and n = i e^{is} Theta^perp.  The rescaled chart uses
s = eps s~, theta = eps theta~ and normal offsets (a, b) along (m, n).

R^4 coordinates are (Re z1, Im z1, Re z2, Im z2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BadIndex, DomainBoundary, OutsideTube, ShapeMismatch

J_MATRIX = np.array([[0.0, -1.0, 0.0, 0.0],
                     [1.0, 0.0, 0.0, 0.0],
                     [0.0, 0.0, 0.0, 1.0],
                     [0.0, 0.0, -1.0, 0.0]])


def _check_s(s):
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0.0) or np.any(s >= np.pi / 2):
        raise DomainBoundary("s must lie strictly inside (0, pi/2)")
    return s


def _to_r4(z1, z2):
    return np.stack([np.real(z1), np.imag(z1), np.real(z2), np.imag(z2)], axis=-1)


def gamma_point(s, theta) -> dict:
    """Position, unit normals and coordinate tangents of Gamma at (s, theta)."""
    s = _check_s(s)
    theta = np.asarray(theta, dtype=float)
    sig = np.sin(2 * s)
    c, t = np.cos(theta), np.sin(theta)
    e = np.exp(1j * s)
    amp = e / np.sqrt(sig)
    damp = amp * (1j - np.cos(2 * s) / sig)
    return {
        "position": _to_r4(amp * c, amp * t),
        "m": _to_r4(1j * np.conj(e) * c, 1j * np.conj(e) * t),
        "n": _to_r4(1j * e * (-t), 1j * e * c),
        "tangents": (_to_r4(damp * c, damp * t), _to_r4(amp * (-t), amp * c)),
    }


def weight_rho(epsilon: float, s_tilde) -> np.ndarray:
    """rho = (sin 2 eps s~)^{-1/2}."""
    s = _check_s(epsilon * np.asarray(s_tilde, dtype=float))
    return np.sin(2 * s) ** -0.5


def weight_rho_displayed(epsilon: float, s_tilde) -> np.ndarray:
    """(sin 2 eps s~)^{-1}: the weight as written in the text, kept for comparison only."""
    s = _check_s(epsilon * np.asarray(s_tilde, dtype=float))
    return 1.0 / np.sin(2 * s)


def tube_radius_sq(epsilon: float, s_tilde) -> np.ndarray:
    """r_eps^2 = 1 / (eps sin 2 eps s~)."""
    return 1.0 / (epsilon * np.sin(2 * epsilon * np.asarray(s_tilde, dtype=float)))


def s_min_for(R: float) -> float:
    """Smallest s with rho(s) <= R, i.e. sin 2 s_min = R^{-2}."""
    if R <= 1.0:
        raise ValueError("truncation radius R must exceed 1")
    return 0.5 * np.arcsin(R ** -2)


def _zero(s, theta):
    return np.zeros(np.broadcast(np.asarray(s), np.asarray(theta)).shape)


@dataclass(frozen=True, eq=False)
class FermiChart:
    """Rescaled Fermi chart with tabulated surface and fiber grids.

    f1, f2 are callables of the unscaled (s, theta) giving the normal
    perturbations; t_1 = a - eps f1, t_2 = b - eps f2.
    """

    epsilon: float
    s_tilde: np.ndarray = field(default_factory=lambda: np.array([]))
    theta_tilde: np.ndarray = field(default_factory=lambda: np.array([]))
    fiber_r: np.ndarray = field(default_factory=lambda: np.array([]))
    fiber_phi: np.ndarray = field(default_factory=lambda: np.array([]))
    f1: Callable = _zero
    f2: Callable = _zero
    R: float | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if np.size(self.s_tilde) and np.size(self.fiber_r):
            s = np.asarray(self.s_tilde)
            _check_s(self.epsilon * s)
            if np.max(self.fiber_r) ** 2 >= np.min(tube_radius_sq(self.epsilon, s)):
                raise OutsideTube("fiber grid leaves the tube a^2 + b^2 < r_eps^2")

    def manifest(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "R": self.R,
            "n_s": int(np.size(self.s_tilde)),
            "n_theta": int(np.size(self.theta_tilde)),
            "n_fiber_r": int(np.size(self.fiber_r)),
            "n_fiber_phi": int(np.size(self.fiber_phi)),
            "s_range": [float(np.min(self.s_tilde)), float(np.max(self.s_tilde))] if np.size(self.s_tilde) else None,
        }


def make_chart(epsilon: float, R: float = 5.0, n_s: int = 25, n_theta: int = 16,
               fiber_r=None, fiber_phi=None, s_margin: float = 0.0, f1=None, f2=None) -> FermiChart:
    """Chart on the truncation rho <= R of Gamma_eps with uniform surface nodes."""
    smin = s_min_for(R) + s_margin
    s = np.linspace(smin, np.pi / 2 - smin, n_s) / epsilon
    theta = 2 * np.pi * np.arange(n_theta) / n_theta / epsilon
    return FermiChart(epsilon, s, theta,
                      np.asarray(fiber_r if fiber_r is not None else [], dtype=float),
                      np.asarray(fiber_phi if fiber_phi is not None else [], dtype=float),
                      f1 or _zero, f2 or _zero, R)


def _eps(chart_or_eps) -> float:
    return chart_or_eps.epsilon if isinstance(chart_or_eps, FermiChart) else float(chart_or_eps)


def _check_tube(eps, s_tilde, a, b):
    S = eps * np.asarray(s_tilde, dtype=float)
    _check_s(S)
    if np.any(np.asarray(a) ** 2 + np.asarray(b) ** 2 >= tube_radius_sq(eps, s_tilde)):
        raise OutsideTube("point outside a^2 + b^2 < r_eps^2")


def fermi_map(chart, s_tilde, theta_tilde, a, b, check: bool = True) -> np.ndarray:
    """Y = Gamma_eps + a m + b n as a point of R^4."""
    eps = _eps(chart)
    if check:
        _check_tube(eps, s_tilde, a, b)
    S = eps * np.asarray(s_tilde, dtype=float)
    T = eps * np.asarray(theta_tilde, dtype=float)
    c, t = np.cos(T), np.sin(T)
    amp = 1.0 / (eps * np.sqrt(np.sin(2 * S)))
    cs, ss = np.cos(S), np.sin(S)
    re1 = amp * cs * c + a * ss * c + b * ss * t
    re2 = amp * cs * t + a * ss * t - b * ss * c
    im1 = amp * ss * c + a * cs * c - b * cs * t
    im2 = amp * ss * t + a * cs * t + b * cs * c
    return np.stack([re1, im1, re2, im2], axis=-1)


def metric_at(chart, s_tilde, theta_tilde, a, b, check: bool = True) -> dict:
    """Closed-form metric of the Fermi chart in (s~, theta~, a, b)."""
    eps = _eps(chart)
    if check:
        _check_tube(eps, s_tilde, a, b)
    S = eps * np.asarray(s_tilde, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    shape = np.broadcast(S, np.asarray(theta_tilde), a, b).shape
    S, a, b = (np.broadcast_to(x, shape) for x in (S, a, b))
    sig = np.sin(2 * S)
    c2 = np.cos(2 * S)
    g = np.zeros(shape + (4, 4))
    g[..., 0, 0] = (eps * a - sig ** -1.5) ** 2 + eps ** 2 * b ** 2
    g[..., 0, 1] = g[..., 1, 0] = -2 * b * eps / np.sqrt(sig)
    g[..., 1, 1] = eps ** 2 * (a * a + b * b) + 1 / sig + 2 * a * eps * np.sqrt(sig)
    g[..., 1, 2] = g[..., 2, 1] = -b * eps * c2
    g[..., 1, 3] = g[..., 3, 1] = a * eps * c2
    g[..., 2, 2] = 1.0
    g[..., 3, 3] = 1.0
    return {"g": g, "detG": np.linalg.det(g)}


def inverse_metric_expansion(epsilon: float, s_tilde, a, b, order: int = 2,
                             variant: str = "corrected") -> np.ndarray:
    """Expansion of g^{ij} in eps through the given order (1 or 2).

    variant="display" uses the second-order coefficients exactly as displayed
    in the source; "corrected" doubles the (s~, a) and (s~, b) entries, which
    is what a series expansion of the exact inverse gives.
    """
    if variant not in ("corrected", "display"):
        raise ValueError("variant must be 'corrected' or 'display'")
    eps = epsilon
    S = eps * np.asarray(s_tilde, dtype=float)
    r = np.sin(2 * S) ** -0.5
    c = np.cos(2 * S)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    shape = np.broadcast(S, a, b).shape
    r, c, a, b = (np.broadcast_to(x, shape) for x in (r, c, a, b))
    g = np.zeros(shape + (4, 4))
    g[..., 0, 0] = r ** -6 + 2 * a * eps * r ** -9
    g[..., 0, 1] = g[..., 1, 0] = 2 * b * eps * r ** -7
    g[..., 1, 1] = r ** -2 - 2 * a * eps * r ** -5
    g[..., 1, 2] = g[..., 2, 1] = b * eps * r ** -2 * c
    g[..., 1, 3] = g[..., 3, 1] = -a * eps * r ** -2 * c
    g[..., 2, 2] = 1.0
    g[..., 3, 3] = 1.0
    if order >= 2:
        e2 = eps * eps
        R2 = a * a + b * b
        k = 2.0 if variant == "corrected" else 1.0
        g2 = np.zeros_like(g)
        g2[..., 0, 0] = 3 * R2 * e2 * r ** -12
        g2[..., 1, 1] = 3 * R2 * e2 * r ** -8
        g2[..., 0, 2] = g2[..., 2, 0] = k * b * b * e2 * r ** -7 * c
        g2[..., 0, 3] = g2[..., 3, 0] = -k * a * b * e2 * r ** -7 * c
        g2[..., 1, 2] = g2[..., 2, 1] = -2 * a * b * e2 * r ** -5 * c
        g2[..., 1, 3] = g2[..., 3, 1] = 2 * a * a * e2 * r ** -5 * c
        g2[..., 2, 2] = b * b * e2 * r ** -2 * c * c
        g2[..., 2, 3] = g2[..., 3, 2] = -a * b * e2 * r ** -2 * c * c
        g2[..., 3, 3] = a * a * e2 * r ** -2 * c * c
        g = g + g2
    return g


def inverse_metric_expansion_check(point, eps_list, variant: str = "corrected") -> list[dict]:
    """Gap between the exact inverse metric and its displayed expansions.

    ``point`` is (s, a, b) with s the unscaled coordinate, held fixed while
    eps varies (so s~ = s / eps); theta does not enter the metric.
    """
    s, a, b = point
    rows = []
    for eps in eps_list:
        st = s / eps
        exact = np.linalg.inv(metric_at(eps, st, 0.0, a, b)["g"])
        gap1 = float(np.max(np.abs(exact - inverse_metric_expansion(eps, st, a, b, 1, variant))))
        gap2 = float(np.max(np.abs(exact - inverse_metric_expansion(eps, st, a, b, 2, variant))))
        rows.append({"epsilon": float(eps), "gap1": gap1, "gap2": gap2,
                     "gap1_over_eps2": gap1 / eps ** 2, "gap2_over_eps3": gap2 / eps ** 3})
    for prev, cur in zip(rows, rows[1:]):
        cur["ratio1"] = prev["gap1"] / cur["gap1"]
        cur["ratio2"] = prev["gap2"] / cur["gap2"]
    return rows


def jacobi_fields(index: int, s, theta):
    """(k1, k2) components along (m, n) of the six bounded Jacobi fields."""
    s = np.asarray(s, dtype=float)
    theta = np.asarray(theta, dtype=float)
    c, t = np.cos(theta), np.sin(theta)
    if index == 1:
        return c * np.sin(s), t * np.sin(s)
    if index == 2:
        return t * np.sin(s), -c * np.sin(s)
    if index == 3:
        return c * np.cos(s), -t * np.cos(s)
    if index == 4:
        return t * np.cos(s), c * np.cos(s)
    if index == 5:
        return np.sqrt(np.sin(2 * s)) * np.ones_like(theta), np.zeros(np.broadcast(s, theta).shape)
    if index == 6:
        return np.zeros(np.broadcast(s, theta).shape), np.sqrt(np.sin(2 * s)) * np.ones_like(theta)
    raise BadIndex(f"Jacobi field index must be 1..6, got {index}")


def ambient_field(index: int, x: np.ndarray) -> np.ndarray:
    """Ambient Killing/conformal fields: translations e_1..e_4, dilation x, rotation J x."""
    x = np.asarray(x, dtype=float)
    if 1 <= index <= 4:
        out = np.zeros_like(x)
        out[..., index - 1] = 1.0
        return out
    if index == 5:
        return x
    if index == 6:
        return x @ J_MATRIX.T
    raise BadIndex(f"field index must be 1..6, got {index}")


def form_inner(C1, C2, g) -> float:
    """g^{ij} C1_i C2_j for one-form components in (s~, theta~, a, b)."""
    C1 = np.asarray(C1, dtype=float)
    C2 = np.asarray(C2, dtype=float)
    g = np.asarray(g, dtype=float)
    if C1.shape != (4,) or C2.shape != (4,) or g.shape != (4, 4):
        raise ShapeMismatch("expected two length-4 component vectors and a 4x4 metric")
    return float(C1 @ np.linalg.solve(g, C2))


def jacobian_gram(chart, s_tilde, theta_tilde, a, b, h: float = 1e-5) -> np.ndarray:
    """J^T J with J the central-difference Jacobian of fermi_map."""
    y = np.array([s_tilde, theta_tilde, a, b], dtype=float)
    J = np.zeros((4, 4))
    for k in range(4):
        d = np.zeros(4)
        d[k] = h
        J[:, k] = (fermi_map(chart, *(y + d), check=False) - fermi_map(chart, *(y - d), check=False)) / (2 * h)
    return J.T @ J


def frame_gram_det(s, theta) -> float:
    """Gram determinant of (t_s/|t_s|, t_theta/|t_theta|, m, n)."""
    p = gamma_point(s, theta)
    ts, tt = p["tangents"]
    F = np.stack([ts / np.linalg.norm(ts), tt / np.linalg.norm(tt), p["m"], p["n"]])
    return float(np.linalg.det(F @ F.T))
