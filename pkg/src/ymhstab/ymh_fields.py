"""Four-dimensional fields in the Fermi chart of Gamma_eps.

Fields are represented as callables of chart points Y = (s~, theta~, a, b)
with one-forms given by their components in (ds~, dtheta~, da, db).  All
derivatives are centred sixth-order differences of those callables, so the
covariant operators below only need pointwise evaluation.  The fiber polar
coordinates (r~, phi~) are polar coordinates of t = (a - eps f1, b - eps f2).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from .errors import (BoundaryNonzero, DegreeUnsupported, GridMismatch, StencilMargin,
                     SupportLeak)
from .gamma_geometry import FermiChart, ambient_field, fermi_map, metric_at, s_min_for, tube_radius_sq
from .jacobi_spectral import NormalField
from .numerics import central_weights, simpson_weights, smoothstep
from .vortex_profile import ProfileInterpolant, VortexProfile

FD_STEP = 1e-2
_OFFS, _WTS = central_weights(1, 6)
_OFFS, _WTS = _OFFS[_WTS != 0], _WTS[_WTS != 0]


# ---------------------------------------------------------------------------
# quadrature grid


@dataclass(frozen=True, eq=False)
class FermiQuadrature:
    """Tensor rule on (s~, theta~) x fiber polar (r~, phi~) with weights.

    ``wr`` already contains the polar Jacobian r~.  The chart carries eps
    and the truncation radius; the fiber nodes are kept here because they
    may extend past Sigma_eps (see ``fermi_quadrature``).
    """

    chart: FermiChart
    s_tilde: np.ndarray
    ws: np.ndarray
    theta_tilde: np.ndarray
    wt: np.ndarray
    r: np.ndarray
    wr: np.ndarray
    phi: np.ndarray
    wphi: np.ndarray

    @property
    def epsilon(self) -> float:
        return self.chart.epsilon

    @property
    def shape(self) -> tuple:
        return (self.s_tilde.size, self.theta_tilde.size, self.r.size, self.phi.size)

    @property
    def r_max(self) -> float:
        return float(self.r[0] + self.r[-1])

    def fiber_points(self):
        """Cartesian fiber offsets t of shape (n_r, n_phi, 2)."""
        R, P = np.meshgrid(self.r, self.phi, indexing="ij")
        return np.stack([R * np.cos(P), R * np.sin(P)], axis=-1)

    def points(self, i: int | None = None) -> np.ndarray:
        """Chart points (..., 4) for all nodes or for surface row i."""
        st = self.s_tilde if i is None else self.s_tilde[i:i + 1]
        S, T, R, P = np.meshgrid(st, self.theta_tilde, self.r, self.phi, indexing="ij")
        t1, t2 = R * np.cos(P), R * np.sin(P)
        f1, f2 = _f_values(self.chart, S, T)
        Y = np.stack([S, T, t1 + self.epsilon * f1, t2 + self.epsilon * f2], axis=-1)
        return Y if i is None else Y[0]

    def weights(self, i: int | None = None) -> np.ndarray:
        ws = self.ws if i is None else self.ws[i:i + 1]
        w = np.einsum("i,j,k,l->ijkl", ws, self.wt, self.wr, self.wphi)
        return w if i is None else w[0]


def _gauss_fiber(r_max: float, n_r: int):
    x, w = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * r_max * (x + 1.0)
    return r, 0.5 * r_max * w * r


def fermi_quadrature(epsilon: float, R: float = 8.0, n_s: int = 25, n_theta: int = 16,
                     n_r: int = 32, n_phi: int = 16, r_max: float = 9.0,
                     surface: str = "log", f1=None, f2=None) -> FermiQuadrature:
    """Quadrature on the part of the chart over Gamma_eps^R.

    surface="log" spaces the s-nodes uniformly in tau = log tan s, which
    resolves the ends of Gamma^R where rho grows; "uniform" uses uniform s.
    Simpson in the surface variable, trapezoid in theta~, Gauss-Legendre in
    r~ and trapezoid in phi~.  The fiber radius may exceed the Sigma_eps
    bound; it must stay below rho^3/eps where the chart degenerates.
    """
    if n_s % 2 == 0:
        raise GridMismatch("n_s must be odd for the Simpson surface rule")
    smin = s_min_for(R)
    if surface == "log":
        tr = -np.log(np.tan(smin))
        tau = np.linspace(-tr, tr, n_s)
        s = np.arctan(np.exp(tau))
        ws = simpson_weights(n_s, tau[1] - tau[0]) * np.sin(s) * np.cos(s)
    elif surface == "uniform":
        s = np.linspace(smin, np.pi / 2 - smin, n_s)
        ws = simpson_weights(n_s, s[1] - s[0])
    else:
        raise ValueError("surface must be 'log' or 'uniform'")
    if r_max >= 1.0 / epsilon:
        raise StencilMargin("fiber radius reaches the degenerate set of the chart")
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    chart = FermiChart(epsilon, s / epsilon, theta / epsilon, np.array([]), np.array([]),
                       f1 or _zero2, f2 or _zero2, R)
    r, wr = _gauss_fiber(r_max, n_r)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    return FermiQuadrature(chart, s / epsilon, ws / epsilon, theta / epsilon,
                           np.full(n_theta, 2 * np.pi / n_theta / epsilon), r, wr,
                           phi, np.full(n_phi, 2 * np.pi / n_phi))


def as_quadrature(chart) -> FermiQuadrature:
    """Wrap a FermiChart with tabulated fiber nodes into a quadrature."""
    if isinstance(chart, FermiQuadrature):
        return chart
    if not np.size(chart.fiber_r) or not np.size(chart.s_tilde):
        raise GridMismatch("chart has no fiber or surface nodes")
    s = np.asarray(chart.s_tilde, dtype=float)
    hs = s[1] - s[0]
    if s.size % 2 == 1 and s.size >= 3:
        ws = simpson_weights(s.size, hs)
    else:
        ws = np.full(s.size, hs)
        ws[[0, -1]] *= 0.5
    r = np.asarray(chart.fiber_r, dtype=float)
    gr, gw = _gauss_fiber(r[0] + r[-1], r.size)
    if np.allclose(gr, r, rtol=1e-12, atol=1e-12):
        wr = gw
    else:
        wr = np.gradient(r) * r
    phi = np.asarray(chart.fiber_phi, dtype=float)
    nt = np.size(chart.theta_tilde)
    return FermiQuadrature(chart, s, ws, np.asarray(chart.theta_tilde, dtype=float),
                           np.full(nt, 2 * np.pi / nt / chart.epsilon), r, wr, phi,
                           np.full(phi.size, 2 * np.pi / phi.size))


def _zero2(s, theta):
    return np.zeros(np.broadcast(np.asarray(s), np.asarray(theta)).shape)


def _f_values(chart, S, T):
    eps = chart.epsilon
    return chart.f1(eps * S, eps * T), chart.f2(eps * S, eps * T)


def _f_jet(chart, s, th, h: float = 1e-4):
    """f1, f2 and their (s, theta) derivatives at unscaled coordinates."""
    out = {}
    for name, f in (("1", chart.f1), ("2", chart.f2)):
        out["f" + name] = f(s, th)
        out["f" + name + "s"] = (8 * (f(s + h, th) - f(s - h, th)) - (f(s + 2 * h, th) - f(s - 2 * h, th))) / (12 * h)
        out["f" + name + "t"] = (8 * (f(s, th + h) - f(s, th - h)) - (f(s, th + 2 * h) - f(s, th - 2 * h))) / (12 * h)
    return out


def _has_f(chart) -> bool:
    return any(getattr(f, "__name__", "") not in ("_zero", "_zero2") for f in (chart.f1, chart.f2))


# ---------------------------------------------------------------------------
# pointwise calculus


def _shifted(Y, h):
    """Stencil points: array (4, n_off, ..., 4) of Y + off h e_k."""
    Y = np.asarray(Y, dtype=float)
    out = np.repeat(Y[None, None], 4 * _OFFS.size, axis=0).reshape((4, _OFFS.size) + Y.shape)
    for k in range(4):
        out[k, ..., k] += (_OFFS * h).reshape((-1,) + (1,) * (Y.ndim - 1))
    return out


def grad(fun: Callable, Y, h: float = FD_STEP):
    """Partial derivatives of fun at Y, stacked on a new axis after the point axes."""
    Y = np.asarray(Y, dtype=float)
    vals = fun(_shifted(Y, h))
    npt = Y.ndim - 1
    d = np.tensordot(_WTS / h, vals, axes=(0, 1))  # contract the offset axis
    return np.moveaxis(d, 0, npt)


def metric(Y, epsilon: float, flat: bool = False):
    """(g, g^{-1}, sqrt G) at chart points; identity when ``flat``."""
    Y = np.asarray(Y, dtype=float)
    if flat:
        eye = np.broadcast_to(np.eye(4), Y.shape[:-1] + (4, 4))
        return eye, eye, np.ones(Y.shape[:-1])
    g = metric_at(epsilon, Y[..., 0], Y[..., 1], Y[..., 2], Y[..., 3], check=False)["g"]
    return g, np.linalg.inv(g), np.sqrt(np.linalg.det(g))


def _fiber_polar(Y, chart):
    eps = chart.epsilon
    if _has_f(chart):
        f1, f2 = _f_values(chart, Y[..., 0], Y[..., 1])
    else:
        f1 = f2 = 0.0
    return Y[..., 2] - eps * f1, Y[..., 3] - eps * f2


def _t_forms(Y, chart, c1, c2, ctheta=None):
    """Fermi components of c1 dt_1 + c2 dt_2 (+ ctheta dtheta~)."""
    out = np.zeros(np.shape(c1) + (4,))
    out[..., 2] = c1
    out[..., 3] = c2
    if ctheta is not None:
        out[..., 1] = ctheta
    if _has_f(chart):
        eps = chart.epsilon
        j = _f_jet(chart, eps * Y[..., 0], eps * Y[..., 1])
        out[..., 0] -= eps * eps * (j["f1s"] * c1 + j["f2s"] * c2)
        out[..., 1] -= eps * eps * (j["f1t"] * c1 + j["f2t"] * c2)
    return out


# ---------------------------------------------------------------------------
# radial data


class _Radial:
    """Profile functions with the origin-regular quotients U/r and V/r^2."""

    def __init__(self, profile):
        interp = profile if isinstance(profile, ProfileInterpolant) else profile.smooth()
        self.interp = interp
        self.profile = interp.profile
        self.c1, self.c2 = self.profile.origin_slopes
        self.lam = self.profile.lam

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        U, V, dU, dV = self.interp(r)
        small = r < 1e-7
        rs = np.where(small, 1.0, r)
        U_r = np.where(small, self.c1, U / rs)
        V_r2 = np.where(small, self.c2, V / rs ** 2)
        dV_r = np.where(small, 2 * self.c2, dV / rs)
        return U, V, dU, dV, U_r, V_r2, dV_r


class _Correction:
    """Odd radial interpolants of the first-correction coefficients."""

    def __init__(self, pair):
        r = np.asarray(pair.r, dtype=float)
        x = np.concatenate([-r[::-1], r])
        self.R = float(r[-1] + (r[1] - r[0]) / 2)
        self.eta = CubicSpline(x, np.concatenate([-pair.eta[::-1], pair.eta]))
        self.q = CubicSpline(x, np.concatenate([-pair.q[::-1], pair.q]))
        self.deta0 = float(self.eta(0.0, 1))
        self.dq0 = float(self.q(0.0, 1))

    def quotients(self, r):
        r = np.asarray(r, dtype=float)
        small = r < 1e-7
        rs = np.where(small, 1.0, r)
        inside = r < self.R
        e = np.where(small, self.deta0, self.eta(np.minimum(r, self.R)) / rs)
        q = np.where(small, self.dq0, self.q(np.minimum(r, self.R)) / rs)
        return np.where(inside, e, 0.0), np.where(inside, q, 0.0)


# ---------------------------------------------------------------------------
# approximate solution


@dataclass(frozen=True, eq=False)
class FieldState:
    """Pair (psi, A) on the Fermi chart, evaluated lazily on the quadrature grid."""

    epsilon: float
    grid: FermiQuadrature
    lam: float
    psi_fn: Callable
    A_fn: Callable
    flat: bool = False
    corrected: bool = False
    radial: object = field(default=None, repr=False)

    @property
    def chart(self) -> FermiChart:
        return self.grid.chart

    @cached_property
    def psi(self) -> np.ndarray:
        return self.psi_fn(self.grid.points())

    @cached_property
    def A(self) -> np.ndarray:
        return self.A_fn(self.grid.points())

    def to_csv(self) -> str:
        Y = self.grid.points().reshape(-1, 4)
        psi = self.psi.reshape(-1)
        A = self.A.reshape(-1, 4)
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["s", "theta", "a", "b", "re_psi", "im_psi", "A_s", "A_theta", "A_a", "A_b"])
        for y, p, a in zip(Y, psi, A):
            wr.writerow([repr(float(v)) for v in (*y, p.real, p.imag, *a)])
        return buf.getvalue()


def build_approximate_solution(chart, profile, f_option="zero", correction=None,
                               flat: bool = False) -> FieldState:
    """psi_0 = U(r~) e^{i phi~} and the four-component A_0 on the chart.

    f_option is "zero" or a pair of callables (f1, f2) of the unscaled
    (s, theta).  ``correction`` is a CorrectionPair whose layer
    -2 eps^2 rho^{-6} (eta_1, B_1) is added.  ``flat`` forces the identity
    metric and drops the dtheta~ component: the embedded 2D vortex.
    """
    rad = _Radial(profile)
    if rad.profile.degree != 1:
        raise DegreeUnsupported("the approximate solution is built from the degree-1 vortex")
    grid = as_quadrature(chart)
    if f_option != "zero":
        f1, f2 = f_option
        c = grid.chart
        grid = FermiQuadrature(FermiChart(c.epsilon, c.s_tilde, c.theta_tilde, c.fiber_r, c.fiber_phi,
                                          f1, f2, c.R),
                               grid.s_tilde, grid.ws, grid.theta_tilde, grid.wt, grid.r, grid.wr,
                               grid.phi, grid.wphi)
    ch = grid.chart
    eps = ch.epsilon
    corr = _Correction(correction) if correction is not None else None

    def layer(Y):
        return 2 * eps * eps * np.sin(2 * eps * Y[..., 0]) ** 3

    def psi_fn(Y):
        t1, t2 = _fiber_polar(Y, ch)
        r = np.hypot(t1, t2)
        U_r = rad(r)[4]
        out = U_r * (t1 + 1j * t2)
        if corr is not None:
            e_r, _ = corr.quotients(r)
            out = out - layer(Y) * e_r * (t1 + 1j * t2)
        return out

    def A_fn(Y):
        t1, t2 = _fiber_polar(Y, ch)
        r = np.hypot(t1, t2)
        _, V, _, _, _, V_r2, _ = rad(r)
        c1, c2 = -V_r2 * t2, V_r2 * t1
        if corr is not None:
            _, q_r = corr.quotients(r)
            c1 = c1 - layer(Y) * q_r * t2
            c2 = c2 + layer(Y) * q_r * t1
        if flat:
            out = np.zeros(np.shape(t1) + (4,))
            out[..., 2], out[..., 3] = c1, c2
            return out
        A2 = -(1.0 - V) * np.cos(2 * eps * Y[..., 0])
        return _t_forms(Y, ch, c1, c2, eps * A2)

    return FieldState(eps, grid, rad.lam, psi_fn, A_fn, flat, corr is not None, rad)


# ---------------------------------------------------------------------------
# residual


def _check_margin(state: FieldState, Y, reach: float, tube: bool = True):
    eps = state.epsilon
    S = eps * Y[..., 0]
    if np.any(S - eps * reach <= 0) or np.any(S + eps * reach >= np.pi / 2):
        raise StencilMargin("stencil leaves the surface parameter range")
    if state.flat or not tube:
        return
    t1, t2 = _fiber_polar(Y, state.chart)
    rr = np.hypot(t1, t2) + reach * np.sqrt(2)
    if np.any(rr ** 2 >= tube_radius_sq(eps, Y[..., 0] + reach)) or \
            np.any(rr ** 2 >= tube_radius_sq(eps, Y[..., 0] - reach)):
        raise StencilMargin("stencil leaves the tube a^2 + b^2 < r_eps^2")


def _cov_grad(state: FieldState, Y, h):
    """(psi, A, D_i psi) at Y."""
    psi = state.psi_fn(Y)
    A = state.A_fn(Y)
    D = grad(state.psi_fn, Y, h) - 1j * A * psi[..., None]
    return psi, A, D


def _curvature(A_fn, Y, h):
    dA = grad(A_fn, Y, h)  # [..., i, k] = d_i A_k
    return dA - np.swapaxes(dA, -1, -2)


def residual_S(state: FieldState, Y=None, h: float = FD_STEP, tube: bool = True) -> dict:
    """S1 = -Delta_A psi + (lam/2)(|psi|^2-1) psi and S2 = d*dA - Im(psibar D psi).

    Delta_A psi = G^{-1/2} (d_i - i A_i)(G^{1/2} g^{ij} D_j psi) and
    (d*dA)_m = -G^{-1/2} g_{ml} d_j (G^{1/2} g^{ij} g^{kl} F_{ik}), both by
    nested centred differences.  Y defaults to all quadrature nodes.
    tube=False only checks the surface margin, for grids that extend past
    Sigma_eps inside the nondegenerate part of the chart.
    """
    Y = state.grid.points() if Y is None else np.asarray(Y, dtype=float)
    _check_margin(state, Y, 2 * 3 * h, tube)
    eps, flat = state.epsilon, state.flat

    def flux_psi(Z):
        _, _, D = _cov_grad(state, Z, h)
        _, gi, sq = metric(Z, eps, flat)
        return sq[..., None] * np.einsum("...ij,...j->...i", gi, D)

    def flux_F(Z):
        F = _curvature(state.A_fn, Z, h)
        _, gi, sq = metric(Z, eps, flat)
        return sq[..., None, None] * np.einsum("...ij,...kl,...ik->...jl", gi, gi, F)

    psi, A, D = _cov_grad(state, Y, h)
    g, gi, sq = metric(Y, eps, flat)
    Phi = flux_psi(Y)
    div = np.einsum("...ii->...", grad(flux_psi, Y, h))
    lap = (div - 1j * np.einsum("...i,...i->...", A, Phi)) / sq
    S1 = -lap + 0.5 * state.lam * (np.abs(psi) ** 2 - 1.0) * psi
    divF = np.einsum("...jjl->...l", grad(flux_F, Y, h))
    dstard = -np.einsum("...ml,...l->...m", g, divF) / sq[..., None]
    S2 = dstard - np.imag(np.conj(psi)[..., None] * D)
    return {"S1": S1, "S2": S2, "points": Y}


def leading_residual(state: FieldState, Y) -> dict:
    """The eps^2 leading terms 2 eps^2 rho^{-6} (r~U' e^{i phi~}, -sin phi~ V' dt_1 + cos phi~ V' dt_2)."""
    Y = np.asarray(Y, dtype=float)
    eps = state.epsilon
    t1, t2 = _fiber_polar(Y, state.chart)
    r = np.hypot(t1, t2)
    _, _, dU, dV, _, _, _ = state.radial(r)
    w = 2 * eps * eps * np.sin(2 * eps * Y[..., 0]) ** 3
    phase = (t1 + 1j * t2) / np.where(r > 0, r, 1.0)
    S1 = w * r * dU * phase
    S2 = np.zeros(Y.shape[:-1] + (2,))
    S2[..., 0] = -w * phase.imag * dV
    S2[..., 1] = w * phase.real * dV
    return {"S1": S1, "S2": S2}


def chart_points(epsilon: float, s, theta, r_tilde, phi_tilde) -> np.ndarray:
    """Chart points from unscaled surface coordinates and fiber polar coordinates."""
    s, theta, r_tilde, phi_tilde = np.broadcast_arrays(*(np.asarray(x, dtype=float)
                                                         for x in (s, theta, r_tilde, phi_tilde)))
    return np.stack([s / epsilon, theta / epsilon, r_tilde * np.cos(phi_tilde),
                     r_tilde * np.sin(phi_tilde)], axis=-1)


def residual_scan(profile, eps_list=(0.08, 0.04, 0.02), samples=None, correction=None) -> list[dict]:
    """Relative gap |S1 / leading - 1| at fixed (s, theta, r~, phi~) samples across eps."""
    if samples is None:
        samples = default_residual_samples()
    samples = np.asarray(samples, dtype=float)
    rows = []
    for eps in eps_list:
        q = fermi_quadrature(eps, R=8.0, n_s=3, n_theta=2, n_r=2, n_phi=2)
        st = build_approximate_solution(q, profile, correction=correction)
        Y = chart_points(eps, *samples.T)
        res = residual_S(st, Y)
        lead = leading_residual(st, Y)
        rel = np.abs(res["S1"] / lead["S1"] - 1.0)
        gap2 = np.max(np.abs(res["S2"][:, 2:] - lead["S2"]), axis=-1)
        rows.append({"epsilon": float(eps), "rel_gap": rel, "max_rel_gap": float(rel.max()),
                     "S1_gap_over_eps3": np.abs(res["S1"] - lead["S1"]) / eps ** 3,
                     "S2_gap_over_eps3": gap2 / eps ** 3})
    for prev, cur in zip(rows, rows[1:]):
        cur["ratio"] = prev["rel_gap"] / cur["rel_gap"]
    return rows


def default_residual_samples() -> np.ndarray:
    """Five (s, theta, r~, phi~) sample points away from cos 2s = 0 and the core."""
    return np.array([[np.pi / 3, 0.3, 1.0, 0.2],
                     [0.5, 1.1, 0.8, 1.3],
                     [0.9, 2.0, 1.5, 2.9],
                     [1.2, 4.0, 1.2, 4.4],
                     [0.35, 5.5, 2.0, 5.6]])


# ---------------------------------------------------------------------------
# lifted perturbations


def _fiber_cutoff(spec: dict | None):
    spec = dict(spec or {"kind": "fiber", "inner": 6.0, "outer": 9.0})
    kind = spec.get("kind", "fiber")
    if kind == "fiber":
        r0, r1 = float(spec.get("inner", 6.0)), float(spec.get("outer", 9.0))

        def chi(Y, t1, t2, eps):
            return 1.0 - smoothstep((np.hypot(t1, t2) - r0) / (r1 - r0))
    elif kind == "tube":
        def chi(Y, t1, t2, eps):
            re = np.sqrt(tube_radius_sq(eps, Y[..., 0]))
            return 1.0 - smoothstep((t1 * t1 + t2 * t2 - 0.5 * re) / (0.5 * re))
    elif kind == "none":
        def chi(Y, t1, t2, eps):
            return np.ones_like(t1)
    else:
        raise ValueError(f"unknown cutoff kind {kind!r}")
    return spec, chi


def kernel_fields(radial: _Radial, Y, chart, j: int):
    """(T_j, T_Bj) at chart points with the eps cos 2s V' dtheta~ part of T_Bj."""
    eps = chart.epsilon
    t1, t2 = _fiber_polar(Y, chart)
    r = np.hypot(t1, t2)
    U, V, dU, dV, U_r, V_r2, dV_r = radial(r)
    rs = np.where(r > 0, r, 1.0)
    cph, sph = np.where(r > 0, t1 / rs, 1.0), np.where(r > 0, t2 / rs, 0.0)
    e = cph + 1j * sph
    a = U_r * (1.0 - V)
    c2 = np.cos(2 * eps * Y[..., 0])
    if j == 1:
        T = e * (dU * cph - 1j * a * sph)
        B = _t_forms(Y, chart, np.zeros_like(r), dV_r, eps * c2 * cph * dV)
    elif j == 2:
        T = e * (dU * sph + 1j * a * cph)
        B = _t_forms(Y, chart, -dV_r, np.zeros_like(r), eps * c2 * sph * dV)
    else:
        raise ValueError("kernel index must be 1 or 2")
    return T, B


def _normal_callable(chart, N):
    """(k1, k2) callable of (s, theta) from a callable or a grid NormalField."""
    if callable(N):
        return N
    if not isinstance(N, NormalField):
        raise GridMismatch("normal field must be a NormalField or a callable")
    eps = chart.epsilon
    s = eps * np.asarray(chart.s_tilde)
    nt = np.size(chart.theta_tilde)
    if np.shape(N.k1) != (s.size, nt):
        raise GridMismatch(f"normal field shape {np.shape(N.k1)} != chart surface {(s.size, nt)}")
    splines = [CubicSpline(s, np.fft.rfft(k, axis=1), axis=0) for k in (N.k1, N.k2)]
    freqs = np.arange(nt // 2 + 1)

    def fn(ss, th):
        ss, th = np.broadcast_arrays(np.asarray(ss, dtype=float), np.asarray(th, dtype=float))
        out = []
        for sp in splines:
            c = sp(ss.ravel())
            wt = np.where((freqs == 0) | ((nt % 2 == 0) & (freqs == nt // 2)), 1.0, 2.0)
            val = np.real(c * np.exp(1j * np.outer(th.ravel(), freqs)) * wt) / nt
            out.append(val.sum(axis=1).reshape(ss.shape))
        return tuple(out)

    return fn


@dataclass(frozen=True, eq=False)
class LiftedPerturbation:
    """v = chi (k1 T_1 + k2 T_2) as callables of chart points."""

    grid: FermiQuadrature
    xi_fn: Callable
    B_fn: Callable
    cutoff: dict
    source: object

    @cached_property
    def xi(self) -> np.ndarray:
        return self.xi_fn(self.grid.points())

    @cached_property
    def B(self) -> np.ndarray:
        return self.B_fn(self.grid.points())

    def scale(self, c: float) -> "LiftedPerturbation":
        return LiftedPerturbation(self.grid, lambda Y: c * self.xi_fn(Y), lambda Y: c * self.B_fn(Y),
                                  self.cutoff, self.source)


def lift_normal_field(chart, profile, N, cutoff: dict | None = None) -> LiftedPerturbation:
    """Lift a normal field on Gamma_eps to v = chi (k1 T_1 + k2 T_2)."""
    grid = as_quadrature(chart)
    ch = grid.chart
    eps = ch.epsilon
    rad = profile.radial if isinstance(profile, FieldState) else _Radial(profile)
    Nfn = _normal_callable(ch, N)
    spec, chi = _fiber_cutoff(cutoff)

    def parts(Y):
        k1, k2 = Nfn(eps * Y[..., 0], eps * Y[..., 1])
        t1, t2 = _fiber_polar(Y, ch)
        c = chi(Y, t1, t2, eps)
        return k1 * c, k2 * c

    def xi_fn(Y):
        c1, c2 = parts(Y)
        return c1 * kernel_fields(rad, Y, ch, 1)[0] + c2 * kernel_fields(rad, Y, ch, 2)[0]

    def B_fn(Y):
        c1, c2 = parts(Y)
        return c1[..., None] * kernel_fields(rad, Y, ch, 1)[1] + c2[..., None] * kernel_fields(rad, Y, ch, 2)[1]

    return LiftedPerturbation(grid, xi_fn, B_fn, spec, N)


def pair_from_callables(chart, xi_fn, B_fn) -> LiftedPerturbation:
    """General perturbation (xi, B) given as callables of chart points."""
    return LiftedPerturbation(as_quadrature(chart), xi_fn, B_fn, {"kind": "none"}, None)


# ---------------------------------------------------------------------------
# quadratic form


def _form_parts(state: FieldState, fun_xi, fun_B, Y, h):
    xi = fun_xi(Y)
    B = fun_B(Y)
    Dxi = grad(fun_xi, Y, h) - 1j * state.A_fn(Y)[..., :] * xi[..., None]
    F = _curvature(fun_B, Y, h)
    eps, flat = state.epsilon, state.flat

    def flux(Z):
        _, gi, sq = metric(Z, eps, flat)
        return sq[..., None] * np.einsum("...ij,...i->...j", gi, fun_B(Z))

    _, gi, sq = metric(Y, eps, flat)
    dstar = -np.einsum("...jj->...", grad(flux, Y, h)) / sq
    return xi, B, Dxi, F, dstar


def _boundary_check(state: FieldState, v: LiftedPerturbation, tol: float):
    """v must vanish on the s~ end rows and on the outer fiber circle."""
    q = state.grid
    ends = np.stack([q.points(0), q.points(q.s_tilde.size - 1)])
    S, T, P = np.meshgrid(q.s_tilde, q.theta_tilde, q.phi, indexing="ij")
    f1, f2 = _f_values(q.chart, S, T)
    rim = np.stack([S, T, q.r_max * np.cos(P) + q.epsilon * f1,
                    q.r_max * np.sin(P) + q.epsilon * f2], axis=-1)
    for Y in (ends, rim):
        if np.max(np.abs(v.xi_fn(Y))) > tol or np.max(np.abs(v.B_fn(Y))) > tol:
            raise SupportLeak("perturbation does not vanish on the grid boundary")


def bilinear_form_4d(state: FieldState, v: LiftedPerturbation, w: LiftedPerturbation | None = None,
                     gauge_fixed: bool = True, h: float = FD_STEP, tol: float = 1e-10) -> float:
    """Bilinear extension of the 4D quadratic form, integrated with sqrt G.

    Gauge-fixed density:
      <D xi, D zeta> + <dB, dC> + d*B d*C + <B, C>|psi|^2
      + 2<Im(conj(D psi) xi), C> + 2<Im(conj(D psi) zeta), B>
      + (lam-1)/2 Re(psibar xi psibar zeta) + (lam+1/2)|psi|^2 Re(xi conj zeta) - lam/2 Re(xi conj zeta).
    Without gauge fixing the d*B d*C term and the quartic rearrangement are
    replaced by the plain second variation of the energy.
    """
    w = v if w is None else w
    _boundary_check(state, v, tol)
    if w is not v:
        _boundary_check(state, w, tol)
    q = state.grid
    lam = state.lam
    total = 0.0
    for i in range(q.s_tilde.size):
        Y = q.points(i)
        wt = q.weights(i)
        psi, A, Dpsi = _cov_grad(state, Y, h)
        _, gi, sq = metric(Y, state.epsilon, state.flat)
        xi, B, Dxi, FB, dB = _form_parts(state, v.xi_fn, v.B_fn, Y, h)
        if w is v:
            ze, C, Dze, FC, dC = xi, B, Dxi, FB, dB
        else:
            ze, C, Dze, FC, dC = _form_parts(state, w.xi_fn, w.B_fn, Y, h)
        ip = lambda X1, X2: np.einsum("...ij,...i,...j->...", gi, X1, X2)
        dens = np.real(np.einsum("...ij,...i,...j->...", gi, Dxi, np.conj(Dze)))
        dens += 0.5 * np.einsum("...ik,...jl,...ij,...kl->...", gi, gi, FB, FC)
        p2 = np.abs(psi) ** 2
        dens += ip(B, C) * p2
        cur_v = np.imag(np.conj(Dpsi) * xi[..., None])
        cur_w = np.imag(np.conj(Dpsi) * ze[..., None])
        dens += 2 * ip(cur_v, C) + 2 * ip(cur_w, B)
        xz = np.real(xi * np.conj(ze))
        if gauge_fixed:
            dens += dB * dC
            dens += 0.5 * (lam - 1) * np.real(np.conj(psi) * xi * np.conj(psi) * ze)
            dens += (lam + 0.5) * p2 * xz - 0.5 * lam * xz
        else:
            dens -= dB * np.imag(np.conj(psi) * ze) + dC * np.imag(np.conj(psi) * xi)
            dens += lam * np.real(np.conj(psi) * xi) * np.real(np.conj(psi) * ze)
            dens -= 0.5 * lam * (1.0 - p2) * xz
        total += float(np.sum(wt * sq * dens))
    return total


def quadratic_form_4d(state: FieldState, v: LiftedPerturbation, gauge_fixed: bool = True,
                      h: float = FD_STEP) -> float:
    """The 4D quadratic form of v at the state (see ``bilinear_form_4d``)."""
    return bilinear_form_4d(state, v, None, gauge_fixed, h)


def gauge_direction(state: FieldState, gamma: Callable) -> LiftedPerturbation:
    """The infinitesimal gauge transformation (i gamma psi, d gamma)."""
    return pair_from_callables(state.grid, lambda Y: 1j * gamma(Y) * state.psi_fn(Y),
                               lambda Y: grad(gamma, Y))


def gauge_defect(state: FieldState, gamma: Callable, h: float = FD_STEP) -> float:
    """int gamma^2 Re(psibar S1) sqrt G: the un-gauge-fixed form on a gauge direction."""
    q = state.grid
    total = 0.0
    for i in range(q.s_tilde.size):
        Y = q.points(i)
        S1 = residual_S(state, Y, h, tube=False)["S1"]
        _, _, sq = metric(Y, state.epsilon, state.flat)
        total += float(np.sum(q.weights(i) * sq * gamma(Y) ** 2 * np.real(np.conj(state.psi_fn(Y)) * S1)))
    return total


# ---------------------------------------------------------------------------
# energy comparison


def surface_cutoff_field(index: int, R: float):
    """Jacobi field N_index times 1 - smoothstep((rho - R/2)/(R/2)) as a callable."""
    from .gamma_geometry import jacobi_fields

    def fn(s, theta):
        k1, k2 = jacobi_fields(index, s, theta)
        rho = np.sin(2 * np.asarray(s, dtype=float)) ** -0.5
        eta = 1.0 - smoothstep((rho - 0.5 * R) / (0.5 * R))
        return k1 * eta, k2 * eta

    return fn


def _surface_derivs(Nfn, s, th, h: float = 1e-5):
    def d(f, var):
        if var == 0:
            return (8 * (np.stack(f(s + h, th)) - np.stack(f(s - h, th)))
                    - (np.stack(f(s + 2 * h, th)) - np.stack(f(s - 2 * h, th)))) / (12 * h)
        return (8 * (np.stack(f(s, th + h)) - np.stack(f(s, th - h)))
                - (np.stack(f(s, th + 2 * h)) - np.stack(f(s, th - 2 * h)))) / (12 * h)
    return np.stack(Nfn(s, th)), d(Nfn, 0), d(Nfn, 1)


def surface_energy(q: FermiQuadrature, Nfn, scaled: bool = True) -> dict:
    """int_{Gamma_eps^R} (|nabla^nu N|^2 - 2 eps^2 rho^{-6}|N|^2) on the quadrature's surface nodes.

    scaled=True integrates in (s~, theta~) with the rescaled metric; False
    evaluates the Gamma-level form in (s, theta), which is the same number
    by scale invariance.  Also returns the normalizer int |nabla N|^2 + rho^{-6}|N|^2.
    """
    eps = q.epsilon
    S, T = np.meshgrid(q.s_tilde, q.theta_tilde, indexing="ij")
    W = np.outer(q.ws, q.wt)
    s, th = eps * S, eps * T
    k, ks, kt = _surface_derivs(Nfn, s, th)
    sig = np.sin(2 * s)
    c = np.cos(2 * s)
    if scaled:
        ks, kt = eps * ks, eps * kt
        rho2 = 1 / sig
        grad2 = sig ** 3 * (ks ** 2).sum(0) + sig * ((kt[0] - eps * c * k[1]) ** 2 + (kt[1] + eps * c * k[0]) ** 2)
        pot = 2 * eps ** 2 * sig ** 3 * (k ** 2).sum(0)
        dvol = rho2 ** 2 * W
    else:
        grad2 = sig ** 3 * (ks ** 2).sum(0) + sig * ((kt[0] - c * k[1]) ** 2 + (kt[1] + c * k[0]) ** 2)
        pot = 2 * sig ** 3 * (k ** 2).sum(0)
        dvol = sig ** -2 * W * eps * eps
    return {"form": float(np.sum(dvol * (grad2 - pot))),
            "norm": float(np.sum(dvol * (grad2 + 0.5 * pot)))}


def kernel_norm_sq(profile, r_max: float = 30.0, n: int = 4000) -> float:
    """int_{R^2} |T_1|^2 + |T_B1|^2 over the fiber (2D kernel, eps -> 0)."""
    rad = _Radial(profile)
    x, w = np.polynomial.legendre.leggauss(64)
    edges = np.linspace(0.0, r_max, n // 64 + 2)
    tot = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        r = 0.5 * (hi - lo) * (x + 1) + lo
        U, V, dU, dV, U_r, V_r2, dV_r = rad(r)
        a = U_r * (1 - V)
        dens = np.pi * (dU ** 2 + a ** 2) + 2 * np.pi * dV_r ** 2
        tot += float(np.sum(0.5 * (hi - lo) * w * r * dens))
    return tot


def default_fiber_cutoff(epsilon: float) -> dict:
    """Fiber cutoff from outer - 4 to outer = min(14, 0.88/eps).

    The 2D form of chi T_1 is O(e^{-2 r}) and is multiplied by the eps^{-2}
    area of Gamma_eps, so the cutoff must sit far out; it must also stay
    inside the radius 1/eps where the chart degenerates at rho = 1.
    """
    outer = min(14.0, 0.88 / epsilon)
    return {"kind": "fiber", "inner": outer - 4.0, "outer": outer}


def energy_comparison(profile, N, epsilon: float, R: float = 8.0, grid: dict | None = None,
                      correction="auto", cutoff: dict | None = None, tol: float = 1e-12) -> dict:
    """Compare the 4D form of the lifted field with the surface form times int |T_1|^2.

    N is a callable (s, theta) -> (k1, k2) vanishing at rho = R.  The state
    is the approximate solution plus the first-correction layer (computed
    when ``correction="auto"``; pass None to omit it).
    """
    if isinstance(correction, str) and correction == "auto":
        from .vortex_linearization import solve_first_correction
        correction = solve_first_correction(profile if isinstance(profile, VortexProfile) else profile.profile)
    cutoff = cutoff or default_fiber_cutoff(epsilon)
    opts = {"n_s": 25, "n_theta": 16, "n_r": 32, "n_phi": 16, "r_max": float(cutoff.get("outer", 9.0))}
    opts.update(grid or {})
    q = fermi_quadrature(epsilon, R=R, **opts)
    Nfn = _normal_callable(q.chart, N)
    ends = np.stack(Nfn(q.s_tilde[[0, -1]] * epsilon, np.zeros(2)))
    if np.max(np.abs(ends)) > tol:
        raise BoundaryNonzero("normal field must vanish at rho = R")
    state = build_approximate_solution(q, profile, correction=correction)
    v = lift_normal_field(q, state, Nfn, cutoff)
    lhs = quadratic_form_4d(state, v)
    surf = surface_energy(q, Nfn)
    kn = kernel_norm_sq(profile)
    rhs = surf["form"] * kn
    gap = lhs - rhs
    normal = surf["norm"] * kn
    return {"epsilon": float(epsilon), "lhs": lhs, "rhs": rhs, "gap": gap,
            "normalized_gap": abs(gap) / normal if normal > 0 else 0.0,
            "gap_over_eps": abs(gap) / normal / epsilon if normal > 0 else 0.0,
            "kernel_norm": kn, "surface_form": surf["form"]}


# ---------------------------------------------------------------------------
# fiber projection


@dataclass(frozen=True, eq=False)
class Projection:
    N: NormalField
    vperp_xi: np.ndarray
    vperp_B: np.ndarray
    defects: np.ndarray


def _fiber_inner(q: FermiQuadrature, xi1, B1, xi2, B2):
    """Per-surface-node fiber integral of Re(xi1 conj xi2) + g0^{ij} B1_i B2_j."""
    eps = q.epsilon
    sig = np.sin(2 * eps * q.s_tilde)[:, None, None, None]
    gdiag = [sig ** 3, sig, 1.0, 1.0]
    dens = np.real(xi1 * np.conj(xi2)) + sum(gdiag[k] * B1[..., k] * B2[..., k] for k in range(4))
    wf = np.outer(q.wr, q.wphi)
    return np.einsum("ijkl,kl->ij", dens, wf)


def fiber_projection(chart, profile, xi, B, cutoff: dict | None = None) -> Projection:
    """k_j = int <v, T_j> / int chi |T_1|^2 per surface node and v_perp = v - chi(k1 T_1 + k2 T_2)."""
    q = as_quadrature(chart)
    if np.shape(xi) != q.shape or np.shape(B) != q.shape + (4,):
        raise GridMismatch("perturbation arrays do not match the quadrature grid")
    rad = profile.radial if isinstance(profile, FieldState) else _Radial(profile)
    Y = q.points()
    T1, TB1 = kernel_fields(rad, Y, q.chart, 1)
    T2, TB2 = kernel_fields(rad, Y, q.chart, 2)
    _, chi_fn = _fiber_cutoff(cutoff)
    t1, t2 = _fiber_polar(Y, q.chart)
    chi = chi_fn(Y, t1, t2, q.epsilon)
    den = _fiber_inner(q, chi * T1, chi[..., None] * TB1, T1, TB1)
    k1 = _fiber_inner(q, xi, B, T1, TB1) / den
    k2 = _fiber_inner(q, xi, B, T2, TB2) / den
    xp = xi - chi * (k1[..., None, None] * T1 + k2[..., None, None] * T2)
    Bp = B - chi[..., None] * (k1[..., None, None, None] * TB1 + k2[..., None, None, None] * TB2)
    defects = np.stack([_fiber_inner(q, xp, Bp, T1, TB1), _fiber_inner(q, xp, Bp, T2, TB2)])
    return Projection(NormalField(k1, k2), xp, Bp, defects)


# ---------------------------------------------------------------------------
# symmetry kernels


def symmetry_kernels(state: FieldState, j: int, Y=None, h: float = FD_STEP):
    """Z_j = (X^i D_i psi, X^i F_ik dy^k) for the ambient field X_j pulled back to the chart.

    j = 1..4 are translations, 5 the dilation x, 6 the rotation J x.  The
    dilation and rotation use the unscaled position eps x, so that all six
    reduce to (N_j.m) T_1 + (N_j.n) T_2 at leading order.
    """
    Y = state.grid.points() if Y is None else np.asarray(Y, dtype=float)
    _check_margin(state, Y, 3 * h)
    eps = state.epsilon

    def xmap(Z):
        return fermi_map(eps, Z[..., 0], Z[..., 1], Z[..., 2], Z[..., 3], check=False)

    J = np.swapaxes(grad(xmap, Y, h), -1, -2)  # [..., x_a, y_i]
    Xamb = ambient_field(j, eps * xmap(Y))
    X = np.linalg.solve(J, Xamb[..., None])[..., 0]
    _, _, D = _cov_grad(state, Y, h)
    F = _curvature(state.A_fn, Y, h)
    return np.einsum("...i,...i->...", X, D), np.einsum("...i,...ik->...k", X, F)


# ---------------------------------------------------------------------------
# weighted norm


@dataclass(frozen=True, eq=False)
class ChartField:
    """Values of a scalar or one-form on the quadrature grid."""

    grid: FermiQuadrature
    values: np.ndarray


def _disk_rule(n_rad: int = 6, n_ang: int = 12):
    """Offsets and weights integrating f(u) pi (1 - |u|^2) over the unit disk.

    The surface directions vary on the scale 1/eps, so the unit 4-ball
    around a node is a family of surface disks of area pi (1 - |u|^2) over
    fiber offsets u.  For f = 1 the weights sum to pi^2 / 2.
    """
    x, w = np.polynomial.legendre.leggauss(n_rad)
    rho = 0.5 * (x + 1.0)
    wr = 0.5 * w * rho * np.pi * (1.0 - rho ** 2)
    ang = 2 * np.pi * (np.arange(n_ang) + 0.5) / n_ang
    U = np.stack([np.outer(rho, np.cos(ang)), np.outer(rho, np.sin(ang))], axis=-1).reshape(-1, 2)
    W = np.outer(wr, np.full(n_ang, 2 * np.pi / n_ang)).reshape(-1)
    return U, W


def weighted_norm(field: ChartField, beta: float, p: float, sigma: float) -> float:
    """sup over nodes of rho^beta e^{sigma r~} ||g||_{L^p(B_1)}.

    The L^p norm over the unit ball around each node is a fixed disk rule
    in the fiber (see ``_disk_rule``) applied to the field interpolated
    linearly in (r~, phi~); the field is taken as zero beyond the grid.
    """
    if p < 1 or sigma < 0:
        raise ValueError("need p >= 1 and sigma >= 0")
    q = field.grid
    vals = np.abs(np.asarray(field.values))
    if vals.ndim == 5:
        vals = np.sqrt(np.sum(vals ** 2, axis=-1))
    if vals.shape != q.shape:
        raise GridMismatch("field does not match the quadrature grid")
    ns, nt, nr, nphi = q.shape
    data = np.moveaxis(vals.reshape(ns * nt, nr, nphi), 0, -1) ** p
    data = np.concatenate([data[:, -1:], data, data[:, :1]], axis=1)
    dphi = 2 * np.pi / nphi
    phis = np.concatenate([[q.phi[0] - dphi], q.phi, [q.phi[-1] + dphi]])
    rs = np.concatenate([[0.0], q.r, [q.r_max]])
    data = np.concatenate([data[:1], data, np.zeros_like(data[:1])], axis=0)
    interp = RegularGridInterpolator((rs, phis), data, bounds_error=False, fill_value=0.0)
    U, W = _disk_rule()
    centers = q.fiber_points().reshape(-1, 2)
    pts = centers[:, None, :] + U[None, :, :]
    pr = np.hypot(pts[..., 0], pts[..., 1])
    pp = np.mod(np.arctan2(pts[..., 1], pts[..., 0]) - q.phi[0], 2 * np.pi) + q.phi[0]
    sampled = interp(np.stack([pr.ravel(), pp.ravel()], axis=-1)).reshape(pr.shape + (ns * nt,))
    lp = np.einsum("cqk,q->kc", sampled, W).reshape(ns, nt, -1)
    rho = np.sin(2 * q.epsilon * q.s_tilde) ** -0.5
    r = np.repeat(q.r, nphi)
    weight = rho[:, None, None] ** beta * np.exp(sigma * r)[None, None, :]
    return float(np.max(weight * np.maximum(lp, 0.0) ** (1.0 / p)))
