"""Radial profiles (U, V) of the degree-j abelian Higgs vortex.

The profiles solve

    -U'' - U'/r + j^2 (1-V)^2 U / r^2 - (lam/2) (1-U^2) U = 0,
    -V'' + V'/r - U^2 (1-V) = 0,

with U(0) = V(0) = 0 and U, V -> 1 exponentially.  The unknowns used by the
Newton solver are w = 1-U and z = 1-V so that the exponentially small tails
keep full relative precision.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import BPoly, CubicHermiteSpline

from .errors import DomainTooSmall, NonConvergence, OutOfRange, WindowUnderflow
from .numerics import fd_weights


def decay_mass(lam: float) -> float:
    """m_lambda = min(sqrt(lambda), 2)."""
    return min(math.sqrt(lam), 2.0)


def default_rmax(lam: float) -> float:
    return max(20.0, 24.0 / decay_mass(lam))


@dataclass(frozen=True)
class Discretization:
    R_max: float
    N: int = 2000
    tol: float = 1e-10


def _freeze(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class VortexProfile:
    lam: float
    degree: int
    nodes: np.ndarray
    U: np.ndarray
    V: np.ndarray
    dU: np.ndarray
    dV: np.ndarray
    origin_slopes: tuple
    residual_norm: float
    tol: float
    one_minus_U: np.ndarray
    one_minus_V: np.ndarray
    scheme_order: int = 6
    iterations: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def N(self) -> int:
        return self.nodes.size - 1

    @property
    def R_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def h(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    def second_derivatives(self, r, U, dU, V, dV):
        """U'' and V'' from the ODE itself (valid for r > 0)."""
        j2 = self.degree ** 2
        d2U = -dU / r + j2 * (1.0 - V) ** 2 * U / r ** 2 - 0.5 * self.lam * (1.0 - U * U) * U
        d2V = dV / r - U * U * (1.0 - V)
        return d2U, d2V

    def smooth(self) -> "ProfileInterpolant":
        """Quintic Hermite interpolant (U, U', U'' data) for downstream use."""
        if "smooth" not in self._cache:
            self._cache["smooth"] = ProfileInterpolant(self)
        return self._cache["smooth"]


class ProfileInterpolant:
    """C^2 piecewise-quintic interpolant of a profile.

    Nodal second derivatives come from the ODE, with the regular limits at
    r = 0 taken from the fitted origin behaviour.  Values beyond R_max are
    continued with the exponential tails fitted at the last node.
    """

    def __init__(self, profile: VortexProfile):
        r = np.asarray(profile.nodes)
        U, V, dU, dV = (np.asarray(x) for x in (profile.U, profile.V, profile.dU, profile.dV))
        d2U = np.empty_like(U)
        d2V = np.empty_like(V)
        d2U[1:], d2V[1:] = profile.second_derivatives(r[1:], U[1:], dU[1:], V[1:], dV[1:])
        c1, c2 = profile.origin_slopes
        d2U[0] = 2.0 * c1 if abs(profile.degree) == 2 else 0.0
        d2V[0] = 2.0 * c2
        self.profile = profile
        self.R = float(r[-1])
        self._U = BPoly.from_derivatives(r, np.column_stack([U, dU, d2U]))
        self._V = BPoly.from_derivatives(r, np.column_stack([V, dV, d2V]))
        self._dU = self._U.derivative()
        self._dV = self._V.derivative()
        self._wR = float(profile.one_minus_U[-1])
        self._zR = float(profile.one_minus_V[-1])
        self._kU = float(-dU[-1] / self._wR) if self._wR > 0 else decay_mass(profile.lam)
        self._kV = float(-dV[-1] / self._zR) if self._zR > 0 else 1.0

    def __call__(self, r):
        """Return (U, V, U', V') at radii r >= 0."""
        r = np.asarray(r, dtype=float)
        inside = r <= self.R
        rc = np.minimum(r, self.R)
        U = self._U(rc)
        V = self._V(rc)
        dU = self._dU(rc)
        dV = self._dV(rc)
        if not np.all(inside):
            out = ~inside
            ew = self._wR * np.exp(-self._kU * (r[out] - self.R))
            ez = self._zR * np.exp(-self._kV * (r[out] - self.R))
            U = np.where(inside, U, 0.0)
            V = np.where(inside, V, 0.0)
            dU = np.where(inside, dU, 0.0)
            dV = np.where(inside, dV, 0.0)
            U[out] = 1.0 - ew
            V[out] = 1.0 - ez
            dU[out] = self._kU * ew
            dV[out] = self._kV * ez
        return U, V, dU, dV

    def full(self, r):
        """(U, V, U', V', U'', V'') with U'', V'' taken from the ODE."""
        U, V, dU, dV = self(r)
        r = np.asarray(r, dtype=float)
        rs = np.where(r > 0, r, 1.0)
        d2U, d2V = self.profile.second_derivatives(rs, U, dU, V, dV)
        c1, c2 = self.profile.origin_slopes
        d2U = np.where(r > 0, d2U, 2.0 * c1 if abs(self.profile.degree) == 2 else 0.0)
        d2V = np.where(r > 0, d2V, 2.0 * c2)
        return U, V, dU, dV, d2U, d2V


# ---------------------------------------------------------------------------
# differentiation matrices


def _stencil_rows(N: int, h: float, deriv: int, order: int, parity: int):
    """Rows 0..N of a derivative operator on the uniform grid r_i = i h.

    Ghost values r_{-k} are folded back with U(-r) = parity * U(r).  Returns
    the sparse matrix and, per row, the sum of weights that landed on ghost
    nodes (needed when the unknown is an affine function of the profile).
    """
    q = order // 2 + (deriv - 1) // 2
    rows, cols, vals = [], [], []
    ghost_sum = np.zeros(N + 1)
    for i in range(N + 1):
        if i + q <= N:
            offs = np.arange(-q, q + 1)
        else:
            width = 2 * q + 1 + (1 if deriv == 2 else 0)
            offs = np.arange(N - width + 1, N + 1) - i
        w = fd_weights(0.0, offs.astype(float), deriv) / h ** deriv
        for o, c in zip(offs, w):
            k = i + o
            if k < 0:
                rows.append(i)
                cols.append(-k)
                vals.append(parity * c)
                ghost_sum[i] += c
            else:
                rows.append(i)
                cols.append(k)
                vals.append(c)
    D = sp.csr_matrix((vals, (rows, cols)), shape=(N + 1, N + 1))
    return D, ghost_sum


class _System:
    """Discrete vortex system in the (w, z) = (1-U, 1-V) unknowns."""

    def __init__(self, lam, degree, r, order):
        self.lam = lam
        self.j2 = degree ** 2
        self.r = r
        self.N = r.size - 1
        h = r[1] - r[0]
        self.m = decay_mass(lam)
        pU = -1 if abs(degree) % 2 else 1
        self.D1u, g1u = _stencil_rows(self.N, h, 1, order, pU)
        self.D2u, g2u = _stencil_rows(self.N, h, 2, order, pU)
        self.D1v, _ = _stencil_rows(self.N, h, 1, order, 1)
        self.D2v, _ = _stencil_rows(self.N, h, 2, order, 1)
        # D applied to the constant 1 under the folding: for odd parity the
        # ghost weights flip sign, giving -2 * (sum of ghost weights).
        self.one1u = -2.0 * g1u if pU == -1 else np.zeros(self.N + 1)
        self.one2u = -2.0 * g2u if pU == -1 else np.zeros(self.N + 1)

    def derivs(self, w, z):
        dU = self.one1u - self.D1u @ w
        d2U = self.one2u - self.D2u @ w
        dV = -(self.D1v @ z)
        d2V = -(self.D2v @ z)
        return dU, d2U, dV, d2V

    def residual(self, x):
        N, r, lam, j2 = self.N, self.r, self.lam, self.j2
        w, z = x[: N + 1], x[N + 1:]
        dU, d2U, dV, d2V = self.derivs(w, z)
        ri = r[1:N]
        wi, zi = w[1:N], z[1:N]
        FU = np.empty(N + 1)
        FV = np.empty(N + 1)
        FU[1:N] = (-d2U[1:N] - dU[1:N] / ri + j2 * zi ** 2 * (1.0 - wi) / ri ** 2
                   - 0.5 * lam * wi * (2.0 - wi) * (1.0 - wi))
        FV[1:N] = -d2V[1:N] + dV[1:N] / ri - (1.0 - wi) ** 2 * zi
        FU[0] = w[0] - 1.0
        FV[0] = z[0] - 1.0
        FU[N] = -dU[N] + self.m * w[N]
        FV[N] = -dV[N] + z[N]
        return np.concatenate([FU, FV])

    def jacobian(self, x):
        N, r, lam, j2 = self.N, self.r, self.lam, self.j2
        w, z = x[: N + 1], x[N + 1:]
        rinv = np.zeros(N + 1)
        rinv[1:N] = 1.0 / r[1:N]
        interior = np.zeros(N + 1)
        interior[1:N] = 1.0
        I = sp.diags(interior)
        Rinv = sp.diags(rinv)
        dpot = -j2 * z ** 2 * rinv ** 2 - 0.5 * lam * (2.0 - 6.0 * w + 3.0 * w * w)
        Jww = I @ (self.D2u + Rinv @ self.D1u) + sp.diags(dpot * interior)
        Jwz = sp.diags(2.0 * j2 * z * (1.0 - w) * rinv ** 2 * interior)
        Jzz = I @ (self.D2v - Rinv @ self.D1v) - sp.diags((1.0 - w) ** 2 * interior)
        Jzw = sp.diags(2.0 * (1.0 - w) * z * interior)
        e0 = sp.csr_matrix(([1.0], ([0], [0])), shape=(N + 1, N + 1))
        eN = sp.csr_matrix(([1.0], ([N], [N])), shape=(N + 1, N + 1))
        rowN = sp.diags(np.eye(1, N + 1, N).ravel())
        Jww = Jww + e0 + rowN @ self.D1u + self.m * eN
        Jzz = Jzz + e0 + rowN @ self.D1v + eN
        return sp.bmat([[Jww, Jwz], [Jzw, Jzz]], format="csc")


def _newton(system: _System, x0, tol, max_iter):
    x = x0.copy()
    F = system.residual(x)
    nF = np.max(np.abs(F))
    it = 0
    for it in range(1, max_iter + 1):
        if nF < tol * 1e-2:
            return x, nF, it - 1
        dx = spla.spsolve(system.jacobian(x), -F)
        step = 1.0
        while step > 1e-4:
            xt = x + step * dx
            Ft = system.residual(xt)
            nt = np.max(np.abs(Ft))
            if np.isfinite(nt) and nt < (1.0 - 1e-4 * step) * nF:
                break
            step *= 0.5
        else:
            break
        if nt >= nF and nF < tol:
            return x, nF, it
        x, F, nF = xt, Ft, nt
    if nF < tol:
        return x, nF, it
    raise NonConvergence(f"Newton stalled at residual {nF:.3e} after {it} iterations")


def _origin_fit(r, y, power, npts=8, terms=4):
    """Leading coefficient of the parity series y = sum_k c_k r^(power + 2k) near 0."""
    rr = r[1: npts + 1]
    A = np.column_stack([rr ** (power + 2 * k) for k in range(terms)])
    coef, *_ = np.linalg.lstsq(A, y[1: npts + 1], rcond=None)
    return float(coef[0])


def solve_vortex(lam: float, degree: int = 1, disc: Discretization | dict | None = None, *,
                 R_max: float | None = None, N: int = 2000, tol: float = 1e-10,
                 scheme_order: int = 6, max_iter: int = 60) -> VortexProfile:
    """Solve the radial vortex system by damped Newton on finite differences.

    A second-order centred discretisation is solved first from the guess
    U = tanh(r)^|j|, V = r^2/(1+r^2); if ``scheme_order`` > 2 its solution
    seeds a Newton solve of the same system on wider centred stencils.
    ``disc`` (a Discretization or a mapping with R_max, N, tol) overrides the
    keyword defaults.
    """
    if disc is not None:
        d = disc if isinstance(disc, dict) else disc.__dict__
        R_max = d.get("R_max", R_max)
        N = int(d.get("N", N))
        tol = float(d.get("tol", tol))
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if int(degree) != degree or degree == 0:
        raise ValueError("degree must be a nonzero integer")
    if N < 200:
        raise ValueError("N must be at least 200")
    if scheme_order not in (2, 4, 6, 8):
        raise ValueError("scheme_order must be one of 2, 4, 6, 8")
    degree = int(degree)
    m = decay_mass(lam)
    R = default_rmax(lam) if R_max is None else float(R_max)
    if not math.exp(-m * R) < tol:
        raise DomainTooSmall(
            f"exp(-m_lambda R_max) = {math.exp(-m * R):.3e} is not below tol = {tol:.1e}; "
            f"increase R_max beyond {math.log(1.0 / tol) / m:.2f}")
    r = np.linspace(0.0, R, N + 1)
    a = abs(degree)
    U0 = np.tanh(r) ** a
    V0 = r ** 2 / (1.0 + r ** 2)
    x = np.concatenate([1.0 - U0, 1.0 / (1.0 + r ** 2)])
    x[0] = 1.0 if a else x[0]
    iters = 0
    orders = [2] if scheme_order == 2 else [2, scheme_order]
    for order in orders:
        system = _System(lam, degree, r, order)
        x, nF, it = _newton(system, x, tol, max_iter)
        iters += it
    w, z = x[: N + 1].copy(), x[N + 1:].copy()
    w[0] = 1.0
    z[0] = 1.0
    dU, _, dV, _ = system.derivs(w, z)
    U = 1.0 - w
    V = 1.0 - z
    c1 = _origin_fit(r, U, a)
    c2 = _origin_fit(r, V, 2)
    dU[0] = c1 if a == 1 else 0.0
    dV[0] = 0.0
    return VortexProfile(lam=float(lam), degree=degree, nodes=_freeze(r), U=_freeze(U), V=_freeze(V),
                         dU=_freeze(dU), dV=_freeze(dV), origin_slopes=(c1, c2),
                         residual_norm=float(nF), tol=float(tol), one_minus_U=_freeze(w),
                         one_minus_V=_freeze(z), scheme_order=scheme_order, iterations=iters)


# ---------------------------------------------------------------------------
# diagnostics


def _d_fourth(y, h, parity):
    """First and second derivatives with 5-point centred stencils on rows 1..N-2."""
    yg = np.concatenate([[parity * y[1]], y])  # ghost at r = -h
    c = yg[2:-1]
    p1, p2 = yg[3:], np.concatenate([yg[4:], [np.nan]])
    m1, m2 = yg[1:-2], yg[0:-3]
    d1 = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h)
    d2 = (-m2 + 16.0 * m1 - 30.0 * c + 16.0 * p1 - p2) / (12.0 * h * h)
    return d1[:-1], d2[:-1]


def vortex_residual(profile: VortexProfile) -> dict:
    """Max-norm ODE residuals on rows 1..N-2 from 5-point (fourth-order) stencils.

    Independent of the solver's discretisation; the ghost value at r = -h
    uses the parity of each profile.
    """
    r = np.asarray(profile.nodes)
    h = r[1] - r[0]
    U = np.asarray(profile.U)
    V = np.asarray(profile.V)
    pU = -1 if abs(profile.degree) % 2 else 1
    dU, d2U = _d_fourth(U, h, pU)
    dV, d2V = _d_fourth(V, h, 1)
    ri = r[1:-2]
    Ui, Vi = U[1:-2], V[1:-2]
    j2 = profile.degree ** 2
    resU = -d2U - dU / ri + j2 * (1.0 - Vi) ** 2 * Ui / ri ** 2 - 0.5 * profile.lam * (1.0 - Ui ** 2) * Ui
    resV = -d2V + dV / ri - Ui ** 2 * (1.0 - Vi)
    return {"res_U": float(np.max(np.abs(resU))), "res_V": float(np.max(np.abs(resV)))}


def fit_decay_rates(profile: VortexProfile, window=(0.5, 0.9)) -> dict:
    """Least-squares slopes of -log(1-U) and -log(1-V) on a window of [0, R_max]."""
    lo, hi = window
    if not 0.0 < lo < hi < 1.0:
        raise ValueError("window must satisfy 0 < lo < hi < 1")
    r = np.asarray(profile.nodes)
    sel = (r >= lo * profile.R_max) & (r <= hi * profile.R_max)
    out = {}
    for key, tail in (("rate_U", profile.one_minus_U), ("rate_V", profile.one_minus_V)):
        t = np.asarray(tail)[sel]
        if np.any(~np.isfinite(t)) or np.any(t <= 1e-300):
            raise WindowUnderflow(f"{key}: tail underflows on the window; shrink R_max or the window")
        slope, _ = np.polyfit(r[sel], -np.log(t), 1)
        out[key] = float(slope)
    return out


def evaluate_profile(profile: VortexProfile, r: float):
    """Cubic Hermite interpolation of (U, V, U', V'); exact at the nodes."""
    if r < 0 or r > profile.R_max * (1 + 1e-14):
        raise OutOfRange(f"r = {r} outside [0, {profile.R_max}]")
    cache = profile._cache
    if "cubic" not in cache:
        x = np.asarray(profile.nodes)
        U, V, dU, dV = (np.asarray(a) for a in (profile.U, profile.V, profile.dU, profile.dV))
        d2U = np.empty_like(U)
        d2V = np.empty_like(V)
        d2U[1:], d2V[1:] = profile.second_derivatives(x[1:], U[1:], dU[1:], V[1:], dV[1:])
        c1, c2 = profile.origin_slopes
        d2U[0] = 2.0 * c1 if abs(profile.degree) == 2 else 0.0
        d2V[0] = 2.0 * c2
        cache["cubic"] = (CubicHermiteSpline(x, U, dU), CubicHermiteSpline(x, V, dV),
                          CubicHermiteSpline(x, dU, d2U), CubicHermiteSpline(x, dV, d2V))
    sU, sV, sdU, sdV = cache["cubic"]
    i = np.searchsorted(profile.nodes, r)
    if i < profile.nodes.size and profile.nodes[i] == r:
        return (float(profile.U[i]), float(profile.V[i]), float(profile.dU[i]), float(profile.dV[i]))
    return float(sU(r)), float(sV(r)), float(sdU(r)), float(sdV(r))


# ---------------------------------------------------------------------------
# serialisation


def profile_csv(profile: VortexProfile) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["r", "U", "V", "dU", "dV"])
    for row in zip(profile.nodes, profile.U, profile.V, profile.dU, profile.dV):
        wr.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def profile_metadata(profile: VortexProfile) -> dict:
    res = vortex_residual(profile)
    return {
        "lambda": profile.lam,
        "degree": profile.degree,
        "R_max": profile.R_max,
        "N": profile.N,
        "tol": profile.tol,
        "scheme_order": profile.scheme_order,
        "solver_residual": profile.residual_norm,
        "res_U": res["res_U"],
        "res_V": res["res_V"],
        "c1": profile.origin_slopes[0],
        "c2": profile.origin_slopes[1],
    }
