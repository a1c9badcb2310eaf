"""Linearisation of the vortex on the flat fiber R^2.

Fields live on a polar grid with half-offset radial nodes r_k = (k+1/2) h,
k = 0..M-1, R = M h, and L equispaced angles.  Radial derivatives use
second-order differences (conservative form for the Laplacian, so the axis
needs no ghost value); angular derivatives are spectral.  A field vanishes at
r = R through the ghost value f_M = -f_{M-1}.

Complex fields are arrays of shape (M, L); one-forms B = B_1 dt_1 + B_2 dt_2
are arrays of shape (2, M, L) of Cartesian components.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate as si
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import EigenNonConvergence, GridMismatch, SolvabilityDefect, ValidationGap
from .numerics import fd_weights, fit_order, pairwise_orders
from .vortex_profile import VortexProfile, decay_mass


# radial step of the spectral blocks; the translation zero mode carries an O(h^2) bias
SPECTRUM_H = 0.0015


def default_rfib(lam: float) -> float:
    return max(12.0, 24.0 / decay_mass(lam))


@dataclass(frozen=True)
class PolarGrid:
    R: float
    M: int
    L: int = 16

    def __post_init__(self):
        if self.M < 4 or self.L < 4 or self.L % 2:
            raise ValueError("need M >= 4 and an even L >= 4")

    @property
    def h(self) -> float:
        return self.R / self.M

    @property
    def r(self) -> np.ndarray:
        return (np.arange(self.M) + 0.5) * self.h

    @property
    def phi(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.L) / self.L

    def mesh(self):
        return np.meshgrid(self.r, self.phi, indexing="ij")

    def weights(self) -> np.ndarray:
        """Quadrature weights r_k h dphi (midpoint in r, trapezoid in phi)."""
        return np.outer(self.r * self.h, np.full(self.L, 2.0 * np.pi / self.L))


def as_grid(grid, lam: float | None = None) -> PolarGrid:
    if isinstance(grid, PolarGrid):
        return grid
    grid = dict(grid or {})
    R = grid.get("R", grid.get("R_fib"))
    if R is None:
        R = default_rfib(lam if lam is not None else 1.0)
    return PolarGrid(R=float(R), M=int(grid.get("M", 240)), L=int(grid.get("L", 16)))


@dataclass(frozen=True, eq=False)
class FiberState:
    grid: PolarGrid
    xi: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        shape = (self.grid.M, self.grid.L)
        if np.shape(self.xi) != shape or np.shape(self.B) != (2,) + shape:
            raise GridMismatch(f"state arrays do not match grid {shape}")

    def __add__(self, other):
        return FiberState(self.grid, self.xi + other.xi, self.B + other.B)

    def __sub__(self, other):
        return FiberState(self.grid, self.xi - other.xi, self.B - other.B)

    def scale(self, c: float):
        return FiberState(self.grid, c * self.xi, c * self.B)

    def sup(self, drop_outer: int = 0) -> float:
        M = self.grid.M - drop_outer
        return float(max(np.max(np.abs(self.xi[:M])), np.max(np.abs(self.B[:, :M]))))


def fiber_inner(u: FiberState, v: FiberState) -> float:
    """Re int (conj(xi_u) xi_v + B_u . B_v) on the grid."""
    if u.grid != v.grid:
        raise GridMismatch("states live on different grids")
    w = u.grid.weights()
    return float(np.sum(w * (np.real(np.conj(u.xi) * v.xi) + np.sum(u.B * v.B, axis=0))))


@dataclass(frozen=True, eq=False)
class Background:
    """Vortex fields sampled on a polar grid."""

    grid: PolarGrid
    degree: int
    lam: float
    U: np.ndarray
    V: np.ndarray
    dU: np.ndarray
    dV: np.ndarray
    psi: np.ndarray
    T: np.ndarray      # (2, M, L): Cartesian components of the covariant derivative of psi
    A: np.ndarray      # (2, M, L): Cartesian components of the connection


def background(profile: VortexProfile, grid: PolarGrid) -> Background:
    interp = profile.smooth()
    r, phi = grid.mesh()
    U, V, dU, dV = interp(grid.r)
    U, V, dU, dV = (np.repeat(x[:, None], grid.L, axis=1) for x in (U, V, dU, dV))
    j = profile.degree
    phase = np.exp(1j * j * phi)
    a = j * U * (1.0 - V) / r
    c, s = np.cos(phi), np.sin(phi)
    T1 = phase * (dU * c - 1j * a * s)
    T2 = phase * (dU * s + 1j * a * c)
    A = np.stack([-j * V * s / r, j * V * c / r])
    return Background(grid, j, profile.lam, U, V, dU, dV, U * phase, np.stack([T1, T2]), A)


@dataclass(frozen=True, eq=False)
class FiberKernels:
    grid: PolarGrid
    T1: np.ndarray
    T2: np.ndarray
    TB1: np.ndarray
    TB2: np.ndarray
    profile: VortexProfile

    def states(self):
        return FiberState(self.grid, self.T1, self.TB1), FiberState(self.grid, self.T2, self.TB2)


def build_fiber_kernels(profile: VortexProfile, grid=None) -> FiberKernels:
    """Translation kernels: covariant derivatives of psi and the curl of A."""
    grid = as_grid(grid, profile.lam)
    bg = background(profile, grid)
    r = grid.mesh()[0]
    b = bg.dV / r * profile.degree
    zero = np.zeros_like(b)
    return FiberKernels(grid, bg.T[0], bg.T[1], np.stack([zero, b]), np.stack([-b, zero]), profile)


# ---------------------------------------------------------------------------
# differential operators on the polar grid


def _dphi(f, L):
    k = np.fft.fftfreq(L, 1.0 / L)
    k[L // 2] = 0.0
    return np.fft.ifft(1j * k * np.fft.fft(f, axis=-1), axis=-1)


def _dphi2(f, L):
    k = np.fft.fftfreq(L, 1.0 / L)
    return np.fft.ifft(-(k ** 2) * np.fft.fft(f, axis=-1), axis=-1)


def _real_like(out, f):
    return out if np.iscomplexobj(f) else out.real


def _laplacian(f, grid: PolarGrid):
    h, r = grid.h, grid.r
    rp = r + 0.5 * h
    rm = r - 0.5 * h
    fp = np.concatenate([f[1:], -f[-1:]], axis=0)
    fm = np.concatenate([f[:1], f[:-1]], axis=0)
    radial = (rp[:, None] * (fp - f) - rm[:, None] * (f - fm)) / (h * h * r[:, None])
    return radial + _real_like(_dphi2(f, grid.L), f) / r[:, None] ** 2


def _dr(f, grid: PolarGrid):
    L = grid.L
    fm = np.concatenate([np.roll(f[:1], -L // 2, axis=1), f[:-1]], axis=0)
    fp = np.concatenate([f[1:], -f[-1:]], axis=0)
    return (fp - fm) / (2.0 * grid.h)


def _cartesian_grad(f, grid: PolarGrid):
    r, phi = grid.mesh()
    fr = _dr(f, grid)
    fphi = _real_like(_dphi(f, grid.L), f) / r
    c, s = np.cos(phi), np.sin(phi)
    return c * fr - s * fphi, s * fr + c * fphi


def _divergence(B, grid):
    return _cartesian_grad(B[0], grid)[0] + _cartesian_grad(B[1], grid)[1]


def fiber_linop_apply(profile: VortexProfile, state: FiberState, gauge_fixed: bool = True,
                      bg: Background | None = None) -> FiberState:
    """Apply the (gauge-fixed by default) linearised operator at the vortex."""
    grid = state.grid
    bg = bg if bg is not None else background(profile, grid)
    if bg.grid != grid:
        raise GridMismatch("background sampled on a different grid")
    lam = profile.lam
    r = grid.mesh()[0]
    xi, B = state.xi.astype(complex), state.B
    psi, T, A = bg.psi, bg.T, bg.A
    U2 = bg.U ** 2
    jV = profile.degree * bg.V
    cov_lap = -_laplacian(xi, grid) + 2j * jV / r ** 2 * _dphi(xi, grid.L) + (jV / r) ** 2 * xi
    BT = B[0] * T[0] + B[1] * T[1]
    if gauge_fixed:
        out_xi = (cov_lap + 2j * BT + 0.5 * (lam - 1.0) * psi ** 2 * np.conj(xi)
                  + ((lam + 0.5) * U2 - 0.5 * lam) * xi)
        out_B = np.stack([-_laplacian(B[k], grid) + U2 * B[k] + 2.0 * np.imag(np.conj(T[k]) * xi)
                          for k in range(2)])
    else:
        divB = _divergence(B, grid)
        out_xi = (cov_lap + 1j * divB * psi + 2j * BT
                  + 0.5 * lam * (psi ** 2 * np.conj(xi) + 2.0 * U2 * xi - xi))
        gx = _cartesian_grad(xi, grid)
        gdiv = _cartesian_grad(divB, grid)
        out_B = np.stack([
            -_laplacian(B[k], grid) + gdiv[k]
            + np.imag(np.conj(T[k]) * xi + np.conj(gx[k] - 1j * A[k] * xi) * psi) + U2 * B[k]
            for k in range(2)])
    return FiberState(grid, out_xi, out_B)


def fiber_kernel_residual(profile: VortexProfile, grids) -> dict:
    """Sup-norm of the operator on both kernels over a grid ladder.

    The outermost ring is excluded: there the Dirichlet ghost disagrees with
    the (exponentially small, nonzero) kernel.
    """
    grids = [as_grid(g, profile.lam) for g in grids]
    rows = []
    for g in grids:
        ker = build_fiber_kernels(profile, g)
        bg = background(profile, g)
        s1, s2 = ker.states()
        r1 = fiber_linop_apply(profile, s1, bg=bg).sup(drop_outer=1)
        r2 = fiber_linop_apply(profile, s2, bg=bg).sup(drop_outer=1)
        rows.append({"M": g.M, "L": g.L, "h": g.h, "res_T1": r1, "res_T2": r2})
    hs = [row["h"] for row in rows]
    out = {"rows": rows, "pairwise": pairwise_orders(hs, [row["res_T1"] for row in rows])}
    if len(rows) >= 3:
        out["order_T1"] = fit_order(hs, [row["res_T1"] for row in rows])
        out["order_T2"] = fit_order(hs, [row["res_T2"] for row in rows])
    return out


# ---------------------------------------------------------------------------
# integral identities


@dataclass(frozen=True)
class IdentityReport:
    entries: list  # (name, two_d, radial, gap, gap_kind)

    @property
    def max_gap(self) -> float:
        return max(e[3] for e in self.entries)

    def as_dict(self) -> dict:
        return {e[0]: {"two_d": e[1], "radial": e[2], "gap": e[3], "kind": e[4]} for e in self.entries}


def kernel_identities(profile: VortexProfile, R: float | None = None, panels: int = 400,
                      gauss: int = 8, L: int = 32) -> IdentityReport:
    """Compare 2D tensor-product integrals of the kernels with radial formulas.

    2D side: composite Gauss-Legendre in r times the trapezoid rule in phi,
    applied to the Cartesian closed forms.  Radial side: adaptive quadrature.
    """
    R = default_rfib(profile.lam) if R is None else float(R)
    interp = profile.smooth()
    x, w = np.polynomial.legendre.leggauss(gauss)
    edges = np.linspace(0.0, R, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    rq = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wq = (half[:, None] * w[None, :]).ravel()
    phi = 2.0 * np.pi * np.arange(L) / L
    U, V, dU, dV = interp(rq)
    j = profile.degree
    r2, p2 = np.meshgrid(rq, phi, indexing="ij")
    W = np.outer(wq * rq, np.full(L, 2.0 * np.pi / L))
    phase = np.exp(1j * j * p2)
    a = (j * U * (1.0 - V) / rq)[:, None]
    c, s = np.cos(p2), np.sin(p2)
    T1 = phase * (dU[:, None] * c - 1j * a * s)
    T2 = phase * (dU[:, None] * s + 1j * a * c)
    b = (j * dV / rq)[:, None] * np.ones_like(p2)
    TB1 = (np.zeros_like(b), b)
    TB2 = (-b, np.zeros_like(b))

    def radial(f):
        val, _ = si.quad(lambda t: float(f(np.array([t]))[0]), 0.0, R, limit=500,
                         epsabs=1e-14, epsrel=1e-12, points=[1.0, 3.0, 6.0])
        return val

    def ev(t):
        return interp(t)

    nT = math.pi * radial(lambda t: (lambda U, V, dU, dV: t * dU ** 2 + (j * U * (1 - V)) ** 2 / t)(*ev(t)))
    imT = 2.0 * math.pi * j * radial(lambda t: (lambda U, V, dU, dV: U * dU * (1 - V))(*ev(t)))
    nB = 2.0 * math.pi * j * j * radial(lambda t: (lambda U, V, dU, dV: dV ** 2 / t)(*ev(t)))
    i1 = float(np.sum(W * np.abs(T1) ** 2))
    i2 = float(np.sum(W * np.abs(T2) ** 2))
    cross = complex(np.sum(W * np.conj(T1) * T2))
    b1 = float(np.sum(W * (TB1[0] ** 2 + TB1[1] ** 2)))
    b2 = float(np.sum(W * (TB2[0] ** 2 + TB2[1] ** 2)))

    def rel(x2, x1):
        return abs(x2 - x1) / abs(x1)

    entries = [
        ("norm_T1", i1, nT, rel(i1, nT), "relative"),
        ("norm_T2", i2, nT, rel(i2, nT), "relative"),
        ("re_cross", cross.real, 0.0, abs(cross.real), "absolute"),
        ("im_cross", cross.imag, imT, rel(cross.imag, imT), "relative"),
        ("norm_TB1", b1, nB, rel(b1, nB), "relative"),
        ("norm_TB2", b2, nB, rel(b2, nB), "relative"),
    ]
    return IdentityReport(entries)


# ---------------------------------------------------------------------------
# Fourier-mode block systems


def _radial_matrices(R: float, M: int):
    """Weighted conservative radial operator pieces on half-offset nodes.

    Returns r, h, the symmetric matrix K ~ r * (-f'' - f'/r) (Dirichlet at R)
    and the weight vector r.
    """
    h = R / M
    r = (np.arange(M) + 0.5) * h
    rp = r + 0.5 * h
    rm = r - 0.5 * h
    main = (rp + rm) / h ** 2
    main[-1] += rp[-1] / h ** 2
    off = -rp[:-1] / h ** 2
    K = sp.diags([off, main, off], [-1, 0, 1], format="csr")
    return r, h, K


def mode_blocks(profile: VortexProfile, p: int, R: float, M: int):
    """Symmetric radial systems for Fourier index p >= 0.

    For p >= 1 the unknowns x1, x2 are the coefficient of xi on
    exp(i(j+p)phi) and the conjugate of its coefficient on exp(i(j-p)phi);
    x3, x4 are those of -i(B_1 + i B_2) on exp(i(1+p)phi) and exp(i(1-p)phi).
    For p = 0 the two halves coincide and the block splits exactly into the
    parts even and odd under swapping (x1, x3) with (x2, x4); each is
    returned separately so that its (otherwise doubled) eigenvalues are
    resolved.  Returns a list of (S, w): S x = mu diag(w) x.
    """
    r, h, K = _radial_matrices(R, M)
    U, V, dU, dV = profile.smooth()(r)
    lam, j = profile.lam, profile.degree
    a = j * U * (1.0 - V) / r
    c = (lam + 0.5) * U ** 2 - 0.5 * lam
    e = 0.5 * (lam - 1.0) * U ** 2
    Pp, Pm = dU + a, dU - a

    def D(n, pot):
        return K + sp.diags(r * ((n - j * V) ** 2 / r ** 2 + pot))

    def Dn(n, pot):
        return K + sp.diags(r * (n ** 2 / r ** 2 + pot))

    def d(v):
        return sp.diags(r * v)

    if p == 0:
        out = []
        for sgn in (1.0, -1.0):
            cross = d(Pp - Pm if sgn > 0 else Pp + Pm)
            S = sp.bmat([[D(j, c + sgn * e), cross], [cross, Dn(1, U ** 2)]], format="csc")
            out.append((S, np.tile(r, 2)))
        return out
    blocks = [
        [D(j + p, c), d(e), d(Pp), d(-Pm)],
        [d(e), D(j - p, c), d(-Pm), d(Pp)],
        [d(Pp), d(-Pm), Dn(1 + p, U ** 2), None],
        [d(-Pm), d(Pp), None, Dn(1 - p, U ** 2)],
    ]
    return [(sp.bmat(blocks, format="csc"), np.tile(r, 4))]


def _symmetric_standard(S, w):
    d = sp.diags(1.0 / np.sqrt(w))
    H = (d @ S @ d).tocsc()
    return 0.5 * (H + H.T)


def _smallest(H, k: int, sigma: float):
    n = H.shape[0]
    k = min(k, n - 2)
    try:
        vals, vecs = spla.eigsh(H, k=k, sigma=sigma, which="LM", v0=np.ones(n), tol=1e-13,
                                maxiter=20 * n)
    except spla.ArpackNoConvergence as exc:
        raise EigenNonConvergence(str(exc)) from exc
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    modes: list
    eigenvalues: list
    residuals: list
    min_eigenvalue: float
    min_mode: int
    min_vector: np.ndarray
    r: np.ndarray
    dense_gap: float
    meta: dict = field(default_factory=dict)

    def rows(self):
        for p, vals, res in zip(self.modes, self.eigenvalues, self.residuals):
            yield p, float(vals[0]), float(vals[1]) if len(vals) > 1 else float("nan"), float(res)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["mode", "eig1", "eig2", "residual"])
        for row in self.rows():
            wr.writerow([row[0]] + [repr(v) for v in row[1:]])
        return buf.getvalue()


def _block_eigs(profile, p, R, M, k, sigma):
    """k lowest eigenvalues of block p with residuals; vectors padded to 4 components."""
    vals_all, vecs_all, res_all, dense_all = [], [], [], []
    for S, w in mode_blocks(profile, p, R, M):
        H = _symmetric_standard(S, w)
        sig = sigma
        for _ in range(6):
            vals, vecs = _smallest(H, k, sig)
            if vals[0] > sig:
                break
            sig = vals[0] - 1.0
        x = vecs / np.sqrt(w)[:, None]
        res = [float(np.linalg.norm(S @ x[:, i] - vals[i] * w * x[:, i]) / np.linalg.norm(w * x[:, i]))
               for i in range(vals.size)]
        if x.shape[0] == 2 * M:  # p = 0 halves: expand to (x1, x2, x3, x4)
            sgn = 1.0 if not vals_all else -1.0
            x = np.vstack([x[:M], sgn * x[:M], x[M:], sgn * x[M:]])
        vals_all.append(vals)
        vecs_all.append(x)
        res_all.append(res)
        dense_all.append(H)
    vals = np.concatenate(vals_all)
    vecs = np.hstack(vecs_all)
    res = np.concatenate(res_all)
    order = np.argsort(vals)[:k]
    return vals[order], vecs[:, order], float(np.max(res[order])), dense_all


def validate_eigensolver(profile: VortexProfile, R: float, M: int = 60, fourier_mode_max: int = 8,
                         k: int = 4, sigma: float = -1.0) -> float:
    """Max gap between shift-invert and dense eigenvalues on a coarse grid."""
    gap = 0.0
    for p in range(fourier_mode_max + 1):
        vals, _, _, Hs = _block_eigs(profile, p, R, M, k, sigma)
        dense = np.sort(np.concatenate([sla.eigh(H.toarray(), eigvals_only=True) for H in Hs]))[: vals.size]
        gap = max(gap, float(np.max(np.abs(dense - vals))))
    return gap


def fiber_spectrum(profile: VortexProfile, fourier_mode_max: int = 8, grid=None, k: int = 4,
                   sigma: float = -1.0, validate: bool = True, gap_tol: float = 1e-8) -> SpectrumReport:
    """Lowest eigenvalues of the gauge-fixed operator on a Dirichlet disk, per Fourier block."""
    grid = dict(grid or {})
    R = float(grid.get("R", grid.get("R_fib", default_rfib(profile.lam))))
    M = int(grid.get("M", math.ceil(R / float(grid.get("h", SPECTRUM_H)))))
    gap = validate_eigensolver(profile, R, int(grid.get("M_coarse", 60)), fourier_mode_max, k, sigma) \
        if validate else float("nan")
    if validate and not gap < gap_tol:
        raise ValidationGap(f"sparse vs dense eigenvalue gap {gap:.3e}")
    modes, eigs, residuals = [], [], []
    best = (math.inf, -1, None, None)
    for p in range(fourier_mode_max + 1):
        vals, x, res, _ = _block_eigs(profile, p, R, M, k, sigma)
        modes.append(p)
        eigs.append(vals)
        residuals.append(res)
        if vals[0] < best[0]:
            best = (float(vals[0]), p, x[:, 0], None)
    r = (np.arange(M) + 0.5) * R / M
    return SpectrumReport(modes, eigs, residuals, best[0], best[1], best[2], r, gap,
                          {"R": R, "M": M, "lambda": profile.lam, "degree": profile.degree})


def eigenfunction_decay_rate(report: SpectrumReport, window=(0.5, 0.85)) -> float:
    """Slope of -log|x| of the lowest eigenvector over the outer part of the disk."""
    r = report.r
    M = r.size
    x = report.min_vector.reshape(4, M)
    amp = np.sqrt(np.sum(x ** 2, axis=0))
    R = r[-1] + 0.5 * (r[1] - r[0])
    sel = (r >= window[0] * R) & (r <= window[1] * R) & (amp > 0)
    slope, _ = np.polyfit(r[sel], -np.log(amp[sel]), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# first correction


@dataclass(frozen=True, eq=False)
class CorrectionPair:
    state: FiberState
    r: np.ndarray
    eta: np.ndarray   # radial coefficient: eta_1 = eta(r) e^{i phi}
    q: np.ndarray     # radial coefficient: B_1 = q(r) (sin phi dt_1 - cos phi dt_2)
    residual: float
    rhs_defects: tuple
    solution_defects: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["r", "eta_re", "eta_im", "q"])
        for row in zip(self.r, self.eta, np.zeros_like(self.eta), self.q):
            wr.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def correction_rhs(profile: VortexProfile, grid: PolarGrid) -> FiberState:
    r, phi = grid.mesh()
    U, V, dU, dV = (np.repeat(x[:, None], grid.L, axis=1) for x in profile.smooth()(grid.r))
    xi = r * dU * np.exp(1j * phi)
    B = np.stack([-np.sin(phi) * dV, np.cos(phi) * dV])
    return FiberState(grid, xi, B)


def solve_first_correction(profile: VortexProfile, grid=None, tol: float = 1e-8) -> CorrectionPair:
    """Solve the operator equation with right-hand side (r U' e^{i phi}, V' dphi-rotation).

    The right-hand side lives in the rotation-invariant block, where the
    system reduces to two coupled radial equations for eta and q.
    """
    if profile.degree != 1:
        raise ValueError("the first correction is defined for the degree-1 vortex")
    grid = as_grid(grid or {"M": 1200, "L": 16}, profile.lam)
    R, M = grid.R, grid.M
    r, h, K = _radial_matrices(R, M)
    U, V, dU, dV = profile.smooth()(r)
    lam = profile.lam
    a = U * (1.0 - V) / r
    c = (lam + 0.5) * U ** 2 - 0.5 * lam + 0.5 * (lam - 1.0) * U ** 2
    S = sp.bmat([[K + sp.diags(r * ((1.0 - V) ** 2 / r ** 2 + c)), sp.diags(r * 2.0 * a)],
                 [sp.diags(r * 2.0 * a), K + sp.diags(r * (1.0 / r ** 2 + U ** 2))]], format="csc")
    rhs = correction_rhs(profile, grid)
    ker = build_fiber_kernels(profile, grid)
    k1, k2 = ker.states()
    rhs_def = (fiber_inner(rhs, k1), fiber_inner(rhs, k2))
    if max(abs(d) for d in rhs_def) > tol:
        raise SolvabilityDefect(f"right-hand side not orthogonal to kernels: {rhs_def}")
    b = np.concatenate([r * r * dU, r * (-dV)])
    x = spla.spsolve(S, b)
    eta, q = x[:M], x[M:]
    rr, phi = grid.mesh()
    xi = eta[:, None] * np.exp(1j * phi)
    B = np.stack([q[:, None] * np.sin(phi), -q[:, None] * np.cos(phi)])
    sol = FiberState(grid, xi, B)
    for kst in (k1, k2):
        nk = fiber_inner(kst, kst)
        sol = sol - kst.scale(fiber_inner(sol, kst) / nk)
    res = (fiber_linop_apply(profile, sol) - rhs).sup()
    sol_def = (fiber_inner(sol, k1), fiber_inner(sol, k2))
    return CorrectionPair(sol, r, eta, q, float(res), rhs_def, sol_def)


# ---------------------------------------------------------------------------
# derivative of the magnetic equation


def _centered(y, h, deriv, half, parity, rows):
    """Centered derivative at the given rows, ghosts r_{-k} folded by parity."""
    offs = np.arange(-half, half + 1)
    w = fd_weights(0.0, offs.astype(float), deriv) / h ** deriv
    ext = np.concatenate([parity * y[half:0:-1], y])
    return sum(c * ext[rows + half + o] for o, c in zip(offs, w))


def check_ode_derivative_identity(profile: VortexProfile, variant: str = "derived") -> float:
    """Sup over interior nodes of the r-derivative of the magnetic equation.

    variant="derived": -V''' + V''/r - V'/r^2 - 2UU'(1-V) + U^2 V', the exact
    derivative.  variant="display": -V''' - V''/r + V'/r^2 - 2UU'(1-V) + U^2 V',
    which differs from it by 2 (V'/r)' and does not vanish on solutions.
    Derivatives come from fourth-order centred stencils (five points for
    first and second derivatives, seven for the third) with parity ghosts.
    """
    if variant not in ("derived", "display"):
        raise ValueError("variant must be 'derived' or 'display'")
    r = np.asarray(profile.nodes)
    h = r[1] - r[0]
    U = np.asarray(profile.U)
    V = np.asarray(profile.V)
    pU = -1 if abs(profile.degree) % 2 else 1
    rows = np.arange(1, r.size - 3)
    V1 = _centered(V, h, 1, 2, 1, rows)
    V2 = _centered(V, h, 2, 2, 1, rows)
    V3 = _centered(V, h, 3, 3, 1, rows)
    U1 = _centered(U, h, 1, 2, pU, rows)
    ri, Ui, Vi = r[rows], U[rows], V[rows]
    sgn = 1.0 if variant == "derived" else -1.0
    res = -V3 + sgn * (V2 / ri - V1 / ri ** 2) - 2.0 * Ui * U1 * (1.0 - Vi) + Ui ** 2 * V1
    return float(np.max(np.abs(res)))
