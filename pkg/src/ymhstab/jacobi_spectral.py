"""Jacobi operator of Gamma, its kernels, second variation and low spectrum.

Normal fields N = k1 m + k2 n are sampled on a uniform (s, theta) grid of
the truncation Gamma^R = {rho < R}, whose s-range is [s_min, pi/2 - s_min]
with sin 2 s_min = R^{-2}.  With sigma = sin 2s = rho^{-2} and area element
rho^4 ds dtheta, each Fourier mode exp(i m theta) of k1 -/+ i k2 reduces the
eigenproblem -(Delta^nu + 2 rho^{-6}) N = mu rho^{-6} N to

    -(sigma k')' + [(m +/- cos 2s)^2 / sigma - 2 sigma] k = mu sigma k,

a scalar Sturm-Liouville problem with Dirichlet ends.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import BoundaryNonzero, EigenNonConvergence, GridMismatch, ValidationGap
from .gamma_geometry import jacobi_fields, make_chart, s_min_for
from .numerics import fit_order, pairwise_orders


@dataclass(frozen=True, eq=False)
class SurfaceGrid:
    """Uniform (s, theta) grid including both Dirichlet end nodes in s."""

    s: np.ndarray
    theta: np.ndarray
    R: float | None = None

    @property
    def hs(self) -> float:
        return float(self.s[1] - self.s[0])

    def mesh(self):
        return np.meshgrid(self.s, self.theta, indexing="ij")

    def area_weights(self) -> np.ndarray:
        """Trapezoid weights times the area element rho^4 = (sin 2s)^{-2}."""
        ws = np.full(self.s.size, self.hs)
        ws[0] = ws[-1] = 0.5 * self.hs
        wt = np.full(self.theta.size, 2 * np.pi / self.theta.size)
        return np.outer(ws * np.sin(2 * self.s) ** -2, wt)


def surface_grid(R: float = 10.0, n_s: int = 401, n_theta: int = 16) -> SurfaceGrid:
    smin = s_min_for(R)
    return SurfaceGrid(np.linspace(smin, np.pi / 2 - smin, n_s),
                       2 * np.pi * np.arange(n_theta) / n_theta, R)


def grid_from_chart(chart) -> SurfaceGrid:
    """Unscaled (s, theta) grid of a Fermi chart."""
    return SurfaceGrid(chart.epsilon * np.asarray(chart.s_tilde),
                       chart.epsilon * np.asarray(chart.theta_tilde), chart.R)


def _as_grid(obj) -> SurfaceGrid:
    return obj if isinstance(obj, SurfaceGrid) else grid_from_chart(obj)


@dataclass(frozen=True, eq=False)
class NormalField:
    k1: np.ndarray
    k2: np.ndarray

    def __post_init__(self):
        if np.shape(self.k1) != np.shape(self.k2):
            raise GridMismatch("k1 and k2 shapes differ")
        if not (np.all(np.isfinite(self.k1)) and np.all(np.isfinite(self.k2))):
            raise ValueError("normal field has non-finite values")

    def sup(self) -> float:
        return float(max(np.max(np.abs(self.k1)), np.max(np.abs(self.k2))))


def jacobi_field_on(grid, index: int) -> NormalField:
    s, th = _as_grid(grid).mesh()
    return NormalField(*jacobi_fields(index, s, th))


def _ds(f, h):
    """Second-order first derivative along axis 0, one-sided at the ends."""
    d = np.empty_like(f)
    d[1:-1] = (f[2:] - f[:-2]) / (2 * h)
    d[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
    d[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * h)
    return d


def _dss(f, h):
    """Second-order second derivative along axis 0, one-sided at the ends."""
    d = np.empty_like(f)
    d[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / h ** 2
    d[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h ** 2
    d[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h ** 2
    return d


def _ds_first_order(f, h):
    """Forward difference (backward at the last node); a convergence-test hook."""
    d = np.empty_like(f)
    d[:-1] = (f[1:] - f[:-1]) / h
    d[-1] = (f[-1] - f[-2]) / h
    return d


def _dth(f, order=1):
    L = f.shape[-1]
    k = np.fft.fftfreq(L, 1.0 / L)
    if order == 1:
        k[L // 2] = 0.0
    return np.real(np.fft.ifft((1j * k) ** order * np.fft.fft(f, axis=-1), axis=-1))


def apply_jacobi(grid, N: NormalField, first_order: bool = False) -> NormalField:
    """L_Gamma N in the displayed component form (no area-element weighting).

    first_order=True swaps in a first-order s-derivative (test hook for the
    convergence reporter).
    """
    ds = _ds_first_order if first_order else _ds
    g = _as_grid(grid)
    if np.shape(N.k1) != (g.s.size, g.theta.size):
        raise GridMismatch("normal field does not match the surface grid")
    s = g.s[:, None]
    sig = np.sin(2 * s)
    c = np.cos(2 * s)
    h = g.hs
    out = []
    for k, other, sgn in ((N.k1, N.k2, -1.0), (N.k2, N.k1, 1.0)):
        out.append(sig ** 3 * _dss(k, h) + sig * _dth(k, 2) + 2 * sig ** 2 * c * ds(k, h)
                   + sgn * 2 * sig * c * _dth(other) + sig * (2 * sig ** 2 - c ** 2) * k)
    return NormalField(*out)


def quadratic_form_Q(grid, N: NormalField, variant: str = "derived", tol: float = 1e-12) -> float:
    """Second variation of area on Gamma^R for a field vanishing at the ends.

    variant="derived" uses +2 rho^{-2} cos 2s (k1 k2_theta - k2 k1_theta),
    the sign for which Q(N) = -int <L_Gamma N, N> rho^4; "display" flips it.
    """
    if variant not in ("derived", "display"):
        raise ValueError("variant must be 'derived' or 'display'")
    g = _as_grid(grid)
    scale = max(N.sup(), 1.0)
    if max(np.max(np.abs(N.k1[[0, -1]])), np.max(np.abs(N.k2[[0, -1]]))) > tol * scale:
        raise BoundaryNonzero("normal field must vanish on the truncation boundary")
    s = g.s[:, None]
    sig = np.sin(2 * s)
    c = np.cos(2 * s)
    k1, k2 = N.k1, N.k2
    k1s, k2s = _ds(k1, g.hs), _ds(k2, g.hs)
    k1t, k2t = _dth(k1), _dth(k2)
    sgn = 1.0 if variant == "derived" else -1.0
    dens = (sig ** 3 * (k1s ** 2 + k2s ** 2) + sig * (k1t ** 2 + k2t ** 2)
            + sgn * 2 * sig * c * (k1 * k2t - k2 * k1t)
            - sig * (2 * sig ** 2 - c ** 2) * (k1 ** 2 + k2 ** 2))
    return float(np.sum(g.area_weights() * dens))


def weighted_pairing(grid, N: NormalField, M: NormalField) -> float:
    """int <N, M> rho^4 ds dtheta."""
    g = _as_grid(grid)
    return float(np.sum(g.area_weights() * (N.k1 * M.k1 + N.k2 * M.k2)))


def rho6_norm_sq(grid, N: NormalField) -> float:
    """int |N|^2 rho^{-6} rho^4 ds dtheta."""
    g = _as_grid(grid)
    sig = np.sin(2 * g.s)[:, None]
    return float(np.sum(g.area_weights() * sig ** 3 * (N.k1 ** 2 + N.k2 ** 2)))


# ---------------------------------------------------------------------------
# spectrum


@dataclass(frozen=True, eq=False)
class JacobiDiscretization:
    R: float
    n: int
    s: np.ndarray          # interior nodes
    blocks: dict           # (m, sign) -> (A, w)

    def joint(self):
        keys = sorted(self.blocks)
        A = sp.block_diag([self.blocks[k][0] for k in keys], format="csc")
        w = np.concatenate([self.blocks[k][1] for k in keys])
        return A, w


def assemble(R: float, n: int, modes=range(5)) -> JacobiDiscretization:
    """Conservative second-order blocks on n interior nodes, Dirichlet at rho = R."""
    smin = s_min_for(R)
    x = np.linspace(smin, np.pi / 2 - smin, n + 2)
    h = x[1] - x[0]
    s = x[1:-1]
    sig = np.sin(2 * s)
    c = np.cos(2 * s)
    sp_half = np.sin(2 * (s + 0.5 * h))
    sm_half = np.sin(2 * (s - 0.5 * h))
    main = (sp_half + sm_half) / h ** 2
    off = -sp_half[:-1] / h ** 2
    K = sp.diags([off, main, off], [-1, 0, 1], format="csc")
    blocks = {}
    for m in modes:
        for sgn in ((1,) if m == 0 else (1, -1)):
            q = (m + sgn * c) ** 2 / sig - 2 * sig
            blocks[(int(m), sgn)] = ((K + sp.diags(q)).tocsc(), sig)
    return JacobiDiscretization(float(R), int(n), s, blocks)


@dataclass(frozen=True, eq=False)
class JacobiSpectrumReport:
    eigenvalues: np.ndarray
    residuals: np.ndarray
    labels: list
    R: float
    n: int
    dense_validated: bool
    dense_gap: float
    vectors: np.ndarray | None = None
    s: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def min_eigenvalue(self) -> float:
        return float(self.eigenvalues[0])

    def to_csv(self, header: bool = True) -> str:
        """Rows R,mode,eig,residual; mode is the Fourier index with the sign family, e.g. 2-."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        if header:
            wr.writerow(["R", "mode", "eig", "residual"])
        for (m, sgn), mu, res in zip(self.labels, self.eigenvalues, self.residuals):
            label = "joint" if m == "joint" else f"{m}{'+' if sgn > 0 else '-'}"
            wr.writerow([repr(float(self.R)), label, repr(float(mu)), repr(float(res))])
        return buf.getvalue()


def _eig_block(A, w, k, sigma):
    d = sp.diags(1.0 / np.sqrt(w))
    H = (d @ A @ d).tocsc()
    H = 0.5 * (H + H.T)
    n = H.shape[0]
    k = min(k, n - 2)
    try:
        vals, vecs = spla.eigsh(H, k=k, sigma=sigma, which="LM", v0=np.ones(n), tol=1e-14,
                                maxiter=50 * n)
    except spla.ArpackNoConvergence as exc:
        raise EigenNonConvergence(str(exc)) from exc
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    # Rayleigh-quotient polish, then the normwise backward error of (mu, v):
    # ||A v - mu B v|| / ((||A|| + |mu| ||B||) ||v||), 1-norms for the matrices.
    normA = spla.norm(A, 1)
    normB = float(np.max(np.abs(w)))
    res = np.empty(vals.size)
    raw = np.empty(vals.size)
    for i in range(vals.size):
        y = vecs[:, i] / np.linalg.norm(vecs[:, i])
        vals[i] = float(y @ (H @ y))
        raw[i] = np.linalg.norm(H @ y - vals[i] * y)
        v = y / np.sqrt(w)
        r = A @ v - vals[i] * w * v
        res[i] = np.linalg.norm(r) / ((normA + abs(vals[i]) * normB) * np.linalg.norm(v))
    return vals, vecs / np.sqrt(w)[:, None], res, H, raw


def jacobi_smallest_eig(R: float, n: int | None = None, modes=range(5), k: int = 3,
                        sigma: float = -0.5, validate_n: int = 300, gap_tol: float = 1e-8,
                        joint: bool = False) -> JacobiSpectrumReport:
    """Smallest eigenvalues of -(Delta^nu + 2 rho^{-6}) N = mu rho^{-6} N on Gamma^R.

    Shift-invert Lanczos per block; the same routine is compared against a
    dense solve on a coarse grid before the production solve.
    """
    if not R > 2:
        raise ValueError("truncation radius must exceed 2")
    n = int(n) if n is not None else int(max(4000, 40 * R * R))
    gap = 0.0
    if validate_n:
        disc = assemble(R, validate_n, modes)
        for key, (A, w) in disc.blocks.items():
            vals, _, _, H, _ = _eig_block(A, w, k, sigma)
            dense = sla.eigh(H.toarray(), eigvals_only=True)[: vals.size]
            gap = max(gap, float(np.max(np.abs(dense - vals))))
        if not gap < gap_tol:
            raise ValidationGap(f"iterative vs dense eigenvalue gap {gap:.3e}")
    disc = assemble(R, n, modes)
    if joint:
        A, w = disc.joint()
        vals, vecs, res, _, raw = _eig_block(A, w, k * len(disc.blocks), sigma)
        labels = [("joint", 0)] * vals.size
    else:
        vals_l, res_l, raw_l, labels, vec_l = [], [], [], [], []
        for key, (A, w) in sorted(disc.blocks.items()):
            vals, vecs, res, _, raw = _eig_block(A, w, k, sigma)
            vals_l.append(vals)
            res_l.append(res)
            raw_l.append(raw)
            vec_l.append(vecs)
            labels += [key] * vals.size
        vals = np.concatenate(vals_l)
        res = np.concatenate(res_l)
        raw = np.concatenate(raw_l)
        vecs = np.hstack(vec_l)
    order = np.argsort(vals, kind="stable")
    return JacobiSpectrumReport(vals[order], res[order], [labels[i] for i in order], float(R), n,
                                bool(validate_n), gap, vecs[:, order], disc.s,
                                {"modes": list(modes), "sigma": sigma,
                                 "max_symmetric_residual": float(np.max(raw))})


# ---------------------------------------------------------------------------
# kernels


def jacobi_kernel_residual(index: int, ladder=(401, 801, 1601, 3201), R: float = 3.0,
                           n_theta: int = 16, field_fn=None, first_order: bool = False) -> dict:
    """Sup-norm of L_Gamma on a Jacobi field over a grid ladder.

    ``field_fn(s, theta) -> (k1, k2)`` replaces the Jacobi field, e.g. for
    negative controls.
    """
    rows = []
    for n_s in ladder:
        g = surface_grid(R, n_s, n_theta)
        if field_fn is None:
            N = jacobi_field_on(g, index)
        else:
            s, th = g.mesh()
            N = NormalField(*field_fn(s, th))
        rows.append({"n_s": n_s, "h": g.hs, "residual": apply_jacobi(g, N, first_order).sup()})
    hs = [r["h"] for r in rows]
    errs = [r["residual"] for r in rows]
    out = {"index": index, "rows": rows, "pairwise": pairwise_orders(hs, errs)}
    if len(rows) >= 3:
        out["order"] = fit_order(hs, errs)
    return out


def negative_control(s, theta):
    """(sin 2s)^{0.6} m: close to N_5 but not a Jacobi field."""
    s = np.asarray(s)
    return np.sin(2 * s) ** 0.6 * np.ones_like(theta), np.zeros(np.broadcast(s, theta).shape)


def cutoff_field(grid, index: int = 5, inner: float | None = None) -> NormalField:
    """Jacobi field times a C^2 cutoff: 1 for rho < R/2, 0 at rho = R."""
    from .numerics import smoothstep

    g = _as_grid(grid)
    s, th = g.mesh()
    k1, k2 = jacobi_fields(index, s, th)
    rho = np.sin(2 * s) ** -0.5
    R = g.R if g.R is not None else float(rho.max())
    inner = 0.5 * R if inner is None else inner
    eta = 1.0 - smoothstep((rho - inner) / (R - inner))
    return NormalField(k1 * eta, k2 * eta)
