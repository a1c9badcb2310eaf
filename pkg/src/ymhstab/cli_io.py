"""Experiment configuration, pipelines, manifests and convergence reports.

A run takes an ExperimentConfig (YAML, unknown keys rejected), dispatches
the named pipeline, writes its CSV artifacts plus ``manifest.yaml`` into the
output directory and returns the RunManifest.  CSV payloads depend only on
the config and seed; timings live in the manifest alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .errors import ConfigInvalid, InsufficientLadder, PipelineFailure, YMHError
from .numerics import fit_order, pairwise_orders

EXPERIMENTS = ("solve-vortex", "identities", "fiber-spectrum", "first-correction", "metric-check",
               "jacobi-kernels", "jacobi-spectrum", "residual-scan", "energy-compare", "converge")


# ---------------------------------------------------------------------------
# configuration


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class VortexSection(_Section):
    lam: list[float] = Field(default_factory=lambda: [1.0])
    degree: int = 1
    N: int = Field(2000, ge=20)
    R_max: float | None = Field(None, gt=0)
    tol: float = Field(1e-10, gt=0)
    scheme_order: int = 6

    @field_validator("lam")
    @classmethod
    def _positive(cls, v):
        if not v or any(x <= 0 for x in v):
            raise ValueError("lam values must be positive")
        return v

    @field_validator("degree")
    @classmethod
    def _nonzero(cls, v):
        if v == 0:
            raise ValueError("degree must be nonzero")
        return v

    @field_validator("scheme_order")
    @classmethod
    def _order(cls, v):
        if v not in (2, 4, 6, 8):
            raise ValueError("scheme_order must be 2, 4, 6 or 8")
        return v


class FiberSection(_Section):
    M: list[int] = Field(default_factory=lambda: [400, 800, 1600])
    L: int = Field(16, ge=4)
    fourier_mode_max: int = Field(8, ge=0)
    spectrum_h: float = Field(0.0015, gt=0)


class GeometrySection(_Section):
    points: int = Field(100, ge=1)
    eps_list: list[float] = Field(default_factory=lambda: [0.08, 0.04, 0.02])
    expansion_point: list[float] = Field(default_factory=lambda: [0.7, 0.8, -0.5])


class JacobiSection(_Section):
    R_list: list[float] = Field(default_factory=lambda: [5.0, 10.0, 20.0])
    n: int | None = Field(None, ge=50)
    ladder: list[int] = Field(default_factory=lambda: [401, 801, 1601, 3201])
    kernel_R: float = Field(3.0, gt=1)
    indices: list[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5, 6])


class FieldsSection(_Section):
    eps_list: list[float] = Field(default_factory=lambda: [0.08, 0.04, 0.02])
    R: float = Field(8.0, gt=1)
    n_s: int = Field(25, ge=3)
    n_theta: int = Field(16, ge=1)
    n_r: int = Field(32, ge=4)
    n_phi: int = Field(16, ge=4)
    normal_fields: list[int] = Field(default_factory=lambda: [5, 1])
    samples: int = Field(5, ge=1)

    @field_validator("eps_list")
    @classmethod
    def _eps(cls, v):
        if any(not 0 < e < 0.2 for e in v):
            raise ValueError("eps values must lie in (0, 0.2)")
        return v


class ConvergeSection(_Section):
    check: Literal["jacobi-kernel", "vortex", "fiber-kernel"] = "jacobi-kernel"
    ladder: list[int] = Field(default_factory=lambda: [401, 801, 1601, 3201])
    index: int = 1
    first_order_hook: bool = False


class ExperimentConfig(_Section):
    experiment: Literal[EXPERIMENTS]  # type: ignore[valid-type]
    seed: int = 0
    out: str = "out"
    vortex: VortexSection = Field(default_factory=VortexSection)
    fiber: FiberSection = Field(default_factory=FiberSection)
    geometry: GeometrySection = Field(default_factory=GeometrySection)
    jacobi: JacobiSection = Field(default_factory=JacobiSection)
    fields: FieldsSection = Field(default_factory=FieldsSection)
    converge: ConvergeSection = Field(default_factory=ConvergeSection)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form (output directory excluded)."""
        data = self.model_dump(mode="json")
        data.pop("out")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigInvalid(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigInvalid("config must be a mapping")
    return parse_config(data)


# ---------------------------------------------------------------------------
# manifest


class Check(BaseModel):
    name: str
    passed: bool
    value: float | None = None
    threshold: float | None = None
    note: str = ""


class Artifact(BaseModel):
    name: str
    sha256: str
    rows: int


class RunManifest(BaseModel):
    experiment: str
    config_digest: str
    seed: int
    version: str = __version__
    artifacts: list[Artifact] = Field(default_factory=list)
    checks: list[Check] = Field(default_factory=list)
    timings: dict[str, float] = Field(default_factory=dict)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _check(name, value, threshold, op="<", note="") -> Check:
    value = float(value)
    passed = {"<": value < threshold, ">": value > threshold, ">=": value >= threshold,
              "<=": value <= threshold}[op]
    return Check(name=name, passed=bool(passed), value=value, threshold=float(threshold), note=note)


# ---------------------------------------------------------------------------
# pipelines: each returns (artifacts {name: csv text}, checks)


def _profiles(cfg: ExperimentConfig, degree: int | None = None):
    from .vortex_profile import solve_vortex

    v = cfg.vortex
    return [solve_vortex(lam, degree or v.degree, R_max=v.R_max, N=v.N, tol=v.tol,
                         scheme_order=v.scheme_order) for lam in v.lam]


def _pipe_solve_vortex(cfg, rng):
    from .errors import WindowUnderflow
    from .vortex_profile import fit_decay_rates, profile_csv, vortex_residual

    arts, checks, rows = {}, [], []
    for p in _profiles(cfg):
        tag = f"lam{p.lam:g}_j{p.degree}"
        arts[f"profile_{tag}.csv"] = profile_csv(p)
        res = vortex_residual(p)
        try:
            rates = fit_decay_rates(p)
        except WindowUnderflow:
            rates = {"rate_U": float("nan"), "rate_V": float("nan")}
        w, z = np.asarray(p.one_minus_U), np.asarray(p.one_minus_V)
        inside = bool(np.all((w[1:] > 0) & (w[1:] < 1)) and np.all((z[1:] > 0) & (z[1:] < 1)))
        mono = bool(np.all(np.diff(w) < 0) and np.all(np.diff(z) < 0))
        rows.append([p.lam, p.degree, p.N, p.R_max, p.residual_norm, res["res_U"], res["res_V"],
                     rates["rate_U"], rates["rate_V"], int(inside), int(mono)])
        checks.append(_check(f"residual_{tag}", max(res["res_U"], res["res_V"]), 1e-8))
        checks.append(Check(name=f"bounds_monotone_{tag}", passed=inside and mono))
    arts["vortex_summary.csv"] = _csv(["lam", "degree", "N", "R_max", "solver_residual", "res_U", "res_V",
                                       "rate_U", "rate_V", "bounds", "monotone"], rows)
    return arts, checks


def _pipe_identities(cfg, rng):
    from .vortex_linearization import kernel_identities

    rows, checks = [], []
    for p in _profiles(cfg):
        rep = kernel_identities(p)
        for name, two_d, radial, gap, kind in rep.entries:
            rows.append([p.lam, name, two_d, radial, gap, kind])
            if kind == "relative":
                checks.append(_check(f"identity_{name}_lam{p.lam:g}", gap, 1e-6))
            else:
                checks.append(_check(f"{name}_lam{p.lam:g}", gap, 1e-10))
    return {"identities.csv": _csv(["lam", "identity", "two_d", "radial", "gap", "kind"], rows)}, checks


def _pipe_fiber_spectrum(cfg, rng):
    from .vortex_linearization import default_rfib, fiber_spectrum

    arts, checks = {}, []
    f = cfg.fiber
    for p in _profiles(cfg):
        grid = {"R": default_rfib(p.lam), "h": f.spectrum_h}
        rep = fiber_spectrum(p, fourier_mode_max=f.fourier_mode_max, grid=grid)
        tag = f"lam{p.lam:g}_j{p.degree}"
        arts[f"spectrum_{tag}.csv"] = rep.to_csv()
        if abs(p.degree) == 1 or p.lam <= 1.0:
            checks.append(_check(f"min_eig_{tag}", rep.min_eigenvalue, -1e-6, ">="))
        else:
            checks.append(_check(f"min_eig_{tag}", rep.min_eigenvalue, -1e-3, "<",
                                 note=f"mode {rep.min_mode}"))
    return arts, checks


def _pipe_first_correction(cfg, rng):
    from .vortex_linearization import solve_first_correction

    arts, checks = {}, []
    for p in _profiles(cfg, degree=1):
        pair = solve_first_correction(p)
        tag = f"lam{p.lam:g}"
        arts[f"correction_{tag}.csv"] = pair.to_csv()
        checks.append(_check(f"operator_residual_{tag}", pair.residual, 1e-6))
        checks.append(_check(f"rhs_orthogonality_{tag}", max(abs(d) for d in pair.rhs_defects), 1e-8))
        checks.append(_check(f"solution_orthogonality_{tag}", max(abs(d) for d in pair.solution_defects), 1e-8))
    return arts, checks


def sample_metric_points(rng, n: int) -> np.ndarray:
    """Rows (eps, s~, theta~, a, b) inside the tube."""
    eps = rng.uniform(0.02, 0.2, n)
    s = rng.uniform(0.15, np.pi / 2 - 0.15, n)
    th = rng.uniform(0.0, 2 * np.pi, n)
    rad = np.sqrt(1.0 / (eps * np.sin(2 * s)))
    r = rng.uniform(0.0, 0.5, n) * rad
    ph = rng.uniform(0.0, 2 * np.pi, n)
    return np.column_stack([eps, s / eps, th / eps, r * np.cos(ph), r * np.sin(ph)])


def _pipe_metric_check(cfg, rng):
    from .gamma_geometry import inverse_metric_expansion_check, jacobian_gram, metric_at

    g = cfg.geometry
    rows = []
    for eps, st, tt, a, b in sample_metric_points(rng, g.points):
        G = jacobian_gram(eps, st, tt, a, b)
        gap = float(np.max(np.abs(G - metric_at(eps, st, tt, a, b)["g"])))
        rows.append([eps, st, tt, a, b, gap])
    gaps = [r[-1] for r in rows]
    checks = [_check("metric_vs_gram_max_gap", max(gaps), 1e-6)]
    exp_rows = inverse_metric_expansion_check(tuple(g.expansion_point), g.eps_list)
    out = [[r["epsilon"], r["gap1"], r["gap2"], r.get("ratio1", ""), r.get("ratio2", "")] for r in exp_rows]
    for r in exp_rows[1:]:
        ok = 6.0 <= r["ratio2"] <= 10.0
        checks.append(Check(name=f"inverse_expansion_ratio_eps{r['epsilon']:g}", passed=ok,
                            value=r["ratio2"], note="factor 6-10 per halving"))
    arts = {"metric_points.csv": _csv(["eps", "s_tilde", "theta_tilde", "a", "b", "gap"], rows),
            "inverse_expansion.csv": _csv(["eps", "gap1", "gap2", "ratio1", "ratio2"], out)}
    return arts, checks


def _pipe_jacobi_kernels(cfg, rng):
    from .jacobi_spectral import jacobi_kernel_residual, negative_control

    j = cfg.jacobi
    rows, checks = [], []
    for idx in j.indices:
        rep = jacobi_kernel_residual(idx, tuple(j.ladder), j.kernel_R)
        order = rep.get("order", float("nan"))
        for row, po in zip(rep["rows"], [float("nan")] + rep["pairwise"]):
            rows.append([f"N{idx}", row["h"], row["residual"], po])
        checks.append(Check(name=f"jacobi_kernel_order_N{idx}", passed=bool(abs(order - 2.0) <= 0.2),
                            value=order, threshold=2.0, note="order 2 +- 0.2"))
    neg = jacobi_kernel_residual(0, tuple(j.ladder), j.kernel_R, field_fn=negative_control)
    for row in neg["rows"]:
        rows.append(["control", row["h"], row["residual"], float("nan")])
    checks.append(_check("negative_control_min_residual", min(r["residual"] for r in neg["rows"]), 1e-2, ">"))
    return {"jacobi_kernels.csv": _csv(["field", "h", "residual", "order"], rows)}, checks


def _pipe_jacobi_spectrum(cfg, rng):
    from .jacobi_spectral import jacobi_smallest_eig

    j = cfg.jacobi
    parts, checks, mins = [], [], []
    for i, R in enumerate(j.R_list):
        rep = jacobi_smallest_eig(R, j.n)
        parts.append(rep.to_csv(header=(i == 0)))
        mins.append(rep.min_eigenvalue)
        checks.append(_check(f"min_eig_R{R:g}", rep.min_eigenvalue, -1e-6, ">="))
        checks.append(_check(f"eig_residual_R{R:g}", float(np.max(rep.residuals)), 1e-8))
    mono = all(b <= a + 1e-12 for a, b in zip(mins, mins[1:]))
    checks.append(Check(name="monotone_in_R", passed=mono))
    return {"jacobi_spectrum.csv": "".join(parts)}, checks


def _pipe_residual_scan(cfg, rng):
    from .vortex_profile import solve_vortex
    from .ymh_fields import default_residual_samples, residual_scan

    fs = cfg.fields
    prof = solve_vortex(cfg.vortex.lam[0], 1, R_max=cfg.vortex.R_max, N=cfg.vortex.N, tol=cfg.vortex.tol)
    samples = default_residual_samples()[: fs.samples]
    scan = residual_scan(prof, fs.eps_list, samples)
    rows, checks = [], []
    for row in scan:
        for k, smp in enumerate(samples):
            ratio = row["ratio"][k] if "ratio" in row else float("nan")
            rows.append([row["epsilon"], k, *smp, row["rel_gap"][k], ratio,
                         row["S1_gap_over_eps3"][k], row["S2_gap_over_eps3"][k]])
        if "ratio" in row:
            lo, hi = float(np.min(row["ratio"])), float(np.max(row["ratio"]))
            checks.append(Check(name=f"residual_ratio_eps{row['epsilon']:g}", passed=bool(1.5 <= lo and hi <= 2.5),
                                value=float(np.median(row["ratio"])), note=f"range [{lo:.3f}, {hi:.3f}]"))
    head = ["eps", "sample", "s", "theta", "r", "phi", "rel_gap", "ratio", "S1_gap_over_eps3", "S2_gap_over_eps3"]
    return {"residual_scan.csv": _csv(head, rows)}, checks


def _pipe_energy_compare(cfg, rng):
    from .vortex_linearization import solve_first_correction
    from .vortex_profile import solve_vortex
    from .ymh_fields import energy_comparison, surface_cutoff_field

    fs = cfg.fields
    prof = solve_vortex(cfg.vortex.lam[0], 1, R_max=cfg.vortex.R_max, N=cfg.vortex.N, tol=cfg.vortex.tol)
    corr = solve_first_correction(prof)
    grid = {"n_s": fs.n_s, "n_theta": fs.n_theta, "n_r": fs.n_r, "n_phi": fs.n_phi}
    rows, checks = [], []
    for idx in fs.normal_fields:
        N = surface_cutoff_field(idx, fs.R)
        prev = None
        for eps in fs.eps_list:
            r = energy_comparison(prof, N, eps, fs.R, grid, correction=corr)
            ratio = prev / r["normalized_gap"] if prev else float("nan")
            rows.append([f"N{idx}", eps, r["lhs"], r["rhs"], r["gap"], r["normalized_gap"], ratio])
            if prev:
                checks.append(Check(name=f"energy_ratio_N{idx}_eps{eps:g}", passed=bool(1.5 <= ratio <= 2.5),
                                    value=ratio, note="per-halving ratio window [1.5, 2.5]"))
            prev = r["normalized_gap"]
    head = ["field", "eps", "lhs", "rhs", "gap", "normalized_gap", "ratio"]
    return {"energy_comparison.csv": _csv(head, rows)}, checks


def _pipe_converge(cfg, rng):
    table = convergence_study(cfg)
    rows = [[t["check"], h, e, t["order"], int(t["flagged"])] for t in table for h, e in zip(t["h"], t["errors"])]
    checks = [Check(name=f"order_{t['check']}", passed=not t["flagged"], value=t["order"],
                    note="flagged outside [1.5, 2.5]" if t["flagged"] else "") for t in table]
    return {"convergence.csv": _csv(["check", "h", "residual", "order", "flagged"], rows)}, checks


PIPELINES = {
    "solve-vortex": _pipe_solve_vortex,
    "identities": _pipe_identities,
    "fiber-spectrum": _pipe_fiber_spectrum,
    "first-correction": _pipe_first_correction,
    "metric-check": _pipe_metric_check,
    "jacobi-kernels": _pipe_jacobi_kernels,
    "jacobi-spectrum": _pipe_jacobi_spectrum,
    "residual-scan": _pipe_residual_scan,
    "energy-compare": _pipe_energy_compare,
    "converge": _pipe_converge,
}


# ---------------------------------------------------------------------------
# orchestration


def execute(config: ExperimentConfig | dict) -> tuple[RunManifest, dict[str, str]]:
    """Run the configured pipeline in memory; returns the manifest and {artifact name: CSV text}."""
    cfg = config if isinstance(config, ExperimentConfig) else parse_config(config)
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    try:
        arts, checks = PIPELINES[cfg.experiment](cfg, rng)
    except YMHError as exc:
        raise PipelineFailure(f"{cfg.experiment}: {type(exc).__name__}: {exc}") from exc
    elapsed = time.perf_counter() - t0
    names = [c.name for c in checks]
    if len(set(names)) != len(names):
        raise PipelineFailure("duplicate check names in manifest")
    manifest = RunManifest(experiment=cfg.experiment, config_digest=cfg.digest(), seed=cfg.seed,
                           artifacts=[Artifact(name=k, sha256=hashlib.sha256(v.encode()).hexdigest(),
                                               rows=v.count("\n") - 1) for k, v in sorted(arts.items())],
                           checks=checks, timings={"pipeline_seconds": round(elapsed, 3)})
    return manifest, arts


def write_outputs(outdir: str | Path, cfg: ExperimentConfig, manifest: RunManifest, arts: dict) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, text in sorted(arts.items()):
        (outdir / name).write_text(text)
    (outdir / "config.yaml").write_text(cfg.to_yaml())
    (outdir / "manifest.yaml").write_text(manifest.to_yaml())
    return outdir


def run_experiment(config: ExperimentConfig | dict, out: str | Path | None = None,
                   write: bool = True) -> RunManifest:
    """Run the configured pipeline, write CSVs and manifest.yaml, return the manifest."""
    cfg = config if isinstance(config, ExperimentConfig) else parse_config(config)
    manifest, arts = execute(cfg)
    if write:
        write_outputs(out or cfg.out, cfg, manifest, arts)
    return manifest


def flag_order(order: float, lo: float = 1.5, hi: float = 2.5) -> bool:
    return not (lo <= order <= hi)


def convergence_study(config: ExperimentConfig | dict) -> list[dict]:
    """Fitted orders for the configured refinement ladder; flags orders outside [1.5, 2.5]."""
    cfg = config if isinstance(config, ExperimentConfig) else parse_config(config)
    c = cfg.converge
    if len(c.ladder) < 3:
        raise InsufficientLadder("a convergence study needs at least three resolutions")
    if c.check == "jacobi-kernel":
        from .jacobi_spectral import jacobi_kernel_residual

        rep = jacobi_kernel_residual(c.index, tuple(c.ladder), cfg.jacobi.kernel_R,
                                     first_order=c.first_order_hook)
        hs = [r["h"] for r in rep["rows"]]
        errs = [r["residual"] for r in rep["rows"]]
    elif c.check == "vortex":
        hs, errs = _vortex_ladder(cfg)
    else:
        from .vortex_linearization import fiber_kernel_residual
        from .vortex_profile import solve_vortex

        prof = solve_vortex(cfg.vortex.lam[0], 1, R_max=cfg.vortex.R_max, N=cfg.vortex.N, tol=cfg.vortex.tol)
        rep = fiber_kernel_residual(prof, [{"M": m, "L": cfg.fiber.L} for m in c.ladder])
        hs = [r["h"] for r in rep["rows"]]
        errs = [r["res_T1"] for r in rep["rows"]]
    order = fit_order(hs, errs)
    return [{"check": c.check, "h": hs, "errors": errs, "pairwise": pairwise_orders(hs, errs),
             "order": order, "flagged": flag_order(order)}]


def _vortex_ladder(cfg: ExperimentConfig):
    """Second-order profiles on N, 2N, 4N, ... against a sixth-order reference on the finest grid."""
    from .vortex_profile import solve_vortex

    v = cfg.vortex
    ladder = list(cfg.converge.ladder)
    R = v.R_max
    ref = solve_vortex(v.lam[0], v.degree, R_max=R, N=max(ladder), tol=v.tol, scheme_order=6)
    hs, errs = [], []
    for n in ladder:
        if max(ladder) % n:
            raise InsufficientLadder("vortex ladder entries must divide the finest N")
        p = solve_vortex(v.lam[0], v.degree, R_max=R, N=n, tol=v.tol, scheme_order=2)
        step = max(ladder) // n
        errs.append(float(max(np.max(np.abs(np.asarray(p.U) - np.asarray(ref.U)[::step])),
                              np.max(np.abs(np.asarray(p.V) - np.asarray(ref.V)[::step])))))
        hs.append(p.h)
    return hs, errs
