"""Acceptance criteria, one test per criterion.

Each test records a one-line verdict that is printed at the end of the
session (see ``conftest.py``) and also when the module is run as a script.
"""
import time

import numpy as np
import pytest

from ymhstab.cli_io import execute, parse_config
from ymhstab.vortex_linearization import check_ode_derivative_identity, fiber_kernel_residual
from ymhstab.vortex_profile import fit_decay_rates, solve_vortex

VERDICTS: dict[int, str] = {}


def _record(number, title, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} acceptance {number:2d} {title}: {detail}"
    VERDICTS[number] = line
    print(line)
    return passed


def _run(cfg):
    manifest, arts = execute(parse_config(cfg))
    return {c.name: c for c in manifest.checks}, arts


def _worst(checks, prefix=""):
    sel = [c for c in checks.values() if c.name.startswith(prefix)]
    failed = [c.name for c in sel if not c.passed]
    return sel, failed


def test_vortex_solves():
    checks, _ = _run({"experiment": "solve-vortex", "vortex": {"lam": [0.5, 1, 2, 4], "N": 2000}})
    res = {n: c.value for n, c in checks.items() if n.startswith("residual_")}
    shape_ok = all(c.passed for n, c in checks.items() if n.startswith("bounds_monotone_"))
    ok = all(v < 1e-8 for v in res.values()) and shape_ok
    detail = ", ".join(f"{n[9:]}={v:.2e}" for n, v in res.items()) + f"; bounds/monotone {shape_ok}"
    assert _record(1, "vortex residual < 1e-8, bounds, monotone", ok, detail)


def test_decay_rates():
    parts, ok = [], True
    for lam in (0.5, 1.0, 4.0, 9.0):
        rates = fit_decay_rates(solve_vortex(lam, 1))
        target = min(np.sqrt(lam), 2.0)
        good = abs(rates["rate_U"] / target - 1) <= 0.05 and abs(rates["rate_V"] - 1) <= 0.05
        ok &= good
        parts.append(f"lam={lam:g} U {rates['rate_U']:.3f}/{target:.3f} V {rates['rate_V']:.3f}")
    assert _record(2, "decay rates within 5%", ok, "; ".join(parts))


def test_kernel_identities():
    checks, _ = _run({"experiment": "identities", "vortex": {"lam": [0.5, 1, 2]}})
    rel = [c.value for n, c in checks.items() if n.startswith("identity_")]
    cross = [c.value for n, c in checks.items() if n.startswith("re_cross")]
    ok = all(c.passed for c in checks.values()) and len(rel) == 15
    detail = f"{len(rel)} relative gaps, max {max(rel):.2e}; max |Re cross| {max(cross):.2e}"
    assert _record(3, "kernel identities", ok, detail)


def test_fiber_kernels():
    rep = fiber_kernel_residual(solve_vortex(1.0, 1), [{"M": m, "L": 16} for m in (400, 800, 1600)])
    sup = max(rep["rows"][-1]["res_T1"], rep["rows"][-1]["res_T2"])
    ok = all(abs(rep[k] - 2) <= 0.2 for k in ("order_T1", "order_T2")) and sup < 1e-4
    detail = f"order T1 {rep['order_T1']:.3f}, T2 {rep['order_T2']:.3f}; finest sup {sup:.2e}"
    assert _record(4, "fiber kernel residual order 2", ok, detail)


def test_fiber_spectra_dichotomy():
    fiber = {"fourier_mode_max": 4}
    stable, _ = _run({"experiment": "fiber-spectrum", "vortex": {"lam": [0.5, 1, 2], "degree": 1}, "fiber": fiber})
    split, _ = _run({"experiment": "fiber-spectrum", "vortex": {"lam": [1.5, 0.5], "degree": 2}, "fiber": fiber})
    allc = {**stable, **split}
    ok = all(c.passed for c in allc.values())
    detail = ", ".join(f"{n[8:]}={c.value:.3g}" for n, c in allc.items())
    assert _record(5, "fiber spectrum dichotomy", ok, detail)


def test_metric_oracle():
    checks, _ = _run({"experiment": "metric-check", "seed": 0, "geometry": {"points": 100}})
    gap = checks["metric_vs_gram_max_gap"].value
    ratios = [c.value for n, c in checks.items() if n.startswith("inverse_expansion_ratio")]
    ok = all(c.passed for c in checks.values())
    detail = f"metric gap {gap:.2e}; inverse expansion ratios " + ", ".join(f"{r:.2f}" for r in ratios)
    assert _record(6, "metric oracle and inverse expansion", ok, detail)


def test_jacobi_kernels():
    checks, _ = _run({"experiment": "jacobi-kernels"})
    orders = [f"{c.value:.3f}" for n, c in checks.items() if n.startswith("jacobi_kernel_order")]
    neg = checks["negative_control_min_residual"].value
    ok = all(c.passed for c in checks.values())
    assert _record(7, "Jacobi kernel order 2, negative control", ok,
                   f"orders {', '.join(orders)}; control min residual {neg:.3f}")


def test_jacobi_spectrum():
    checks, _ = _run({"experiment": "jacobi-spectrum", "jacobi": {"R_list": [5, 10, 20]}})
    mins = [f"{c.value:.4g}" for n, c in checks.items() if n.startswith("min_eig")]
    res = max(c.value for n, c in checks.items() if n.startswith("eig_residual"))
    ok = all(c.passed for c in checks.values())
    assert _record(8, "Jacobi spectrum nonnegative, monotone", ok,
                   f"min eigenvalues {', '.join(mins)}; max residual {res:.1e}")


def test_residual_scaling():
    checks, _ = _run({"experiment": "residual-scan", "fields": {"eps_list": [0.08, 0.04, 0.02], "samples": 5}})
    ok = all(c.passed for c in checks.values()) and len(checks) == 2
    detail = "; ".join(f"{n}: median {c.value:.3f} {c.note}" for n, c in checks.items())
    assert _record(9, "residual ratio per halving in [1.5, 2.5]", ok, detail)


def test_energy_comparison():
    t0 = time.perf_counter()
    checks, arts = _run({"experiment": "energy-compare"})
    elapsed = time.perf_counter() - t0
    ok = all(c.passed for c in checks.values()) and elapsed <= 900
    detail = ", ".join(f"{n[13:]}={c.value:.3f}" for n, c in checks.items()) + f"; {elapsed:.0f} s"
    assert _record(10, "energy gap ratio per halving in [1.5, 2.5]", ok, detail)


def test_first_correction():
    checks, _ = _run({"experiment": "first-correction", "vortex": {"lam": [1, 2]}})
    ok = all(c.passed for c in checks.values())
    detail = ", ".join(f"{n}={c.value:.1e}" for n, c in checks.items())
    assert _record(11, "first correction", ok, detail)


def test_ode_derivative_identity():
    val = check_ode_derivative_identity(solve_vortex(1.0, 1))
    assert _record(12, "ODE derivative identity < 1e-6", val < 1e-6, f"{val:.2e}")


@pytest.mark.parametrize("experiment", ["solve-vortex", "metric-check"])
def test_determinism(experiment):
    cfg = {"experiment": experiment, "seed": 7, "vortex": {"lam": [1.0, 2.0]}}
    first = _run(cfg)[1]
    second = _run(cfg)[1]
    same = first == second and all(isinstance(v, str) for v in first.values())
    prev = VERDICTS.get(13)
    ok = same and (prev is None or prev.startswith("PASS"))
    _record(13, "determinism of CSV bytes", ok, f"{experiment} and earlier runs identical: {same}")
    assert same


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
