import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ymhstab.errors import BoundaryNonzero, GridMismatch
from ymhstab.jacobi_spectral import (NormalField, apply_jacobi, cutoff_field, jacobi_field_on,
                                     jacobi_kernel_residual, jacobi_smallest_eig, negative_control,
                                     quadratic_form_Q, rho6_norm_sq, surface_grid, weighted_pairing)


def _bump_fields(g, coeffs):
    s, th = g.mesh()
    rho = np.sin(2 * s) ** -0.5
    bump = np.where(rho < g.R, (1 - (rho / g.R) ** 2) ** 3, 0.0)
    c = coeffs
    return NormalField(bump * (c[0] + c[1] * np.cos(th) + c[2] * np.sin(2 * th)),
                       bump * (c[3] + c[4] * np.sin(th) + c[5] * np.cos(th) * np.cos(2 * s)))


@pytest.mark.parametrize("index", [1, 2, 3, 4, 5, 6])
def test_jacobi_fields_are_kernels(index):
    rep = jacobi_kernel_residual(index)
    assert 1.8 <= rep["order"] <= 2.2
    assert rep["rows"][-1]["residual"] < 1e-4


def test_negative_control_stays_away_from_zero():
    rep = jacobi_kernel_residual(0, field_fn=negative_control)
    assert min(r["residual"] for r in rep["rows"]) > 1e-2


def test_first_order_hook_degrades_order():
    rep = jacobi_kernel_residual(5, first_order=True)
    assert abs(rep["order"] - 1.0) < 0.2


def test_constant_field_reduces_to_potential():
    g = surface_grid(5.0, 201, 8)
    s, _ = g.mesh()
    one = np.ones_like(s)
    out = apply_jacobi(g, NormalField(one, 0 * one))
    sig, c = np.sin(2 * s), np.cos(2 * s)
    expected = sig * (2 * sig ** 2 - c ** 2)
    assert np.max(np.abs(out.k1 - expected)) < 1e-12
    assert np.max(np.abs(out.k2)) < 1e-12


def test_grid_mismatch():
    with pytest.raises(GridMismatch):
        NormalField(np.zeros((3, 4)), np.zeros((4, 4)))


def test_quadratic_form_integration_by_parts():
    gaps = []
    for n in (3201, 6401, 12801):
        g = surface_grid(6.0, n, 16)
        N = _bump_fields(g, [1.0, 0.5, -0.3, 0.2, 0.7, -0.4])
        gaps.append(abs(quadratic_form_Q(g, N) + weighted_pairing(g, apply_jacobi(g, N), N)))
    assert gaps[-1] < 1e-4
    assert 3.5 < gaps[0] / gaps[1] < 4.5


def test_quadratic_form_basic_cases():
    g = surface_grid(8.0, 801, 16)
    zero = NormalField(np.zeros((801, 16)), np.zeros((801, 16)))
    assert quadratic_form_Q(g, zero) == 0.0
    assert quadratic_form_Q(g, cutoff_field(g, 5)) >= 0.0
    with pytest.raises(BoundaryNonzero):
        quadratic_form_Q(g, jacobi_field_on(g, 5))


@settings(max_examples=20, deadline=None)
@given(coeffs=st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_quadratic_form_nonnegative(coeffs):
    g = surface_grid(6.0, 801, 16)
    N = _bump_fields(g, coeffs)
    assert quadratic_form_Q(g, N) >= -1e-6 * rho6_norm_sq(g, N)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_discrete_self_adjointness(seed):
    rng = np.random.default_rng(seed)
    g = surface_grid(6.0, 801, 16)
    N, M = _bump_fields(g, rng.normal(size=6)), _bump_fields(g, rng.normal(size=6))
    a = weighted_pairing(g, apply_jacobi(g, N), M)
    b = weighted_pairing(g, N, apply_jacobi(g, M))
    assert abs(a - b) <= 1e-8 * np.sqrt(weighted_pairing(g, N, N) * weighted_pairing(g, M, M))


@pytest.fixture(scope="module")
def spectra():
    return {R: jacobi_smallest_eig(R) for R in (5.0, 10.0, 20.0)}


def test_spectrum_stable_and_accurate(spectra):
    for rep in spectra.values():
        assert rep.min_eigenvalue >= -1e-6
        assert np.max(rep.residuals) < 1e-8
        assert np.all(np.diff(rep.eigenvalues) >= 0)
        assert rep.dense_validated and rep.dense_gap < 1e-8


def test_spectrum_monotone_and_tends_to_zero(spectra):
    assert spectra[20.0].min_eigenvalue <= spectra[5.0].min_eigenvalue + 1e-8
    assert spectra[10.0].min_eigenvalue <= spectra[5.0].min_eigenvalue
    assert spectra[20.0].min_eigenvalue < 0.1


def test_rayleigh_quotient_bounds_the_eigenvalue(spectra):
    g = surface_grid(20.0, 4001, 8)
    N = cutoff_field(g, 5)
    assert spectra[20.0].min_eigenvalue <= quadratic_form_Q(g, N) / rho6_norm_sq(g, N) + 1e-6


def test_modes_decouple():
    a = jacobi_smallest_eig(5.0, 1000)
    b = jacobi_smallest_eig(5.0, 1000, joint=True)
    assert np.max(np.abs(a.eigenvalues[:6] - b.eigenvalues[:6])) < 1e-10


def test_spectrum_csv(spectra):
    lines = spectra[5.0].to_csv().splitlines()
    assert lines[0] == "R,mode,eig,residual"
    assert lines[1].split(",")[1] in {f"{m}{s}" for m in range(5) for s in "+-"}
