"""Spectral basis, transforms, and semigroup checks against direct quadrature."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fwspde import (Basis, DomainSpec, Field, OperatorSpec, PathField,
                    path_distance, semigroup_apply, sup_norm, sup_norm_path,
                    to_grid, to_spectral)


def make_basis(L=np.pi, n=64, m=None, kappa=(1.0,)):
    dom = DomainSpec(length=L, n_grid=n, n_modes=m or n, n_components=len(kappa))
    return Basis(dom, OperatorSpec(diffusivities=kappa))


# --- mode functions and quadrature -----------------------------------------

def test_mode_functions_match_closed_form():
    basis = make_basis(L=2.0, n=48)
    xi = basis.xi
    for k in (1, 2, 7):
        expected = np.sqrt(2.0 / 2.0) * np.sin(k * np.pi * xi / 2.0)
        assert_allclose(basis.mode_values(k), expected, atol=1e-14)


def test_modes_orthonormal_under_trapezoid_quadrature():
    # Oracle route: integrate e_j e_k with dense Simpson quadrature, not the
    # package transforms.
    L = np.pi
    xi = np.linspace(0.0, L, 4001)
    from scipy.integrate import simpson

    for j in (1, 3, 8):
        for k in (1, 3, 8):
            ej = np.sqrt(2.0 / L) * np.sin(j * np.pi * xi / L)
            ek = np.sqrt(2.0 / L) * np.sin(k * np.pi * xi / L)
            val = simpson(ej * ek, x=xi)
            assert val == pytest.approx(1.0 if j == k else 0.0, abs=1e-8)


def test_grid_is_interior_lattice():
    basis = make_basis(L=3.0, n=30)
    h = 3.0 / 31  # interior lattice: both walls excluded
    assert_allclose(basis.xi, h * np.arange(1, 31), rtol=0, atol=1e-15)


# --- transforms --------------------------------------------------------------

def test_analyze_synthesize_round_trip():
    basis = make_basis(n=64)
    rng = np.random.default_rng(3)
    vals = rng.standard_normal((1, 64))
    assert_allclose(basis.synthesize(basis.analyze(vals)), vals, atol=1e-12)


def test_analyze_of_single_mode_is_unit_vector():
    basis = make_basis(L=1.5, n=32)
    for k in (1, 5, 20):
        vals = basis.mode_values(k)[None]
        coeffs = basis.analyze(vals)
        expected = np.zeros((1, 32))
        expected[0, k - 1] = 1.0
        assert_allclose(coeffs, expected, atol=1e-12)


def test_analyze_matches_direct_quadrature():
    # Dual route: trapezoid sum h * sum_i f(xi_i) e_k(xi_i) computed by hand.
    basis = make_basis(L=2.5, n=40)
    rng = np.random.default_rng(11)
    vals = rng.standard_normal((1, 40))
    h = 2.5 / 41
    direct = np.array([h * np.sum(vals[0] * basis.mode_values(k)) for k in range(1, 41)])
    assert_allclose(basis.analyze(vals)[0], direct, atol=1e-12)


def test_parseval_identity_on_the_lattice():
    basis = make_basis(L=2.0, n=128)
    rng = np.random.default_rng(5)
    vals = rng.standard_normal((1, 128))
    h = 2.0 / 129
    lhs = float(np.sum(basis.analyze(vals) ** 2))
    rhs = h * float(np.sum(vals ** 2))
    assert lhs == pytest.approx(rhs, rel=1e-13)


def test_truncated_modes_least_squares_projection():
    basis_full = make_basis(n=64, m=64)
    basis_trunc = make_basis(n=64, m=16)
    rng = np.random.default_rng(7)
    vals = rng.standard_normal((1, 64))
    c_full = basis_full.analyze(vals)
    c_trunc = basis_trunc.analyze(vals)
    assert_allclose(c_trunc[0], c_full[0, :16], atol=1e-12)


# --- semigroup ----------------------------------------------------------------

def test_semigroup_factors_closed_form():
    basis = make_basis(L=np.pi, n=16, kappa=(0.5, 2.0))
    t = 0.3
    fac = basis.semigroup_factors(t)
    k = np.arange(1, 17)
    assert_allclose(fac[0], np.exp(-0.5 * k ** 2 * t), atol=1e-15)
    assert_allclose(fac[1], np.exp(-2.0 * k ** 2 * t), atol=1e-15)


def test_semigroup_is_a_semigroup():
    basis = make_basis(n=32)
    rng = np.random.default_rng(13)
    f = Field(basis.domain, rng.standard_normal((1, 32)))
    one = semigroup_apply(semigroup_apply(f, basis, 0.2), basis, 0.5)
    two = semigroup_apply(f, basis, 0.7)
    assert_allclose(one.values, two.values, atol=1e-13)


def test_semigroup_matches_heat_equation_oracle():
    # Oracle: solve u_t = u_xx with Dirichlet walls by finite differences
    # (method of lines, dense grid), then compare at the basis lattice.
    from scipy.integrate import solve_ivp

    L, n = np.pi, 32
    basis = make_basis(L=L, n=n)
    rng = np.random.default_rng(17)
    coeffs = np.zeros((1, n))
    coeffs[0, :4] = rng.standard_normal(4)
    f = to_grid(coeffs, basis)

    n_fine = 400
    xf = np.linspace(0.0, L, n_fine + 1)
    u0 = np.sqrt(2.0 / L) * sum(
        coeffs[0, k] * np.sin((k + 1) * np.pi * xf / L) for k in range(4)
    )
    dx = L / n_fine

    def rhs(t, u):
        out = np.zeros_like(u)
        out[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / dx ** 2
        return out

    sol = solve_ivp(rhs, (0.0, 0.4), u0, rtol=1e-10, atol=1e-12, dense_output=True)
    u_end = sol.sol(0.4)
    expected = np.interp(basis.xi, xf, u_end)
    got = semigroup_apply(f, basis, 0.4)
    assert_allclose(got.values[0], expected, atol=2e-4)


def test_smooth_equals_spectral_multiplier():
    basis = make_basis(n=48)
    rng = np.random.default_rng(23)
    vals = rng.standard_normal((1, 48))
    direct = basis.synthesize(basis.semigroup_factors(0.1) * basis.analyze(vals))
    assert_allclose(basis.smooth(vals, 0.1), direct, atol=1e-13)


# --- fields, paths, metrics ---------------------------------------------------

def test_field_shape_validation():
    dom = DomainSpec(length=1.0, n_grid=8, n_modes=8)
    with pytest.raises(ValueError):
        Field(dom, np.zeros((2, 8)))  # one component declared
    with pytest.raises(ValueError):
        Field(dom, np.zeros((1, 9)))


def test_path_distance_is_sup_over_frames():
    dom = DomainSpec(length=1.0, n_grid=8, n_modes=8)
    times = np.linspace(0.0, 1.0, 5)
    a = PathField(dom, times, np.zeros((5, 1, 8)))
    vals = np.zeros((5, 1, 8))
    vals[3, 0, 2] = -1.25
    b = PathField(dom, times, vals)
    assert path_distance(a, b) == pytest.approx(1.25)
    assert sup_norm_path(b) == pytest.approx(1.25)
    assert sup_norm(b.frame(3)) == pytest.approx(1.25)


def test_domain_rejects_bad_sizes():
    with pytest.raises(ValueError):
        DomainSpec(length=-1.0, n_grid=8, n_modes=8)
    with pytest.raises(ValueError):
        DomainSpec(length=1.0, n_grid=8, n_modes=9)  # more modes than grid points


def test_operator_requires_positive_diffusivities():
    with pytest.raises(ValueError):
        OperatorSpec(diffusivities=(1.0, 0.0))


def test_to_spectral_round_trip_field():
    basis = make_basis(n=24)
    rng = np.random.default_rng(29)
    f = Field(basis.domain, rng.standard_normal((1, 24)))
    back = to_grid(to_spectral(f, basis), basis)
    assert_allclose(back.values, f.values, atol=1e-12)
