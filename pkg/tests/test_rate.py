"""Action functional: recovery from paths, minimizers, and the adjoint."""

import math

import numpy as np
import pytest

import fwspde as fw
from fwspde import (Basis, ControlPath, DomainSpec, Field, InstantonProblem,
                    NoiseSpec, OperatorSpec, SimParams, adjoint_gradient_check,
                    coefficient_preset, instanton_minimize, level_membership,
                    rate_evaluate, skeleton, sup_norm_path)


def lq_setup(n=32, dt=1e-3, horizon=1.0, noise_modes=None):
    dom = DomainSpec(length=np.pi, n_grid=n, n_modes=n)
    basis = Basis(dom, OperatorSpec(diffusivities=(1.0,)))
    drift, diffusion = coefficient_preset("linear_additive")
    noise = NoiseSpec.white(1, noise_modes or n, beta=0.75)
    params = SimParams(eps=0.0, horizon=horizon, dt=dt)
    return basis, drift, diffusion, noise, params


def mode_control(basis, params, c, mode=1):
    return ControlPath.from_mode(basis, params.horizon, params.dt, channel=0,
                                 mode=mode, amplitude=c)


# --- recovery ------------------------------------------------------------------

def test_free_path_has_zero_action():
    basis, drift, diffusion, noise, params = lq_setup()
    u0 = ControlPath.zero(basis.domain, params.horizon, params.dt)
    path = skeleton(Field.zero(basis.domain), u0, drift, diffusion, noise,
                    params, basis)
    res = rate_evaluate(Field.zero(basis.domain), path, drift, diffusion,
                        noise, basis)
    assert res.value < 1e-10
    assert res.residual < 1e-8


def test_recovery_returns_half_squared_norm():
    basis, drift, diffusion, noise, params = lq_setup()
    c = 0.9
    u = mode_control(basis, params, c)
    path = skeleton(Field.zero(basis.domain), u, drift, diffusion, noise,
                    params, basis)
    res = rate_evaluate(Field.zero(basis.domain), path, drift, diffusion,
                        noise, basis)
    exact = 0.5 * c ** 2 * params.horizon
    assert res.value == pytest.approx(exact, rel=2e-5)
    assert res.residual < 1e-6
    # the recovered control is the constant mode profile we fed in
    mid = res.control.values[len(res.control.times) // 2]
    expected = c * basis.mode_values(1)
    np.testing.assert_allclose(mid[0], expected, atol=1e-4)


def test_recovery_scales_quadratically():
    basis, drift, diffusion, noise, params = lq_setup(dt=2e-3)
    vals = {}
    for c in (0.5, 1.0, 2.0):
        path = skeleton(Field.zero(basis.domain), mode_control(basis, params, c),
                        drift, diffusion, noise, params, basis)
        vals[c] = rate_evaluate(Field.zero(basis.domain), path, drift,
                                diffusion, noise, basis).value
    assert vals[1.0] == pytest.approx(4 * vals[0.5], rel=1e-6)
    assert vals[2.0] == pytest.approx(4 * vals[1.0], rel=1e-6)


def test_recovery_with_state_dependent_sigma():
    # multiplicative coefficient: dividing by sigma(X) must still recover u
    basis, drift, _, noise, params = lq_setup(n=24, dt=1e-3, horizon=0.5)
    diffusion = fw.DiffusionSpec(
        sigma=lambda t, xi, x: 1.0 + 0.25 * np.tanh(x),
        nu=0.0, bounded=True, lipschitz=lambda t: 0.25, sigma_min=0.75,
        sigma_prime=lambda t, xi, x: 0.25 / np.cosh(x) ** 2,
        name="tanh-modulated")
    u = mode_control(basis, params, 0.8)
    path = skeleton(Field.zero(basis.domain), u, drift, diffusion, noise,
                    params, basis)
    res = rate_evaluate(Field.zero(basis.domain), path, drift, diffusion,
                        noise, basis)
    assert res.value == pytest.approx(0.5 * 0.8 ** 2 * 0.5, rel=5e-4)
    assert res.residual < 5e-5


def test_rate_requires_matching_initial_field():
    basis, drift, diffusion, noise, params = lq_setup(n=16)
    path = skeleton(Field.zero(basis.domain),
                    ControlPath.zero(basis.domain, params.horizon, params.dt),
                    drift, diffusion, noise, params, basis)
    bad = Field(basis.domain, np.ones((1, 16)))
    with pytest.raises(ValueError):
        rate_evaluate(bad, path, drift, diffusion, noise, basis)


def test_rate_requires_invertible_sigma():
    basis, drift, _, noise, params = lq_setup(n=16)
    degenerate = fw.DiffusionSpec(sigma=lambda t, xi, x: np.ones_like(x),
                                  bounded=True, name="no-floor")  # sigma_min unset
    path = skeleton(Field.zero(basis.domain),
                    ControlPath.zero(basis.domain, params.horizon, params.dt),
                    drift, fw.coefficient_preset("linear_additive")[1], noise,
                    params, basis)
    with pytest.raises(ValueError):
        rate_evaluate(Field.zero(basis.domain), path, drift, degenerate, noise, basis)


# --- level sets --------------------------------------------------------------------

def test_level_membership_classification():
    basis, drift, diffusion, noise, params = lq_setup(dt=2e-3)
    x = Field.zero(basis.domain)

    def action_of(c):
        path = skeleton(x, mode_control(basis, params, c), drift, diffusion,
                        noise, params, basis)
        return path

    level = 0.5  # actions are c^2/2
    inside, _ = level_membership(x, action_of(0.5), level, drift, diffusion,
                                 noise, basis)
    outside, res = level_membership(x, action_of(1.5), level, drift, diffusion,
                                    noise, basis)
    boundary, _ = level_membership(x, action_of(1.0), level, drift, diffusion,
                                   noise, basis, tol=1e-3)
    assert (inside, boundary, outside) == ("inside", "boundary", "outside")
    assert res.value == pytest.approx(0.5 * 1.5 ** 2, rel=1e-4)


# --- terminal instanton against the scalar LQ optimum --------------------------------

def test_terminal_instanton_matches_lq_closed_form():
    # Steering mode 1 of the heat semigroup to amplitude b at time T with
    # minimal action costs b^2 alpha / (1 - e^{-2 alpha T}).
    basis, drift, diffusion, noise, params = lq_setup(n=32, dt=2e-3)
    b, alpha = 0.7, 1.0
    target = Field(basis.domain, b * basis.mode_values(1)[None])
    problem = InstantonProblem(x=Field.zero(basis.domain),
                               terminal_target=target, n_control_modes=4,
                               target_rtol=1e-4)
    res = instanton_minimize(problem, drift, diffusion, noise, basis, params)
    exact = b ** 2 * alpha / (1.0 - math.exp(-2.0 * alpha))
    assert res.value == pytest.approx(exact, rel=5e-3)
    assert res.residual < 1e-3  # terminal miss in the path norm


def test_instanton_value_is_certified_by_recovery():
    # round trip: the minimizer's control replayed through the dynamics gives
    # a path whose recovered action matches the reported value
    basis, drift, diffusion, noise, params = lq_setup(n=24, dt=2e-3)
    target = Field(basis.domain, 0.5 * basis.mode_values(1)[None])
    problem = InstantonProblem(x=Field.zero(basis.domain),
                               terminal_target=target, n_control_modes=3)
    res = instanton_minimize(problem, drift, diffusion, noise, basis, params)
    path = skeleton(Field.zero(basis.domain), res.control, drift, diffusion,
                    noise, params, basis)
    back = rate_evaluate(Field.zero(basis.domain), path, drift, diffusion,
                         noise, basis)
    assert back.value == pytest.approx(res.value, rel=1e-3)


def test_tube_instanton_cheaper_than_center():
    # Center = the minimal-action ramp to amplitude b at time T.  Its
    # deviation grows monotonically, so a delta-tube around it binds at T
    # only, and the cheapest inhabitant is the (1 - delta/sup)-rescaled ramp
    # with action (1 - 0.25)^2 I_center.
    from fwspde.scenario import build_control

    basis, drift, diffusion, noise, params = lq_setup(n=32, dt=2e-3,
                                                      noise_modes=1)
    x = Field.zero(basis.domain)
    u = build_control({"kind": "drive_mode", "mode": 1, "target": 1.2}, basis,
                      params.horizon, params.dt)
    center = skeleton(x, u, drift, diffusion, noise, params, basis)
    delta = 0.25 * sup_norm_path(center)
    i_center = rate_evaluate(x, center, drift, diffusion, noise, basis).value
    problem = InstantonProblem(x=x, tube_center=center, tube_delta=delta,
                               n_control_modes=1, target_rtol=1e-3)
    res = instanton_minimize(problem, drift, diffusion, noise, basis, params)
    assert res.value < i_center
    assert res.value == pytest.approx(0.75 ** 2 * i_center, rel=0.02)


def test_instanton_problem_validation():
    basis, *_ = lq_setup(n=8)
    x = Field.zero(basis.domain)
    with pytest.raises(ValueError):
        InstantonProblem(x=x)  # no target at all
    target = Field(basis.domain, np.ones((1, 8)))
    center = fw.PathField(basis.domain, np.array([0.0, 0.1]), np.zeros((2, 1, 8)))
    with pytest.raises(ValueError):
        InstantonProblem(x=x, terminal_target=target, tube_center=center,
                         tube_delta=0.1)  # both targets
    with pytest.raises(ValueError):
        InstantonProblem(x=x, tube_center=center)  # tube without a width


# --- adjoint gradient -----------------------------------------------------------------

def test_adjoint_gradient_matches_finite_differences_linear():
    basis, drift, diffusion, noise, params = lq_setup(n=16, dt=5e-3, horizon=0.5)
    target = Field(basis.domain, 0.4 * basis.mode_values(1)[None])
    problem = InstantonProblem(x=Field.zero(basis.domain),
                               terminal_target=target, n_control_modes=3)
    gap = adjoint_gradient_check(problem, drift, diffusion, noise, basis,
                                 params, n_directions=5)
    assert gap < 1e-5


def test_adjoint_gradient_matches_finite_differences_nonlinear():
    basis, _, diffusion, noise, params = lq_setup(n=16, dt=5e-3, horizon=0.5)
    drift, _ = coefficient_preset("allen_cahn_like")
    target = Field(basis.domain, 0.4 * basis.mode_values(1)[None])
    problem = InstantonProblem(x=Field.zero(basis.domain),
                               terminal_target=target, n_control_modes=3)
    gap = adjoint_gradient_check(problem, drift, diffusion, noise, basis,
                                 params, n_directions=5)
    assert gap < 1e-5


def test_adjoint_gradient_with_tube_target():
    basis, drift, diffusion, noise, params = lq_setup(n=16, dt=5e-3,
                                                      horizon=0.5, noise_modes=2)
    center = skeleton(Field.zero(basis.domain), mode_control(basis, params, 1.0),
                      drift, diffusion, noise, params, basis)
    problem = InstantonProblem(x=Field.zero(basis.domain), tube_center=center,
                               tube_delta=0.05, n_control_modes=2)
    gap = adjoint_gradient_check(problem, drift, diffusion, noise, basis,
                                 params, n_directions=4)
    assert gap < 1e-4  # hinge subgradient: one-sided but smooth off the kink


def test_adjoint_gradient_with_multiplicative_sigma():
    basis, drift, _, noise, params = lq_setup(n=16, dt=5e-3, horizon=0.5)
    diffusion = fw.DiffusionSpec(
        sigma=lambda t, xi, x: 1.0 + 0.2 * np.sin(x),
        nu=0.0, bounded=True, lipschitz=lambda t: 0.2, sigma_min=0.8,
        sigma_prime=lambda t, xi, x: 0.2 * np.cos(x), name="sin-modulated")
    target = Field(basis.domain, 0.3 * basis.mode_values(2)[None])
    problem = InstantonProblem(x=Field.zero(basis.domain),
                               terminal_target=target, n_control_modes=3)
    gap = adjoint_gradient_check(problem, drift, diffusion, noise, basis,
                                 params, n_directions=4)
    assert gap < 1e-5
