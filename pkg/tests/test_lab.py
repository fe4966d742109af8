"""Monte Carlo harness: estimators vs closed-form tails, sweeps, exit times."""

import math

import numpy as np
import pytest
from scipy.stats import norm

import fwspde as fw
from fwspde import (Basis, ControlPath, DomainSpec, ExitConfig, Field,
                    NoiseSpec, OperatorSpec, SimParams, SweepConfig,
                    TerminalModeEvent, TubeEvent, band_limited_directions,
                    coefficient_preset, exit_time_sample, is_probability,
                    ldp_curve, mc_event_probability, sampled_controls,
                    skeleton, uniformity_sweep)
from fwspde.scenario import build_control


def lin_setup(n=32, noise_modes=None, eps=0.5, dt=5e-3, horizon=1.0, seed=0,
              batch_size=128):
    dom = DomainSpec(length=np.pi, n_grid=n, n_modes=n)
    basis = Basis(dom, OperatorSpec(diffusivities=(1.0,)))
    drift, diffusion = coefficient_preset("linear_additive")
    noise = NoiseSpec.white(1, noise_modes or n, beta=0.75)
    params = SimParams(eps=eps, horizon=horizon, dt=dt, seed=seed,
                       batch_size=batch_size)
    return basis, drift, diffusion, noise, params


def ou_tail(basis, eps, horizon, threshold, mode=1):
    """Exact P(mode amplitude at T > threshold) for the zero-reaction flow."""
    alpha = float(basis.eigenvalues[0, mode - 1])
    var = eps * (1.0 - math.exp(-2.0 * alpha * horizon)) / (2.0 * alpha)
    return float(norm.sf(threshold / math.sqrt(var)))


# --- plain Monte Carlo against the Gaussian tail -----------------------------

def test_mc_matches_gaussian_tail():
    basis, drift, diffusion, noise, params = lin_setup(eps=0.5)
    x = Field.zero(basis.domain)
    event = TerminalModeEvent(mode=1, threshold=0.4)
    est = mc_event_probability(x, event, drift, diffusion, noise, basis,
                               params, n_samples=4000)
    exact = ou_tail(basis, params.eps, params.horizon, 0.4)
    assert est.n == 4000
    assert est.flagged_frac == 0.0
    assert est.hits == round(est.p_hat * est.n)
    assert abs(est.p_hat - exact) < 4.0 * est.stderr
    # eps log p accounting
    assert est.eps_log_p == pytest.approx(params.eps * math.log(est.p_hat))


def test_mc_batching_and_threads_do_not_change_the_estimate():
    basis, drift, diffusion, noise, params = lin_setup(
        n=16, eps=0.3, dt=1e-2, batch_size=32)
    x = Field.zero(basis.domain)
    event = TerminalModeEvent(mode=1, threshold=0.3)
    a = mc_event_probability(x, event, drift, diffusion, noise, basis, params,
                             n_samples=300, threads=1)
    b = mc_event_probability(x, event, drift, diffusion, noise, basis, params,
                             n_samples=300, threads=3)
    assert a.p_hat == b.p_hat and a.stderr == b.stderr and a.hits == b.hits
    fat = SimParams(eps=params.eps, horizon=params.horizon, dt=params.dt,
                    seed=params.seed, batch_size=4096)
    c = mc_event_probability(x, event, drift, diffusion, noise, basis, fat,
                             n_samples=300)
    assert a.p_hat == c.p_hat


def test_mc_rep_base_offsets_the_streams():
    basis, drift, diffusion, noise, params = lin_setup(n=16, eps=0.3, dt=1e-2)
    x = Field.zero(basis.domain)
    event = TerminalModeEvent(mode=1, threshold=0.25)
    a = mc_event_probability(x, event, drift, diffusion, noise, basis, params,
                             n_samples=400, rep_base=0)
    b = mc_event_probability(x, event, drift, diffusion, noise, basis, params,
                             n_samples=400, rep_base=400)
    # unrelated replicate windows: estimates agree statistically, not exactly
    assert a.p_hat != b.p_hat
    assert abs(a.p_hat - b.p_hat) < 4.0 * math.hypot(a.stderr, b.stderr)


def test_mc_validation():
    basis, drift, diffusion, noise, params = lin_setup(n=8)
    x = Field.zero(basis.domain)
    event = TerminalModeEvent(mode=1, threshold=0.4)
    with pytest.raises(ValueError):
        mc_event_probability(x, event, drift, diffusion, noise, basis, params,
                             n_samples=0)
    with pytest.raises(ValueError):
        fw.Estimate("bad", -0.1, 0.0, 1, 0.0)
    with pytest.raises(ValueError):
        fw.Estimate("bad", 0.1, -1.0, 1, 0.0)
    with pytest.raises(ValueError):
        TubeEvent(center=None, delta=0.0)


def test_blowup_fraction_above_one_percent_raises():
    basis = Basis(DomainSpec(length=np.pi, n_grid=8, n_modes=8),
                  OperatorSpec(diffusivities=(1.0,)))
    drift = fw.DriftSpec(g=lambda t, xi, v: np.zeros_like(v),
                         h=lambda t, xi, x: 8.0 * x,
                         lipschitz=lambda t: 8.0, name="amplifier")
    _, diffusion = coefficient_preset("linear_additive")
    noise = NoiseSpec.white(1, 8, beta=0.75)
    params = SimParams(eps=0.0, horizon=4.0, dt=1e-2, blowup_guard=1e9)
    x = Field(basis.domain, 1e6 * np.sin(basis.xi)[None])
    event = TerminalModeEvent(mode=1, threshold=0.0)
    with pytest.raises(RuntimeError, match="blow-up guard"):
        mc_event_probability(x, event, drift, diffusion, noise, basis, params,
                             n_samples=50)


# --- importance sampling ------------------------------------------------------

def test_is_with_zero_tilt_reproduces_mc():
    basis, drift, diffusion, noise, params = lin_setup(n=16, eps=0.4, dt=1e-2)
    x = Field.zero(basis.domain)
    event = TerminalModeEvent(mode=1, threshold=0.35)
    tilt = ControlPath.zero(basis.domain, params.horizon, params.dt)
    mc = mc_event_probability(x, event, drift, diffusion, noise, basis,
                              params, n_samples=500)
    iss = is_probability(x, event, tilt, drift, diffusion, noise, basis,
                         params, n_samples=500)
    assert iss.p_hat == mc.p_hat          # unit weights, same replicates
    assert iss.hits == mc.hits
    assert iss.stderr == pytest.approx(mc.stderr, rel=1e-12)
    assert iss.ess == pytest.approx(float(mc.hits), rel=1e-12)
    assert iss.warnings == () or mc.hits < 10


def test_is_estimate_is_unbiased_for_the_gaussian_tail():
    # tilt toward the event; the weighted estimator must still match the tail
    basis, drift, diffusion, noise, params = lin_setup(eps=0.25)
    x = Field.zero(basis.domain)
    threshold = 0.55
    event = TerminalModeEvent(mode=1, threshold=threshold)
    tilt = build_control({"kind": "drive_mode", "mode": 1, "target": threshold},
                         basis, params.horizon, params.dt)
    est = is_probability(x, event, tilt, drift, diffusion, noise, basis,
                         params, n_samples=2000)
    exact = ou_tail(basis, params.eps, params.horizon, threshold)
    assert abs(est.p_hat - exact) < 4.0 * est.stderr
    assert est.stderr < math.sqrt(exact * (1 - exact) / 2000)  # variance win
    assert est.hits > 700                  # the tilt actually centers the event
    assert est.ess > 100
    assert est.warnings == ()


def test_is_flags_tiny_effective_sample_size():
    basis, drift, diffusion, noise, params = lin_setup(n=16, eps=0.05, dt=1e-2)
    x = Field.zero(basis.domain)
    event = TerminalModeEvent(mode=1, threshold=0.05)
    # absurdly strong tilt: weights spread over ~18 e-folds, ESS collapses
    tilt = ControlPath.from_mode(basis, params.horizon, params.dt,
                                 channel=0, mode=1, amplitude=4.0)
    est = is_probability(x, event, tilt, drift, diffusion, noise, basis,
                         params, n_samples=200)
    assert est.hits > 0
    assert est.ess < 10.0
    assert "effective sample size below 10" in est.warnings


def test_is_needs_positive_eps():
    basis, drift, diffusion, noise, params = lin_setup(n=8, eps=0.0)
    x = Field.zero(basis.domain)
    tilt = ControlPath.zero(basis.domain, params.horizon, params.dt)
    with pytest.raises(ValueError):
        is_probability(x, TerminalModeEvent(1, 0.1), tilt, drift, diffusion,
                       noise, basis, params, n_samples=10)


# --- the decay curve ----------------------------------------------------------

def test_ldp_curve_structure_and_bookkeeping():
    basis, drift, diffusion, noise, params = lin_setup(
        n=24, noise_modes=1, eps=0.5, dt=2e-3)
    x = Field.zero(basis.domain)
    u = build_control({"kind": "drive_mode", "mode": 1, "target": 1.0}, basis,
                      params.horizon, params.dt)
    center = skeleton(x, u, drift, diffusion, noise, params, basis)
    delta = 0.25 * float(np.abs(center.values).max())
    out = ldp_curve(x, center, delta, (0.6, 0.35), drift, diffusion, noise,
                    basis, params, n_samples=250, n_control_modes=1,
                    instanton_maxiter=80)
    assert [r.eps for r in out["rows"]] == [0.6, 0.35]
    assert out["i_tube"] < out["i_center"]
    assert out["i_ball"] == min(out["i_center"], out["i_tube"])
    assert out["delta"] == delta
    assert out["tilt_norm_sq"] > 0
    for row in out["rows"]:
        assert row.estimate.n == 250
        assert row.zero_hits == (row.estimate.hits == 0)
        if not row.zero_hits:
            assert row.gap == pytest.approx(
                row.eps * math.log(row.estimate.p_hat) + out["i_ball"])
        else:
            assert row.gap is None


def test_ldp_curve_rejects_bad_ladders():
    basis, drift, diffusion, noise, params = lin_setup(n=8, noise_modes=1)
    x = Field.zero(basis.domain)
    u = ControlPath.from_mode(basis, params.horizon, params.dt, 0, 1, 0.5)
    center = skeleton(x, u, drift, diffusion, noise, params, basis)
    for ladder in ((), (0.1, 0.2), (0.2, 0.2), (0.1, -0.05)):
        with pytest.raises(ValueError):
            ldp_curve(x, center, 0.1, ladder, drift, diffusion, noise, basis,
                      params, n_samples=5)


# --- sampled families for the sweeps -------------------------------------------

def test_band_limited_directions_have_unit_sup_norm():
    basis, *_ = lin_setup(n=24)
    dirs = band_limited_directions(basis, 6, seed=3)
    assert len(dirs) == 6
    for d in dirs:
        assert float(np.abs(d.values).max()) == pytest.approx(1.0, abs=1e-12)
    again = band_limited_directions(basis, 6, seed=3)
    for d, e in zip(dirs, again):
        np.testing.assert_array_equal(d.values, e.values)


def test_sampled_controls_fill_an_even_norm_ladder():
    basis, _, _, _, params = lin_setup(n=16, dt=1e-2)
    bound = 3.0
    controls = sampled_controls(basis, params.horizon, params.dt, 5, bound,
                                seed=7)
    norms = [u.squared_norm() for u in controls]
    for i, sq in enumerate(norms):
        assert sq == pytest.approx(bound * (i + 1) / 5, rel=1e-9)
    assert norms[-1] == pytest.approx(bound, rel=1e-9)


def test_sweep_config_validation():
    with pytest.raises(ValueError):
        SweepConfig(regime="everything", eps_ladder=(0.1,), delta=0.5)
    with pytest.raises(ValueError):
        SweepConfig(regime="bounded-set", eps_ladder=(0.1, 0.2), delta=0.5)
    with pytest.raises(ValueError):
        SweepConfig(regime="bounded-set", eps_ladder=(), delta=0.5)
    with pytest.raises(ValueError):
        SweepConfig(regime="bounded-set", eps_ladder=(0.1,), delta=-1.0)
    with pytest.raises(ValueError):
        SweepConfig(regime="bounded-set", eps_ladder=(0.1,), delta=0.5,
                    control_bound=0.0)
    cfg = SweepConfig(regime="bounded-set", eps_ladder=(0.3, 0.0), delta=0.5)
    assert cfg.eps_ladder == (0.3, 0.0)    # eps = 0 rows are allowed


def test_sweep_regime_consistency_checks():
    basis, drift, diffusion, noise, params = lin_setup(n=8)
    unbounded = fw.DiffusionSpec(sigma=lambda t, xi, x: 1.0 + np.abs(x),
                                 lipschitz=lambda t: 1.0, nu=1.0,
                                 sigma_min=1.0, name="growing")
    cfg = SweepConfig(regime="bounded-sigma", eps_ladder=(0.2,), delta=0.5)
    with pytest.raises(ValueError, match="bounded"):
        uniformity_sweep(cfg, drift, unbounded, noise, basis, params)
    cfg = SweepConfig(regime="super-dissipative", eps_ladder=(0.2,), delta=0.5)
    with pytest.raises(ValueError, match="dissipativity"):
        uniformity_sweep(cfg, drift, diffusion, noise, basis, params)
    # dissipative drift but an inadmissible growth exponent for beta = 0.75
    drift3, diff_nu = coefficient_preset("power_dissipative", m=3.0, nu=0.4)
    with pytest.raises(ValueError, match="not admissible"):
        uniformity_sweep(cfg, drift3, diff_nu, noise, basis, params)


def test_uniformity_sweep_bounded_set_counts_and_decay():
    basis, drift, diffusion, noise, params = lin_setup(
        n=16, dt=2e-2, horizon=0.5, batch_size=16)
    cfg = SweepConfig(regime="bounded-set", eps_ladder=(0.5, 0.0), delta=0.7,
                      n_directions=2, n_controls=2, n_samples=40, radius=2.0,
                      control_bound=2.0, seed=11)
    out = uniformity_sweep(cfg, drift, diffusion, noise, basis, params)
    # 2 directions x 1 magnitude x (2 sampled + zero control) x 2 eps rows
    assert len(out["cells"]) == 2 * 1 * 3 * 2
    assert out["n_controls"] == 3
    assert [c.eps for c in out["max_rows"]] == [0.5, 0.0]
    top = out["max_rows"][0].estimate
    assert top.p_hat > 0                   # the event is visible at eps = 0.5
    # with the noise off a path equals its own skeleton: exceedance never fires
    assert out["max_rows"][1].estimate.p_hat == 0.0
    for cell in out["cells"]:
        if cell.eps == 0.0:
            assert cell.estimate.hits == 0

    two = uniformity_sweep(cfg, drift, diffusion, noise, basis, params,
                           threads=2)
    for a, b in zip(out["cells"], two["cells"]):
        assert a.estimate.p_hat == b.estimate.p_hat


# --- exit times -----------------------------------------------------------------

def test_exit_time_is_zero_outside_the_ball():
    basis, drift, diffusion, noise, _ = lin_setup(n=16)
    x = Field(basis.domain, 2.0 * np.sin(basis.xi)[None])
    rep = exit_time_sample(x, ExitConfig(radius=1.0, eps=0.1, t_max=0.5),
                           drift, diffusion, noise, basis, dt=1e-2,
                           n_samples=30)
    assert rep.exit_frac == 1.0
    assert rep.median_tau == 0.0
    assert np.all(rep.taus == 0.0)


def test_exit_time_fully_censored_without_noise():
    # the zero-reaction flow contracts, so from inside the ball it never exits
    basis, drift, diffusion, noise, _ = lin_setup(n=16)
    x = Field(basis.domain, 0.5 * np.sin(basis.xi)[None])
    rep = exit_time_sample(x, ExitConfig(radius=1.0, eps=0.0, t_max=1.0),
                           drift, diffusion, noise, basis, dt=1e-2,
                           n_samples=8)
    assert rep.censored_frac == 1.0
    assert rep.exit_frac == 0.0
    assert math.isnan(rep.median_tau)
    assert np.all(rep.taus == 1.0)         # censored samples report t_max


def test_exit_time_median_with_noise_is_deterministic():
    basis, drift, diffusion, noise, _ = lin_setup(n=16)
    x = Field.zero(basis.domain)
    cfg = ExitConfig(radius=0.3, eps=0.5, t_max=2.0, seed=5)
    rep = exit_time_sample(x, cfg, drift, diffusion, noise, basis, dt=1e-2,
                           n_samples=200, threads=1)
    assert rep.censored_frac < 0.5
    assert 0.0 < rep.median_tau < cfg.t_max
    again = exit_time_sample(x, cfg, drift, diffusion, noise, basis, dt=1e-2,
                             n_samples=200, threads=2, batch_size=64)
    assert rep.median_tau == again.median_tau
    np.testing.assert_array_equal(rep.taus, again.taus)


def test_exit_config_validation():
    with pytest.raises(ValueError):
        ExitConfig(radius=0.0, eps=0.1, t_max=1.0)
    with pytest.raises(ValueError):
        ExitConfig(radius=1.0, eps=-0.1, t_max=1.0)
    with pytest.raises(ValueError):
        ExitConfig(radius=1.0, eps=0.1, t_max=0.0)
