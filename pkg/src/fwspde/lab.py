"""Monte Carlo experiments over the small-noise dynamics.

Estimators share one batched driver: replicates are numbered globally, each
replicate draws its own counter-based stream, and chunks of at most
params.batch_size trajectories run through the engine with on-the-fly
reductions.  Results are therefore bit-identical for a given (config, seed)
regardless of chunking or thread count; threads only map chunks in order.

Blow-up-guarded samples are never silent: every estimate carries the flagged
fraction, and any run with more than 1% flagged raises.  For "stay close"
(tube) events a flagged sample counts as a miss; for "deviates by more than
delta" exceedance events it counts as a hit, so the reported decay of the
deviation probability is never flattered by discarded trajectories.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .coefficients import DiffusionSpec, DriftSpec, NoiseSpec, admissible_nu
from .domain import Basis, Field, PathField, _step_count
from .dynamics import ControlPath, Engine, SimParams, _increment_block
from .rate import InstantonProblem, instanton_minimize, rate_evaluate

_FLAG_LIMIT = 0.01


@dataclass(frozen=True)
class Estimate:
    """A Monte Carlo probability (or mean) with its accounting."""

    name: str
    p_hat: float
    stderr: float
    n: int
    flagged_frac: float
    eps_log_p: Optional[float] = None
    hits: int = 0
    ess: Optional[float] = None
    warnings: tuple = ()

    def __post_init__(self):
        if self.p_hat < 0:
            raise ValueError("negative probability estimate")
        if self.stderr < 0:
            raise ValueError("negative standard error")


@dataclass(frozen=True)
class TubeEvent:
    """Open sup-norm tube: the path stays strictly delta-close to the center."""

    center: PathField
    delta: float

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("tube radius must be positive")

    def engine_kwargs(self) -> dict:
        return {"tube_center": self.center.values}

    def evaluate(self, out: dict, basis: Basis) -> np.ndarray:
        hits = out["sup_dev_tube"] < self.delta
        return hits & ~out["flagged"]  # flagged = miss (conservative for the hit rate)


@dataclass(frozen=True)
class TerminalModeEvent:
    """Spectral amplitude of one mode at the final time exceeds a threshold."""

    mode: int  # 1-based
    threshold: float
    channel: int = 0

    def engine_kwargs(self) -> dict:
        return {}

    def evaluate(self, out: dict, basis: Basis) -> np.ndarray:
        amp = basis.analyze(out["final"])[:, self.channel, self.mode - 1]
        hits = amp > self.threshold
        return hits & ~out["flagged"]


@dataclass(frozen=True)
class ExceedanceEvent:
    """Sup-norm deviation from a reference path exceeds delta (the premise
    event of the uniformity sweeps); flagged samples count as exceedances."""

    reference: np.ndarray  # (M+1, r, n)
    delta: float

    def engine_kwargs(self) -> dict:
        return {"ref_values": self.reference}

    def evaluate(self, out: dict, basis: Basis) -> np.ndarray:
        return (out["sup_dev_ref"] > self.delta) | out["flagged"]


def _chunked(reps: np.ndarray, size: int):
    return [reps[i: i + size] for i in range(0, len(reps), size)]


def _event_samples(
    x_values: np.ndarray,
    event,
    engine: Engine,
    noise: NoiseSpec,
    params: SimParams,
    n_samples: int,
    rep_base: int,
    u_coeffs: Optional[np.ndarray],
    threads: int = 1,
):
    """Hits, Girsanov weights, and flags for replicates rep_base..+n-1."""
    eps = params.eps
    reps_all = np.arange(rep_base, rep_base + n_samples, dtype=np.int64)
    chunks = _chunked(reps_all, params.batch_size)
    kwargs = event.engine_kwargs()

    def one(reps):
        incs = _increment_block(params, noise, reps) if eps > 0 else None
        xb = np.repeat(x_values[None], len(reps), axis=0)
        out = engine.run(xb, eps, increments=incs, u_coeffs=u_coeffs, **kwargs)
        hits = event.evaluate(out, engine.basis)
        lw = out["log_weight"]
        w = np.ones(len(reps)) if lw is None else np.exp(lw)
        return hits, w, out["flagged"]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(one, chunks))
    else:
        parts = [one(c) for c in chunks]
    hits = np.concatenate([p[0] for p in parts])
    weights = np.concatenate([p[1] for p in parts])
    flagged = np.concatenate([p[2] for p in parts])
    return hits, weights, flagged


def _check_flags(flagged: np.ndarray, context: str) -> float:
    frac = float(flagged.mean()) if len(flagged) else 0.0
    if frac > _FLAG_LIMIT:
        raise RuntimeError(
            f"{context}: {flagged.sum()} of {len(flagged)} trajectories hit the "
            f"blow-up guard ({100 * frac:.2f}% > {100 * _FLAG_LIMIT:.0f}%); "
            "estimates would be biased"
        )
    return frac


def mc_event_probability(
    x: Field,
    event,
    drift: DriftSpec,
    diffusion: DiffusionSpec,
    noise: NoiseSpec,
    basis: Basis,
    params: SimParams,
    n_samples: int,
    seed: Optional[int] = None,
    rep_base: int = 0,
    threads: int = 1,
    name: str = "mc",
) -> Estimate:
    """Plain Monte Carlo frequency of the event with binomial stderr."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    p = params if seed is None else replace(params, seed=seed)
    engine = Engine(basis, drift, diffusion, noise, p)
    hits, _, flagged = _event_samples(x.values, event, engine, noise, p,
                                      n_samples, rep_base, None, threads)
    frac = _check_flags(flagged, name)
    k = int(hits.sum())
    p_hat = k / n_samples
    stderr = math.sqrt(p_hat * (1.0 - p_hat) / n_samples)
    elp = p.eps * math.log(p_hat) if (p_hat > 0 and p.eps > 0) else None
    return Estimate(name, p_hat, stderr, n_samples, frac, eps_log_p=elp, hits=k)


def is_probability(
    x: Field,
    event,
    tilt: ControlPath,
    drift: DriftSpec,
    diffusion: DiffusionSpec,
    noise: NoiseSpec,
    basis: Basis,
    params: SimParams,
    n_samples: int,
    seed: Optional[int] = None,
    rep_base: int = 0,
    threads: int = 1,
    name: str = "is",
) -> Estimate:
    """Importance-sampled probability under the tilted (controlled) dynamics.

    The estimator is mean(1_event * exp(log-weight)); with the zero tilt it
    reproduces mc_event_probability sample for sample.  The effective sample
    size (sum w)^2 / sum w^2 over event hits is attached, with a warning
    below 10.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    p = params if seed is None else replace(params, seed=seed)
    if p.eps <= 0:
        raise ValueError("importance sampling needs eps > 0")
    engine = Engine(basis, drift, diffusion, noise, p)
    uc = engine.control_coeffs(tilt)
    hits, weights, flagged = _event_samples(x.values, event, engine, noise, p,
                                            n_samples, rep_base, uc, threads)
    frac = _check_flags(flagged, name)
    y = weights * hits
    p_hat = float(y.mean())
    stderr = math.sqrt(max(0.0, float((y ** 2).mean()) - p_hat ** 2) / n_samples)
    wh = weights[hits]
    ess = float(wh.sum() ** 2 / (wh ** 2).sum()) if wh.size else 0.0
    warn = ("effective sample size below 10",) if ess < 10.0 else ()
    elp = p.eps * math.log(p_hat) if p_hat > 0 else None
    return Estimate(name, p_hat, stderr, n_samples, frac, eps_log_p=elp,
                    hits=int(hits.sum()), ess=ess, warnings=warn)


# ---------------------------------------------------------------------------
# eps log P curves against the action of the target tube


@dataclass(frozen=True)
class CurveRow:
    eps: float
    estimate: Estimate
    gap: Optional[float]  # eps*log(p_hat) + i_ball, None when no hits
    zero_hits: bool


def ldp_curve(
    x: Field,
    center: PathField,
    delta: float,
    eps_ladder,
    drift: DriftSpec,
    diffusion: DiffusionSpec,
    noise: NoiseSpec,
    basis: Basis,
    params: SimParams,
    n_samples: int = 10000,
    seed: Optional[int] = None,
    tilt: Optional[ControlPath] = None,
    n_control_modes: int = 4,
    threads: int = 1,
    instanton_maxiter: int = 300,
) -> dict:
    """Small-noise decay of the tube probability against the cheapest action.

    The comparison value i_ball is min(action of the center path, action of a
    feasible control whose skeleton stays strictly inside the tube); the tube
    minimizer is found with the hinge radius inset by 2% so the certificate
    really lies inside the open tube.  Rows carry the gap
    eps*log(p_hat) + i_ball; zero-hit rows are marked, never extrapolated.
    Unless a tilt is supplied, sampling is tilted by the tube minimizer.
    """
    ladder = [float(e) for e in eps_ladder]
    if any(e2 >= e1 for e1, e2 in zip(ladder, ladder[1:])) or not ladder:
        raise ValueError("eps ladder must be nonempty and strictly decreasing")
    if any(e <= 0 for e in ladder):
        raise ValueError("eps values must be positive")

    center_rate = rate_evaluate(x, center, drift, diffusion, noise, basis)
    problem = InstantonProblem(
        x=x,
        tube_center=center,
        tube_delta=0.98 * delta,
        n_control_modes=n_control_modes,
        target_rtol=0.005 * delta,
        maxiter=instanton_maxiter,
    )
    tube_rate = instanton_minimize(problem, drift, diffusion, noise, basis, params)
    i_ball = min(center_rate.value, tube_rate.value)
    if tilt is None:
        tilt = tube_rate.control

    event = TubeEvent(center, delta)
    rows = []
    base_seed = params.seed if seed is None else seed
    for l, eps in enumerate(ladder):
        p_eps = replace(params, eps=eps, seed=base_seed)
        est = is_probability(x, event, tilt, drift, diffusion, noise, basis,
                             p_eps, n_samples, rep_base=l * n_samples,
                             threads=threads, name=f"eps={eps:g}")
        gap = None if est.eps_log_p is None else est.eps_log_p + i_ball
        rows.append(CurveRow(eps, est, gap, est.hits == 0))
    return {
        "rows": rows,
        "i_center": center_rate.value,
        "i_tube": tube_rate.value,
        "i_tube_residual": tube_rate.residual,
        "i_ball": i_ball,
        "delta": delta,
        "tilt_norm_sq": tilt.squared_norm(),
    }


# ---------------------------------------------------------------------------
# uniformity sweeps over initial data and controls


def band_limited_directions(basis: Basis, n_directions: int, seed: int,
                            n_modes: int = 6) -> list:
    """Random low-mode profiles normalized to unit sup norm."""
    rng = np.random.default_rng(seed)
    r = basis.domain.n_components
    K = min(n_modes, basis.domain.n_modes)
    out = []
    for _ in range(n_directions):
        coeffs = np.zeros((r, basis.domain.n_modes))
        coeffs[:, :K] = rng.standard_normal((r, K)) / (1.0 + np.arange(K))
        vals = basis.synthesize(coeffs)
        s = float(np.abs(vals).max())
        if s < 1e-12:
            raise RuntimeError("degenerate random direction")
        out.append(Field(basis.domain, vals / s))
    return out


def sampled_controls(basis: Basis, horizon: float, dt: float, n_controls: int,
                     bound: float, seed: int, n_modes: int = 4,
                     n_freqs: int = 2) -> list:
    """Band-limited controls rescaled to squared norms on an even ladder up to
    the bound; the zero control is prepended by the sweep itself."""
    rng = np.random.default_rng(seed)
    r = basis.domain.n_components
    K = min(n_modes, basis.domain.n_modes)
    M = _step_count(horizon, dt)
    times = np.arange(M + 1) * dt
    out = []
    for i in range(n_controls):
        coeffs = np.zeros((r, basis.domain.n_modes))
        coeffs[:, :K] = rng.standard_normal((r, K)) / (1.0 + np.arange(K))
        profile_grid = basis.synthesize(coeffs)
        tp = np.full(M + 1, rng.standard_normal())
        for c in range(1, n_freqs + 1):
            tp = tp + rng.standard_normal() * np.cos(c * math.pi * times / horizon)
            tp = tp + rng.standard_normal() * np.sin(c * math.pi * times / horizon)
        vals = tp[:, None, None] * profile_grid[None]
        h = basis.domain.length / (basis.domain.n_grid + 1)
        sq = float(np.trapezoid((vals ** 2).sum(axis=(1, 2)) * h, times))
        if sq < 1e-14:
            raise RuntimeError("degenerate random control")
        target = bound * (i + 1) / n_controls
        vals = vals * math.sqrt(target / sq)
        out.append(ControlPath(basis.domain, times, vals, bound=bound))
    return out


_REGIMES = ("bounded-set", "bounded-sigma", "super-dissipative")


@dataclass(frozen=True)
class SweepConfig:
    """Sampled families standing in for the suprema of the uniformity claims.

    regime selects the initial-data family: a radius-K set of directions
    ("bounded-set"), or a magnitude ladder for the two unbounded regimes,
    which additionally require the matching coefficient structure (bounded
    diffusion, or a super-dissipative drift with an admissible growth
    exponent).
    """

    regime: str
    eps_ladder: tuple
    delta: float
    control_bound: float = 4.0
    n_directions: int = 8
    n_controls: int = 16
    n_samples: int = 100
    radius: float = 10.0
    magnitudes: tuple = (10.0, 1e6)
    direction_modes: int = 6
    control_modes: int = 4
    seed: int = 20260814

    def __post_init__(self):
        if self.regime not in _REGIMES:
            raise ValueError(f"regime must be one of {_REGIMES}")
        ladder = tuple(float(e) for e in self.eps_ladder)
        if not ladder or any(e < 0 for e in ladder):
            raise ValueError("eps ladder must be nonnegative")
        if any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError("eps ladder must be strictly decreasing")
        object.__setattr__(self, "eps_ladder", ladder)
        object.__setattr__(self, "magnitudes", tuple(float(m) for m in self.magnitudes))
        if self.control_bound <= 0:
            raise ValueError("control bound must be positive")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass(frozen=True)
class SweepCell:
    eps: float
    magnitude: float
    direction: int
    control: int  # 0 = zero control
    estimate: Estimate


def uniformity_sweep(
    config: SweepConfig,
    drift: DriftSpec,
    diffusion: DiffusionSpec,
    noise: NoiseSpec,
    basis: Basis,
    params: SimParams,
    threads: int = 1,
) -> dict:
    """P(|controlled path - its skeleton| exceeds delta) over a sampled
    (initial data x control) family, reported per eps with the max cell.

    The uniformity premise predicts the max cell decays with eps; in the two
    unbounded regimes it additionally predicts flatness across magnitudes.
    """
    if config.regime == "bounded-sigma" and not diffusion.bounded:
        raise ValueError("bounded-sigma regime needs a diffusion with the bounded flag")
    if config.regime == "super-dissipative":
        if drift.dissipativity is None:
            raise ValueError("super-dissipative regime needs a drift dissipativity triple")
        m = drift.dissipativity[0]
        limit = admissible_nu(m, noise.beta, noise.rho)
        if not diffusion.nu < limit:
            raise ValueError(
                f"diffusion growth exponent nu={diffusion.nu} is not admissible: "
                f"needs nu < {limit:.6g} for m={m}"
            )

    magnitudes = ((config.radius,) if config.regime == "bounded-set"
                  else config.magnitudes)
    directions = band_limited_directions(basis, config.n_directions, config.seed,
                                         n_modes=config.direction_modes)
    controls = [None] + sampled_controls(
        basis, params.horizon, params.dt, config.n_controls,
        config.control_bound, config.seed + 1, n_modes=config.control_modes)

    engine = Engine(basis, drift, diffusion, noise, params)
    n_eps = len(config.eps_ladder)
    cells = []
    cell_index = 0
    for i_dir, direction in enumerate(directions):
        for mag in magnitudes:
            x_vals = mag * direction.values
            for i_u, u in enumerate(controls):
                uc = None if u is None else engine.control_coeffs(u)
                ref = engine.run(x_vals, 0.0, u_coeffs=uc, store=True)
                if ref["flagged"][0]:
                    raise RuntimeError(
                        f"skeleton blew up (magnitude {mag:g}, direction {i_dir}, "
                        f"control {i_u}); the sweep scenario is ill-posed")
                event = ExceedanceEvent(ref["path"][0], config.delta)
                for i_e, eps in enumerate(config.eps_ladder):
                    p_eps = replace(params, eps=eps, seed=config.seed)
                    rep_base = (cell_index * n_eps + i_e) * config.n_samples
                    hits, _, flagged = _event_samples(
                        x_vals, event, engine, noise, p_eps,
                        config.n_samples, rep_base, uc, threads)
                    frac = _check_flags(
                        flagged, f"sweep cell (mag {mag:g}, dir {i_dir}, u {i_u}, eps {eps:g})")
                    k = int(hits.sum())
                    p_hat = k / config.n_samples
                    stderr = math.sqrt(p_hat * (1.0 - p_hat) / config.n_samples)
                    est = Estimate(
                        f"dir{i_dir}/mag{mag:g}/u{i_u}/eps{eps:g}",
                        p_hat, stderr, config.n_samples, frac, hits=k)
                    cells.append(SweepCell(eps, mag, i_dir, i_u, est))
                cell_index += 1

    max_rows = []
    for eps in config.eps_ladder:
        sub = [c for c in cells if c.eps == eps]
        top = max(sub, key=lambda c: (c.estimate.p_hat, -c.direction, -c.control))
        max_rows.append(top)
    by_magnitude = {}
    for mag in magnitudes:
        by_magnitude[mag] = [
            max((c for c in cells if c.eps == eps and c.magnitude == mag),
                key=lambda c: (c.estimate.p_hat, -c.direction, -c.control))
            for eps in config.eps_ladder
        ]
    return {
        "regime": config.regime,
        "delta": config.delta,
        "eps_ladder": config.eps_ladder,
        "cells": cells,
        "max_rows": max_rows,
        "max_by_magnitude": by_magnitude,
        "n_directions": config.n_directions,
        "n_controls": config.n_controls + 1,
        "n_samples": config.n_samples,
    }


# ---------------------------------------------------------------------------
# exit times from a sup-norm ball


@dataclass(frozen=True)
class ExitConfig:
    radius: float
    eps: float
    t_max: float
    seed: int = 0

    def __post_init__(self):
        if self.radius <= 0 or self.t_max <= 0 or self.eps < 0:
            raise ValueError("exit experiment needs radius > 0, t_max > 0, eps >= 0")


@dataclass(frozen=True)
class ExitReport:
    median_tau: float
    censored_frac: float
    exit_frac: float
    n: int
    flagged_frac: float
    taus: np.ndarray = field(repr=False)       # per replicate; t_max where censored
    censored: np.ndarray = field(repr=False)


def exit_time_sample(
    x: Field,
    config: ExitConfig,
    drift: DriftSpec,
    diffusion: DiffusionSpec,
    noise: NoiseSpec,
    basis: Basis,
    dt: float,
    n_samples: int,
    rep_base: int = 0,
    threads: int = 1,
    batch_size: int = 128,
) -> ExitReport:
    """First lattice time the sup norm leaves the ball, censored at t_max.

    The median treats censored samples as +infinity; when more than half the
    runs are censored the median is reported as nan (demo-grade statistic, no
    asymptotic claim).
    """
    params = SimParams(eps=config.eps, horizon=config.t_max, dt=dt,
                       seed=config.seed, batch_size=batch_size)
    engine = Engine(basis, drift, diffusion, noise, params)
    reps_all = np.arange(rep_base, rep_base + n_samples, dtype=np.int64)
    chunks = _chunked(reps_all, params.batch_size)

    def one(reps):
        incs = _increment_block(params, noise, reps) if config.eps > 0 else None
        xb = np.repeat(x.values[None], len(reps), axis=0)
        out = engine.run(xb, config.eps, increments=incs,
                         exit_radius=config.radius)
        return out["exit_step"], out["flagged"]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(one, chunks))
    else:
        parts = [one(c) for c in chunks]
    steps = np.concatenate([p[0] for p in parts])
    flagged = np.concatenate([p[1] for p in parts])
    frac = _check_flags(flagged, "exit-time run")

    censored = steps < 0
    taus = np.where(censored, config.t_max, steps * dt)
    cens_frac = float(censored.mean())
    if cens_frac >= 0.5:
        median = math.nan
    else:
        with_inf = np.where(censored, np.inf, taus)
        median = float(np.median(with_inf))
    return ExitReport(median, cens_frac, float(1.0 - cens_frac), n_samples,
                      frac, taus, censored)
