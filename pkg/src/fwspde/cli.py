"""Command-line runner: one scenario file, one experiment, deterministic
artifacts.

    fwspde <command> --config FILE [--seed N] [--out DIR] [--threads N]

The command must match the scenario's experiment block (validate, a
read-only check, accepts any scenario).  Every run first passes the full
validator suite; artifacts (CSV tables plus a summary.json
echoing the config and its hash) contain no timestamps, so identical
config + seed reproduces identical bytes.  --threads (or FWSPDE_THREADS)
caps worker threads; parallel runs merge in replicate order and do not
change results.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import reporting
from .domain import sup_norm_path
from .dynamics import simulate, skeleton
from .lab import (ExitConfig, SweepConfig, TerminalModeEvent, TubeEvent,
                  exit_time_sample, is_probability, ldp_curve,
                  mc_event_probability, uniformity_sweep)
from .rate import InstantonProblem, instanton_minimize, rate_evaluate
from .scenario import (ScenarioConfig, ScenarioError, build_control,
                       build_field, load_scenario, parse_scenario,
                       validate_scenario)

_COMMANDS = ("validate", "simulate", "skeleton", "rate", "instanton", "mc",
             "is", "ldp-curve", "sweep", "exit")


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        n = int(os.environ.get("FWSPDE_THREADS", "1"))
    if n < 1:
        raise ScenarioError(f"--threads must be >= 1, got {n}")
    return n


def _summary(config: ScenarioConfig, results: dict) -> dict:
    return {
        "scenario": config.raw,
        "hash": config.hash(),
        "experiment": config.experiment.get("kind"),
        "results": results,
    }


def _event_from_spec(spec: dict, config, basis):
    """Event block -> (event, tube center or None)."""
    kind = spec.get("kind")
    if kind == "tube":
        x0 = build_field(spec["initial"], basis) if "initial" in spec else _initial(config, basis)
        u = build_control(spec["control"], basis, config.sim.horizon, config.sim.dt)
        center = skeleton(x0, u, config.drift, config.diffusion, config.noise,
                          config.sim, basis)
        return TubeEvent(center, _delta_of(spec, center)), center
    if kind == "terminal_mode":
        return TerminalModeEvent(int(spec["mode"]), float(spec["threshold"]),
                                 int(spec.get("channel", 0))), None
    raise ScenarioError(f"unknown event kind {kind!r}")


def _resolve_tilt_and_estimate(config, basis, x, event, center, n, threads):
    """Build the tilt for an importance-sampled run and estimate.

    tilt kinds: an explicit control block; "center_recovery" (the exact
    control of the tube center); "instanton" (tube minimizer with a 2%
    radius inset, as in the curve experiment).
    """
    spec = config.experiment["tilt"]
    kind = spec.get("kind")
    drift, diffusion, noise = config.drift, config.diffusion, config.noise
    params = config.sim
    if kind in ("center_recovery", "instanton") and center is None:
        raise ScenarioError(f"tilt kind {kind!r} needs a tube event")
    if kind == "center_recovery":
        tilt = rate_evaluate(x, center, drift, diffusion, noise, basis,
                             check_residual=False).control
    elif kind == "instanton":
        problem = InstantonProblem(
            x=x, tube_center=center, tube_delta=0.98 * event.delta,
            n_control_modes=int(spec.get("control_modes", 4)),
            target_rtol=0.005 * event.delta,
            maxiter=int(spec.get("maxiter", 300)))
        tilt = instanton_minimize(problem, drift, diffusion, noise, basis,
                                  params).control
    else:
        tilt = build_control(spec, basis, params.horizon, params.dt)
    return is_probability(x, event, tilt, drift, diffusion, noise, basis,
                          params, n, threads=threads)


def _delta_of(spec: dict, center) -> float:
    if "delta" in spec:
        return float(spec["delta"])
    factor = float(spec.get("delta_factor", 0.25))
    return factor * sup_norm_path(center)


def _initial(config, basis):
    return build_field(config.experiment["initial"], basis)


def run(config: ScenarioConfig, command: str, threads: int = 1) -> int:
    """Dispatch one experiment; returns the process exit status."""
    kind = config.experiment.get("kind")
    if kind != command and command != "validate":
        raise ScenarioError(
            f"scenario declares experiment kind {kind!r} but the command is {command!r}")
    basis = config.basis()
    report = validate_scenario(config)
    if command == "validate":
        for line in report.lines():
            print(line)
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        reporting.write_json(out / "validation.json", _summary(config, {
            "passed": report.ok,
            "checks": [{"id": c.check_id, "description": c.description,
                        "passed": c.passed, "witness": c.witness}
                       for c in report.checks],
        }))
        print(f"validate: {'all assumptions satisfied' if report.ok else 'FAILED'} "
              f"(config {config.hash()[:12]})")
        return 0 if report.ok else 1
    if not report.ok:
        for line in report.lines():
            print(line, file=sys.stderr)
        raise ScenarioError("scenario fails validation; refusing to run the experiment")

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = config.experiment
    drift, diffusion, noise = config.drift, config.diffusion, config.noise
    params = config.sim
    results: dict = {}

    if command == "simulate":
        x = _initial(config, basis)
        path = simulate(x, drift, diffusion, noise, params, basis,
                        replicate=int(exp.get("replicate", 0)))
        stride = int(exp.get("frame_stride", 1))
        reporting.write_trajectory_csv(out / "trajectory.csv",
                                       path.times[::stride], path.values[::stride],
                                       replicate=int(exp.get("replicate", 0)))
        results = {"eps": params.eps, "final_sup_norm": float(np.abs(path.values[-1]).max())}

    elif command == "skeleton":
        x = _initial(config, basis)
        u = build_control(exp["control"], basis, params.horizon, params.dt)
        path = skeleton(x, u, drift, diffusion, noise, params, basis)
        stride = int(exp.get("frame_stride", 1))
        reporting.write_trajectory_csv(out / "trajectory.csv",
                                       path.times[::stride], path.values[::stride],
                                       replicate=int(exp.get("replicate", 0)))
        results = {"control_norm_sq": u.squared_norm(),
                   "final_sup_norm": float(np.abs(path.values[-1]).max())}

    elif command == "rate":
        x = _initial(config, basis)
        u = build_control(exp["control"], basis, params.horizon, params.dt)
        path = skeleton(x, u, drift, diffusion, noise, params, basis)
        res = rate_evaluate(x, path, drift, diffusion, noise, basis)
        reporting.write_control_csv(out / "control.csv", res.control)
        results = {"value": res.value, "residual": res.residual,
                   "method": res.method,
                   "generating_norm_sq": u.squared_norm()}

    elif command == "instanton":
        x = _initial(config, basis)
        tgt = exp["target"]
        if tgt.get("kind") == "terminal_mode":
            y = build_field({"kind": "mode", "mode": tgt["mode"],
                             "amplitude": tgt["amplitude"],
                             "channel": tgt.get("channel", 0)}, basis)
            problem = InstantonProblem(x=x, terminal_target=y,
                                       n_control_modes=exp.get("control_modes"),
                                       maxiter=int(exp.get("maxiter", 400)))
        elif tgt.get("kind") == "tube":
            center = skeleton(x, build_control(tgt["control"], basis,
                                               params.horizon, params.dt),
                              drift, diffusion, noise, params, basis)
            problem = InstantonProblem(x=x, tube_center=center,
                                       tube_delta=_delta_of(tgt, center),
                                       n_control_modes=exp.get("control_modes"),
                                       maxiter=int(exp.get("maxiter", 400)))
        else:
            raise ScenarioError(f"unknown instanton target kind {tgt.get('kind')!r}")
        res = instanton_minimize(problem, drift, diffusion, noise, basis, params)
        reporting.write_control_csv(out / "control.csv", res.control)
        opt_path = skeleton(x, res.control, drift, diffusion, noise, params, basis)
        reporting.write_trajectory_csv(out / "instanton_path.csv",
                                       opt_path.times, opt_path.values)
        results = {"value": res.value, "residual": res.residual,
                   "method": res.method, "stages": len(res.details["stages"])}

    elif command in ("mc", "is"):
        x = _initial(config, basis)
        event, center = _event_from_spec(exp["event"], config, basis)
        n = int(exp["n_samples"])
        if command == "mc":
            est = mc_event_probability(x, event, drift, diffusion, noise, basis,
                                       params, n, threads=threads)
        else:
            est = _resolve_tilt_and_estimate(config, basis, x, event, center,
                                             n, threads)
        reporting.write_estimates_csv(out / "estimates.csv", [est])
        results = {"estimate": reporting.to_jsonable(est)}
        print(f"{command}: p_hat={est.p_hat:.6g} stderr={est.stderr:.3g} "
              f"n={est.n} flagged={est.flagged_frac:.3g}")
        for w in est.warnings:
            print(f"warning: {w}", file=sys.stderr)

    elif command == "ldp-curve":
        x = _initial(config, basis)
        u = build_control(exp["center_control"], basis, params.horizon, params.dt)
        center = skeleton(x, u, drift, diffusion, noise, params, basis)
        delta = _delta_of(exp, center)
        curve = ldp_curve(x, center, delta, exp["eps_ladder"], drift, diffusion,
                          noise, basis, params, n_samples=int(exp["n_samples"]),
                          n_control_modes=int(exp.get("control_modes", 4)),
                          threads=threads,
                          instanton_maxiter=int(exp.get("instanton_maxiter", 300)))
        reporting.write_curve_csv(out / "curve.csv", curve)
        results = {k: curve[k] for k in
                   ("i_center", "i_tube", "i_tube_residual", "i_ball", "delta",
                    "tilt_norm_sq")}
        results["rows"] = reporting.to_jsonable(curve["rows"])
        for row in curve["rows"]:
            gap = "n/a" if row.gap is None else f"{row.gap:.6g}"
            print(f"eps={row.eps:g}: p_hat={row.estimate.p_hat:.6g} "
                  f"hits={row.estimate.hits} gap={gap}")

    elif command == "sweep":
        sweep_cfg = SweepConfig(
            regime=exp["regime"],
            eps_ladder=tuple(exp["eps_ladder"]),
            delta=float(exp["delta"]),
            control_bound=float(exp.get("control_bound", 4.0)),
            n_directions=int(exp.get("n_directions", 8)),
            n_controls=int(exp.get("n_controls", 16)),
            n_samples=int(exp.get("n_samples", 100)),
            radius=float(exp.get("radius", 10.0)),
            magnitudes=tuple(exp.get("magnitudes", (10.0, 1e6))),
            direction_modes=int(exp.get("direction_modes", 6)),
            control_modes=int(exp.get("control_modes", 4)),
            seed=config.seed,
        )
        rep = uniformity_sweep(sweep_cfg, drift, diffusion, noise, basis,
                               params, threads=threads)
        reporting.write_sweep_csv(out / "sweep.csv", rep)
        results = reporting.to_jsonable({
            "regime": rep["regime"], "delta": rep["delta"],
            "eps_ladder": rep["eps_ladder"],
            "max_rows": rep["max_rows"],
            "max_by_magnitude": {f"{k:g}": v for k, v in rep["max_by_magnitude"].items()},
            "n_directions": rep["n_directions"],
            "n_controls": rep["n_controls"], "n_samples": rep["n_samples"],
        })
        for cell in rep["max_rows"]:
            print(f"eps={cell.eps:g}: max cell p_hat={cell.estimate.p_hat:.6g} "
                  f"(mag {cell.magnitude:g}, dir {cell.direction}, u {cell.control})")

    elif command == "exit":
        x = _initial(config, basis)
        cfg = ExitConfig(radius=float(exp["radius"]),
                         eps=float(exp.get("eps", params.eps)),
                         t_max=float(exp["t_max"]), seed=config.seed)
        rep = exit_time_sample(x, cfg, drift, diffusion, noise, basis,
                               params.dt, int(exp["n_samples"]),
                               threads=threads, batch_size=params.batch_size)
        reporting.write_exit_csv(out / "exit_times.csv", rep)
        results = {"median_tau": rep.median_tau,
                   "censored_frac": rep.censored_frac,
                   "exit_frac": rep.exit_frac, "n": rep.n,
                   "flagged_frac": rep.flagged_frac}
        print(f"exit: median_tau={rep.median_tau:.6g} "
              f"censored={rep.censored_frac:.3g}")

    reporting.write_json(out / "summary.json", _summary(config, results))
    print(f"{command}: artifacts in {out} (config {config.hash()[:12]})")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fwspde",
        description="Small-noise stochastic reaction-diffusion laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="scenario JSON file or shipped preset name")
        p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
        p.add_argument("--out", default=None,
                       help="override the scenario output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: FWSPDE_THREADS or 1)")
    args = parser.parse_args(argv)
    try:
        threads = _threads(args)
        config = load_scenario(args.config)
        if args.seed is not None:
            doc = dict(config.raw)
            doc["seed"] = args.seed
            config = parse_scenario(doc)
        if args.out is not None:
            config.output_dir = args.out
        return run(config, args.command, threads=threads)
    except (ScenarioError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
