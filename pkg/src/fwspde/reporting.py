"""Deterministic report files.

Everything here is byte-stable: floats print with 17 significant digits
(enough to round-trip IEEE doubles), rows end with a newline, JSON keys are
sorted, and no timestamps or environment details are ever written.  Identical
inputs therefore produce identical bytes, which is what the reproducibility
contract of the laboratory promises.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Iterable, Optional

import numpy as np


def fmt17(value) -> str:
    """Fixed-width-precision rendering used in every CSV cell."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % float(value)


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt17(c) for c in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def to_jsonable(obj):
    """Recursively convert dataclasses/numpy containers to JSON-native types."""
    if obj is None or isinstance(obj, (str, bool)):
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name))
                for f in dataclasses.fields(obj) if f.repr}
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set)):
        return [to_jsonable(v) for v in obj]
    return str(obj)


def write_json(path, payload: dict) -> None:
    with open(path, "w", newline="") as fh:
        json.dump(to_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


ESTIMATE_HEADER = ("name", "p_hat", "stderr", "n", "flagged_frac", "eps_log_p")


def estimate_row(est) -> tuple:
    return (est.name, est.p_hat, est.stderr, est.n, est.flagged_frac, est.eps_log_p)


def write_estimates_csv(path, estimates) -> None:
    write_csv(path, ESTIMATE_HEADER, [estimate_row(e) for e in estimates])


def write_trajectory_csv(path, times, values, replicate: int = 0) -> None:
    """One row per (t, component, grid index): the optional trajectory dump."""
    rows = []
    n_frames, r, n = values.shape
    for k in range(n_frames):
        t = times[k]
        for i in range(r):
            for q in range(n):
                rows.append((replicate, t, i, q, values[k, i, q]))
    write_csv(path, ("replicate", "t", "component", "xi_index", "value"), rows)


CURVE_HEADER = ("eps", "p_hat", "stderr", "n", "hits", "ess", "flagged_frac",
                "eps_log_p", "i_ball", "gap", "zero_hits")


def write_curve_csv(path, curve: dict) -> None:
    rows = []
    for row in curve["rows"]:
        e = row.estimate
        rows.append((row.eps, e.p_hat, e.stderr, e.n, e.hits, e.ess,
                     e.flagged_frac, e.eps_log_p, curve["i_ball"], row.gap,
                     row.zero_hits))
    write_csv(path, CURVE_HEADER, rows)


SWEEP_HEADER = ("regime", "eps", "magnitude", "direction", "control",
                "p_hat", "stderr", "n", "flagged_frac", "is_max_cell")


def write_sweep_csv(path, report: dict) -> None:
    max_keys = {(c.eps, c.magnitude, c.direction, c.control)
                for c in report["max_rows"]}
    rows = []
    for c in report["cells"]:
        e = c.estimate
        rows.append((report["regime"], c.eps, c.magnitude, c.direction,
                     c.control, e.p_hat, e.stderr, e.n, e.flagged_frac,
                     (c.eps, c.magnitude, c.direction, c.control) in max_keys))
    write_csv(path, SWEEP_HEADER, rows)


def write_exit_csv(path, report) -> None:
    rows = [(i, tau, bool(cen))
            for i, (tau, cen) in enumerate(zip(report.taus, report.censored))]
    write_csv(path, ("replicate", "tau", "censored"), rows)


def write_control_csv(path, control) -> None:
    """Control field dump with the trajectory column layout."""
    write_trajectory_csv(path, control.times, control.values)
