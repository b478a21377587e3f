"""Line-delimited run log: schemas, writer/reader, and metric replay.

One JSON record per line, typed by a `kind` field. Round records carry
everything the metrics need, so a log replays to the same Metrics without
re-running the solver; wall-clock timings live in a separate `perf`
record excluded from determinism guarantees.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import ConfigError
from .harness import avr_curve, explored_fraction, sample_complexity_report
from .gp import Kernel
from .sets import rle_encode

LOG_SCHEMA = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def _round_record(rec) -> dict:
    out = {
        "kind": "round",
        "n": rec.n,
        "branch": rec.branch,
        "t_start": rec.t_start,
        "t_end": rec.t_end,
        "knots": np.asarray(rec.knots).tolist(),
        "inputs": np.asarray(rec.inputs).tolist(),
        "dts": np.asarray(rec.dts).tolist(),
        "nu": rec.nu,
        "min_plan_lower": (None if rec.min_plan_lower == float("inf")
                           else rec.min_plan_lower),
        "pess_area": rec.pess_area,
        "lip_area": rec.lip_area,
        "explored_cells": rec.explored_cells,
        "goal_opt": rec.goal_opt,
        "goal_pess": rec.goal_pess,
        "solver": {k: v for k, v in rec.solver.items() if k != "wall_ms"},
    }
    if rec.sample_position is not None:
        out["sample"] = {
            "position": np.asarray(rec.sample_position).tolist(),
            "value": rec.sample_value,
            "width": rec.width_at_sample,
        }
    else:
        out["sample"] = None
    return out


def _snapshot_record(n, raster) -> dict:
    g = raster.grid
    return {
        "kind": "snapshot",
        "n": n,
        "grid": {"origin": list(g.origin), "spacing": list(g.spacing),
                 "dims": list(g.dims)},
        "masks": {
            "pessimistic": rle_encode(raster.pessimistic),
            "optimistic": rle_encode(raster.optimistic),
            "eps_optimistic": rle_encode(raster.eps_optimistic),
            "lipschitz_pessimistic": rle_encode(raster.lipschitz_pessimistic),
            "expander": rle_encode(raster.expander),
        },
    }


def build_records(result, config: dict, env_header: dict,
                  context: dict) -> list[dict]:
    """Serialize one run into its full record stream.

    `context` carries the replay-closure data the metrics need but the
    rounds do not contain: true reachable cell count, the regret
    reference, sample complexity inputs.
    """
    records = [{
        "kind": "header",
        "schema": LOG_SCHEMA,
        "config": config,
        "config_hash": config_hash(config),
        "seed": result.seed,
        "variant": result.variant,
        "env": env_header,
    }]
    wall = []
    for rec in result.rounds:
        records.append(_round_record(rec))
        if rec.solver:
            wall.append(rec.solver.get("wall_ms", 0.0))
    for n, raster in result.snapshots:
        records.append(_snapshot_record(n, raster))
    records.append({
        "kind": "context",
        "status": result.status,
        "failure": result.failure,
        "n_prime": result.n_prime,
        "physical_time": result.physical_time,
        "violations": [[t, list(p), q] for t, p, q in result.violations],
        "final_position": (None if result.final_state is None
                           else np.asarray(result.final_state[:2]).tolist()),
        "widths_at_samples": [float(w) for w in result.widths_at_samples],
        "prior_vars_at_samples": [float(v) for v in result.prior_vars_at_samples],
        "avr_reference": result.avr_reference,
        **context,
    })
    records.append({"kind": "metrics", **replay_metrics_from(records)})
    records.append({"kind": "perf", "solver_wall_ms": wall})
    return records


def replay_metrics_from(records: list[dict]) -> dict:
    """Recompute the Metrics payload from the record stream alone."""
    header = next(r for r in records if r["kind"] == "header")
    context = next(r for r in records if r["kind"] == "context")
    rounds = [r for r in records if r["kind"] == "round"]
    true_cells = context.get("true_reach_cells", 0)
    explored = []
    for r in rounds:
        frac = explored_fraction(float(r["explored_cells"]), float(true_cells))
        explored.append([r["n"], r["t_end"], frac])
    goal = header["env"].get("goal")
    avr = []
    if goal is not None and context.get("avr_reference") is not None:
        ref = float(context["avr_reference"])
        times, gaps = [], []
        for r in rounds:
            t = r["t_start"]
            for knot, dt in zip(r["knots"], [0.0] + r["dts"]):
                t += dt
                pos = np.asarray(knot[:2])
                rho = float(np.sum((pos - np.asarray(goal)) ** 2))
                times.append(t)
                gaps.append(rho - ref)
        if times:
            avr = [[tau, v] for tau, v in avr_curve(
                times, gaps, context["physical_time"])]
    complexity = {}
    if context.get("complexity_inputs"):
        from .gp import GridSpec

        ci = context["complexity_inputs"]
        kern = Kernel(ci["family"], tuple(ci["lengthscale"]), ci["signal_variance"])
        g = ci["grid"]
        pts = GridSpec(origin=tuple(g["origin"]), spacing=tuple(g["spacing"]),
                       dims=tuple(g["dims"])).centers()
        complexity = sample_complexity_report(
            context["n_prime"], ci["sqrt_beta"], ci["epsilon"], ci["noise_std"],
            kern, pts, context["widths_at_samples"],
            context["prior_vars_at_samples"], scan_cap=ci.get("scan_cap"))
    return {
        "status": context["status"],
        "failure": context["failure"],
        "n_prime": context["n_prime"],
        "physical_time": context["physical_time"],
        "violation_count": len(context["violations"]),
        "final_position": context["final_position"],
        "explored": explored,
        "avr": avr,
        "avr_reference": context.get("avr_reference"),
        "complexity": complexity,
    }


def write_log(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(canonical_json(rec))
            fh.write("\n")


def read_log(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records or records[0].get("kind") != "header":
        raise ConfigError(f"{path} is not a run log (missing header)")
    if records[0].get("schema") != LOG_SCHEMA:
        raise ConfigError(f"unsupported log schema {records[0].get('schema')}")
    return records


def strip_perf(records: list[dict]) -> list[dict]:
    return [r for r in records if r.get("kind") != "perf"]
