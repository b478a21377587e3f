"""Command-line entry points: run, sweep, export.

Exit codes: 0 terminated cleanly, 1 configuration error, 2 failed run
(safety violation or solver breakdown).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from multiprocessing import get_context

import numpy as np

from .errors import ConfigError, SagexpError
from .harness import execute_run
from .runlog import read_log, replay_metrics_from, write_log
from .sets import rle_decode

_SCHEMA = {
    "environment": {"file", "kind", "family", "lengthscale", "seed", "domain_box",
                    "fine_dims", "coarse_dims", "q_target", "margin", "goal",
                    "goal_min_dist", "signal_variance", "archetype", "base_level",
                    "obstacles", "start"},
    "dynamics": {"kind", "state_box", "input_box", "params"},
    "explore": {"variant", "epsilon", "T", "H", "seed", "lam", "dist_kind",
                "terminal_mode", "terminal_margin", "lipschitz", "sqrt_beta",
                "noise_std", "metrics_dims", "snapshot_every", "max_rounds",
                "v_max", "safety_margin", "scan_cap"},
    "output": {"dir"},
    "sweep": {"env_seeds", "noise_seeds", "variants", "jobs"},
}

SUMMARY_COLUMNS = ["seed", "variant", "n_prime", "n_star", "time",
                   "violations", "final_avr"]


def validate_config(config: dict) -> dict:
    if not isinstance(config, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(config) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for section in ("environment", "dynamics", "explore"):
        if section not in config:
            raise ConfigError(f"missing config section {section!r}")
        extra = set(config[section]) - _SCHEMA[section]
        if extra:
            raise ConfigError(f"unknown keys in {section}: {sorted(extra)}")
    for section in ("output", "sweep"):
        if section in config:
            extra = set(config[section]) - _SCHEMA[section]
            if extra:
                raise ConfigError(f"unknown keys in {section}: {sorted(extra)}")
    e = config["explore"]
    for key in ("epsilon", "T", "H"):
        if key not in e:
            raise ConfigError(f"explore.{key} is required")
        if float(e[key]) <= 0:
            raise ConfigError(f"explore.{key} must be positive")
    if "variant" not in e:
        raise ConfigError("explore.variant is required")
    d = config["dynamics"]
    for key in ("kind", "state_box", "input_box"):
        if key not in d:
            raise ConfigError(f"dynamics.{key} is required")
    sbox = np.asarray(d["state_box"], dtype=float)
    ibox = np.asarray(d["input_box"], dtype=float)
    if np.any(sbox[:, 0] >= sbox[:, 1]) or np.any(ibox[:, 0] >= ibox[:, 1]):
        raise ConfigError("boxes must satisfy lo < hi per dimension")
    return config


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return validate_config(json.load(fh))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")


def _summary_row(records) -> dict:
    metrics = next(r for r in records if r["kind"] == "metrics")
    header = next(r for r in records if r["kind"] == "header")
    avr = metrics.get("avr") or []
    return {
        "seed": header["seed"],
        "variant": header["variant"],
        "n_prime": metrics["n_prime"],
        "n_star": metrics.get("complexity", {}).get("n_star", ""),
        "time": metrics["physical_time"],
        "violations": metrics["violation_count"],
        "final_avr": avr[0][1] if avr else "",
    }


def _log_name(variant: str, seed: int) -> str:
    return f"run_{variant}_{seed}.jsonl"


def cmd_run(config_path: str, seed=None, variant=None, out=None,
            snapshot_every=None) -> int:
    try:
        config = load_config(config_path)
        if seed is not None:
            config["explore"]["seed"] = int(seed)
        if variant is not None:
            config["explore"]["variant"] = variant
        if snapshot_every is not None:
            config["explore"]["snapshot_every"] = int(snapshot_every)
        out_dir = out or config.get("output", {}).get("dir", ".")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        result, records = execute_run(config)
    except SagexpError as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, _log_name(config["explore"]["variant"],
                                               config["explore"].get("seed", 0)))
    write_log(log_path, records)
    row = _summary_row(records)
    print(",".join(str(row[c]) for c in SUMMARY_COLUMNS))
    if result.status != "terminated":
        print(f"run failed: {result.failure}", file=sys.stderr)
        return 2
    return 0


def _sweep_cell(args):
    config_json, env_seed, noise_seed, variant = args
    config = json.loads(config_json)
    config["environment"]["seed"] = env_seed
    config["explore"]["seed"] = env_seed * 1000 + noise_seed
    config["explore"]["variant"] = variant
    try:
        result, records = execute_run(config)
        return (env_seed, noise_seed, variant, records, result.status, None)
    except SagexpError as exc:
        return (env_seed, noise_seed, variant, None, "error", str(exc))


def cmd_sweep(config_path: str, out=None, jobs=None) -> int:
    try:
        config = load_config(config_path)
        sweep = config.get("sweep")
        if not sweep:
            raise ConfigError("config has no sweep section")
        out_dir = out or config.get("output", {}).get("dir", ".")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    env_seeds = list(sweep.get("env_seeds", [0]))
    noise_seeds = list(sweep.get("noise_seeds", [0]))
    variants = list(sweep.get("variants", [config["explore"]["variant"]]))
    jobs = int(jobs or sweep.get("jobs", 1))
    cells = [(json.dumps(config), es, ns, v)
             for es in env_seeds for ns in noise_seeds for v in variants]
    if jobs > 1:
        with get_context("spawn").Pool(jobs) as pool:
            outcomes = pool.map(_sweep_cell, cells)
    else:
        outcomes = [_sweep_cell(c) for c in cells]
    outcomes.sort(key=lambda t: (t[0], t[1], t[2]))
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    all_ok = True
    for env_seed, noise_seed, variant, records, status, error in outcomes:
        if records is None:
            all_ok = False
            print(f"cell env={env_seed} noise={noise_seed} {variant}: {error}",
                  file=sys.stderr)
            continue
        seed = env_seed * 1000 + noise_seed
        write_log(os.path.join(out_dir, _log_name(variant, seed)), records)
        rows.append(_summary_row(records))
        if status != "terminated":
            all_ok = False
    csv_path = os.path.join(out_dir, "summary.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(csv_path)
    return 0 if all_ok else 2


def cmd_export(runlog_path: str, what: str) -> int:
    try:
        records = read_log(runlog_path)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 1
    if what == "metrics":
        metrics = replay_metrics_from(records)
        json.dump(metrics, sys.stdout, sort_keys=True)
        sys.stdout.write("\n")
        return 0
    if what == "trajectory":
        writer = csv.writer(sys.stdout)
        writer.writerow(["round", "k", "t"]
                        + [f"x{i}" for i in range(_state_dim(records))]
                        + ["dt"])
        for rec in records:
            if rec.get("kind") != "round":
                continue
            t = rec["t_start"]
            dts = rec["dts"]
            for k, knot in enumerate(rec["knots"]):
                dt = dts[k - 1] if 0 < k <= len(dts) else 0.0
                t += dt
                writer.writerow([rec["n"], k, f"{t:.9f}"]
                                + [repr(v) for v in knot]
                                + [repr(dts[k]) if k < len(dts) else ""])
        return 0
    if what == "sets":
        out = []
        for rec in records:
            if rec.get("kind") != "snapshot":
                continue
            dims = rec["grid"]["dims"]
            shape = (dims[1], dims[0])
            masks = {name: rle_decode(rle, shape).astype(int).tolist()
                     for name, rle in rec["masks"].items()}
            out.append({"n": rec["n"], "grid": rec["grid"], "masks": masks})
        json.dump(out, sys.stdout, sort_keys=True)
        sys.stdout.write("\n")
        return 0
    print(f"unknown export target {what!r}", file=sys.stderr)
    return 1


def _state_dim(records) -> int:
    for rec in records:
        if rec.get("kind") == "round" and rec["knots"]:
            return len(rec["knots"][0])
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sagexp",
        description="Safe guaranteed exploration runs, sweeps, and exports.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one exploration run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--variant")
    p_run.add_argument("--out")
    p_run.add_argument("--snapshot-every", type=int, dest="snapshot_every")

    p_sweep = sub.add_parser("sweep", help="seeds x variants matrix")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out")
    p_sweep.add_argument("--jobs", type=int)

    p_export = sub.add_parser("export", help="dump log contents")
    p_export.add_argument("--in", dest="runlog", required=True)
    p_export.add_argument("--what", required=True,
                          choices=["trajectory", "sets", "metrics"])

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, seed=args.seed, variant=args.variant,
                       out=args.out, snapshot_every=args.snapshot_every)
    if args.command == "sweep":
        return cmd_sweep(args.config, out=args.out, jobs=args.jobs)
    if args.command == "export":
        return cmd_export(args.runlog, args.what)
    return 1


if __name__ == "__main__":
    sys.exit(main())
