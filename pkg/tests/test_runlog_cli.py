"""Run log serialization, replay, and CLI surface tests.

Uses deliberately tiny runs (coarse metric grid, short horizon, large
epsilon) so each CLI invocation stays fast.
"""

import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from sagexp.cli import cmd_export, cmd_run, cmd_sweep, load_config, main, validate_config
from sagexp.errors import ConfigError
from sagexp.harness import execute_run
from sagexp.runlog import (
    config_hash,
    read_log,
    replay_metrics_from,
    strip_perf,
    write_log,
)


def tiny_config(tmp_path, variant="SageMPC_Goal", seed=0):
    return {
        "environment": {
            "kind": "gp", "family": "se", "lengthscale": [0.6, 0.6],
            "seed": 2, "domain_box": [[0.0, 2.0], [0.0, 2.0]],
            "fine_dims": 61, "coarse_dims": 16, "q_target": 0.85,
            "goal": "random", "goal_min_dist": 0.5,
        },
        "dynamics": {
            "kind": "unicycle",
            "state_box": [[0, 2], [0, 2], [-2, 2], [-12.6, 12.6], [-4, 4]],
            "input_box": [[-6, 6], [-16, 16]],
        },
        "explore": {
            "variant": variant, "epsilon": 0.6, "T": 1.5, "H": 12,
            "seed": seed, "noise_std": 1e-4, "metrics_dims": 15,
            "snapshot_every": 2, "max_rounds": 12, "scan_cap": 24,
        },
        "output": {"dir": str(tmp_path)},
    }


@pytest.fixture(scope="module")
def run_records(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("runlog")
    config = tiny_config(tmp)
    result, records = execute_run(config)
    return config, result, records


class TestConfig:
    def test_unknown_keys_rejected(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cfg["explore"]["bogus_knob"] = 1
        with pytest.raises(ConfigError) as exc:
            validate_config(cfg)
        assert "bogus_knob" in str(exc.value)

    def test_missing_field_named(self, tmp_path):
        cfg = tiny_config(tmp_path)
        del cfg["explore"]["epsilon"]
        with pytest.raises(ConfigError) as exc:
            validate_config(cfg)
        assert "epsilon" in str(exc.value)

    def test_nonpositive_rejected(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cfg["explore"]["T"] = -1.0
        with pytest.raises(ConfigError):
            validate_config(cfg)

    def test_hash_changes_only_with_semantics(self, tmp_path):
        a = tiny_config(tmp_path)
        b = tiny_config(tmp_path)
        assert config_hash(a) == config_hash(b)
        b["explore"]["epsilon"] = 0.61
        assert config_hash(a) != config_hash(b)

    def test_missing_config_file_is_exit_1(self, tmp_path, capsys):
        assert cmd_run(str(tmp_path / "nope.json")) == 1
        assert "config" in capsys.readouterr().err


class TestLogRoundTrip:
    def test_write_read_identity(self, run_records, tmp_path):
        _, _, records = run_records
        path = tmp_path / "log.jsonl"
        write_log(path, records)
        back = read_log(path)
        assert back == json.loads(json.dumps(records))

    def test_replay_reproduces_metrics_bit_identically(self, run_records):
        _, _, records = run_records
        logged = next(r for r in records if r["kind"] == "metrics")
        replayed = replay_metrics_from(records)
        logged = {k: v for k, v in logged.items() if k != "kind"}
        assert json.dumps(logged, sort_keys=True) == json.dumps(replayed, sort_keys=True)

    def test_round_count_matches_result(self, run_records):
        _, result, records = run_records
        rounds = [r for r in records if r["kind"] == "round"]
        assert len(rounds) == len(result.rounds)

    def test_snapshot_cadence(self, run_records):
        config, result, records = run_records
        snaps = [r for r in records if r["kind"] == "snapshot"]
        every = config["explore"]["snapshot_every"]
        expected = {r.n for r in result.rounds if r.n % every == 0}
        assert {s["n"] for s in snaps} == expected


class TestCli:
    def test_cmd_run_writes_log_and_exits_zero(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        code = cmd_run(str(path))
        out = capsys.readouterr().out
        assert code == 0, out
        logs = list(tmp_path.glob("run_*.jsonl"))
        assert len(logs) == 1

    def test_determinism_same_seed_same_log(self, tmp_path):
        cfg = tiny_config(tmp_path)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert cmd_run(str(p), out=str(tmp_path / "a")) == 0
        assert cmd_run(str(p), out=str(tmp_path / "b")) == 0
        name = "run_SageMPC_Goal_0.jsonl"
        a = strip_perf(read_log(tmp_path / "a" / name))
        b = strip_perf(read_log(tmp_path / "b" / name))
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_sweep_matrix_and_csv(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        cfg["sweep"] = {"env_seeds": [2, 4], "noise_seeds": [0, 1],
                        "variants": ["SageMPC_Goal"]}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        code = cmd_sweep(str(p), out=str(tmp_path / "sweep"))
        assert code in (0, 2)
        logs = list((tmp_path / "sweep").glob("run_*.jsonl"))
        assert len(logs) == 4
        with open(tmp_path / "sweep" / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert list(rows[0]) == ["seed", "variant", "n_prime", "n_star",
                                 "time", "violations", "final_avr"]

    def test_sweep_repeat_identical_csv(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cfg["sweep"] = {"env_seeds": [2], "noise_seeds": [0, 1],
                        "variants": ["SageMPC_Goal"]}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        cmd_sweep(str(p), out=str(tmp_path / "s1"))
        cmd_sweep(str(p), out=str(tmp_path / "s2"))
        assert ((tmp_path / "s1" / "summary.csv").read_bytes()
                == (tmp_path / "s2" / "summary.csv").read_bytes())

    def test_export_metrics_schema(self, run_records, tmp_path, capsys):
        _, _, records = run_records
        path = tmp_path / "log.jsonl"
        write_log(path, records)
        assert cmd_export(str(path), "metrics") == 0
        payload = json.loads(capsys.readouterr().out)
        for key in ("n_prime", "physical_time", "violation_count",
                    "complexity", "avr"):
            assert key in payload
        assert "n_star" in payload["complexity"]

    def test_export_sets_round_trips_masks(self, run_records, tmp_path, capsys):
        result = run_records[1]
        records = run_records[2]
        path = tmp_path / "log.jsonl"
        write_log(path, records)
        assert cmd_export(str(path), "sets") == 0
        payload = json.loads(capsys.readouterr().out)
        snaps = {n: raster for n, raster in result.snapshots}
        assert len(payload) == len(snaps)
        for entry in payload:
            raster = snaps[entry["n"]]
            got = np.array(entry["masks"]["pessimistic"], dtype=bool)
            assert np.array_equal(got, raster.pessimistic)

    def test_export_trajectory_knot_count(self, run_records, tmp_path, capsys):
        result = run_records[1]
        records = run_records[2]
        path = tmp_path / "log.jsonl"
        write_log(path, records)
        assert cmd_export(str(path), "trajectory") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        expected = sum(r.knots.shape[0] for r in result.rounds)
        assert len(lines) - 1 == expected  # header row

    def test_main_entry_parses(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        code = main(["run", "--config", str(p), "--out", str(tmp_path / "m")])
        assert code == 0


class TestAdversarialGroundTruth:
    def test_unsafe_flip_fails_with_exit_2(self, tmp_path, capsys):
        # Craft an environment whose field is safe at the start but turns
        # sharply negative right where the optimistic goal pulls the first
        # trajectory; the prior cannot know, so the run must detect the
        # violation and fail.
        from sagexp.harness import Environment, generate_env

        cfg = tiny_config(tmp_path)
        env = generate_env("se", (0.6, 0.6), 2, [[0, 2], [0, 2]], fine_dims=61,
                           coarse_dims=16, q_target=0.85, goal="random")
        config = dict(cfg)
        result, records = execute_run(config, env=env)
        assert result.status == "terminated"
        # place the trap on a visited knot well away from the start
        knots = np.vstack([r.knots[:, :2] for r in result.rounds if r.knots.size])
        dist = np.linalg.norm(knots - env.start, axis=1)
        trap_pos = knots[int(np.argmax(dist))]
        assert np.linalg.norm(trap_pos - env.start) > 0.25
        vals = env.values.copy()
        xs = np.linspace(0, 2, 61)
        ys = np.linspace(0, 2, 61)
        XX, YY = np.meshgrid(xs, ys)
        d2 = (XX - trap_pos[0]) ** 2 + (YY - trap_pos[1]) ** 2
        vals -= 3.0 * np.exp(-0.5 * d2 / 0.05**2)
        trapped = Environment(kernel=env.kernel, seed=env.seed,
                              domain_box=env.domain_box, values=vals,
                              start=env.start, margin=env.margin,
                              goal=env.goal, lipschitz=env.lipschitz)
        env_path = tmp_path / "trap.sgenv"
        trapped.save(env_path)
        cfg2 = tiny_config(tmp_path)
        cfg2["environment"] = {"file": str(env_path)}
        p = tmp_path / "trap.json"
        p.write_text(json.dumps(cfg2))
        code = cmd_run(str(p), out=str(tmp_path / "trap_out"))
        assert code == 2
        log = read_log(next((tmp_path / "trap_out").glob("run_*.jsonl")))
        context = next(r for r in log if r["kind"] == "context")
        assert len(context["violations"]) > 0
