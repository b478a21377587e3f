"""Shared fixtures: the acceptance experiments are expensive closed-loop
runs, built once per session and reused by several criteria."""

import time

import numpy as np
import pytest

from sagexp.algorithms import ExploreConfig, run
from sagexp.dynamics import BICYCLE, UNICYCLE, DynModel
from sagexp.gp import Kernel
from sagexp.harness import crafted_env, generate_env

SWEEP_DOMAIN = [[0.0, 1.8], [0.0, 1.8]]
SWEEP_ENV_SEEDS = list(range(10))
SWEEP_NOISE_SEEDS = list(range(4))
SWEEP_EPSILON = 0.4
EXPLORE_EPSILON = 0.5


def unicycle_dyn():
    return DynModel(
        kind=UNICYCLE,
        state_box=[[0.0, 1.8], [0.0, 1.8], [-2.0, 2.0], [-12.6, 12.6], [-4.0, 4.0]],
        input_box=[[-6.0, 6.0], [-16.0, 16.0]],
    )


def sweep_env(env_seed: int):
    return generate_env("se", (0.55, 0.55), env_seed, SWEEP_DOMAIN,
                        fine_dims=91, coarse_dims=24, q_target=0.75,
                        goal="random", goal_min_dist=0.6)


def sweep_cfg(variant: str, seed: int, epsilon=SWEEP_EPSILON, lipschitz=None,
              max_rounds=80):
    return ExploreConfig(variant=variant, epsilon=epsilon, T=1.5, H=24,
                         seed=seed, noise_std=1e-4, metrics_dims=24,
                         lipschitz=lipschitz, max_rounds=max_rounds,
                         snapshot_every=5)


@pytest.fixture(scope="session")
def sweep_results():
    """The default 40-run matrix: 10 environments x 4 noise instances."""
    dyn = unicycle_dyn()
    out = []
    for es in SWEEP_ENV_SEEDS:
        env = sweep_env(es)
        for ns in SWEEP_NOISE_SEEDS:
            cfg = sweep_cfg("SageMPC_Goal", seed=es * 1000 + ns)
            t0 = time.perf_counter()
            res = run(cfg, env, dyn)
            out.append({"env_seed": es, "noise_seed": ns, "env": env,
                        "cfg": cfg, "result": res,
                        "wall": time.perf_counter() - t0})
    return out


@pytest.fixture(scope="session")
def paired_goal_results(sweep_results):
    """Ten return-to-base goal runs paired with the sweep's noise-0 cells."""
    dyn = unicycle_dyn()
    pairs = []
    for es in SWEEP_ENV_SEEDS:
        mpc = next(c for c in sweep_results
                   if c["env_seed"] == es and c["noise_seed"] == 0)
        cfg = sweep_cfg("SageOC_Goal", seed=es * 1000)
        res = run(cfg, mpc["env"], dyn)
        pairs.append({"env_seed": es, "env": mpc["env"],
                      "mpc": mpc["result"], "oc": res})
    return pairs


@pytest.fixture(scope="session")
def explore_pair_results():
    """Plain vs Lipschitz maximum exploration on ten seeds."""
    dyn = unicycle_dyn()
    out = []
    for es in SWEEP_ENV_SEEDS:
        env = sweep_env(es)
        plain = run(sweep_cfg("SageMPC_MaxExplore", seed=es * 1000,
                              epsilon=EXPLORE_EPSILON), env, dyn)
        lipsch = run(sweep_cfg("SageMPC_Lipschitz", seed=es * 1000,
                               epsilon=EXPLORE_EPSILON, lipschitz="auto"),
                     env, dyn)
        out.append({"env_seed": es, "env": env, "plain": plain,
                    "lipschitz": lipsch})
    return out


CAR_DOMAIN = [[0.0, 12.0], [0.0, 12.0]]
CAR_SCENARIOS = {
    "clutter": dict(
        obstacles=[((4.0, 7.0), 2.4, 1.15), ((8.5, 3.5), 2.4, 1.15),
                   ((9.0, 9.5), 2.2, 1.05)],
        start=(1.2, 1.2), goal=(10.8, 10.8)),
    "large_obstacle": dict(
        obstacles=[((6.5, 6.5), 3.4, 1.3)],
        start=(1.2, 1.2), goal=(10.8, 10.8)),
    "unreachable_goal": dict(
        obstacles=[((8.5, 8.5), 2.8, 1.3)],
        start=(1.2, 1.2), goal=(8.5, 8.5)),
}


def car_dyn():
    return DynModel(
        kind=BICYCLE,
        state_box=[[0.0, 12.0], [0.0, 12.0], [-7.0, 7.0], [-1.2, 3.5]],
        input_box=[[-0.6, 0.6], [-2.5, 2.0]],
    )


def car_env(name: str):
    sc = CAR_SCENARIOS[name]
    kern = Kernel("se", (2.2, 2.2), 0.25)
    return crafted_env(name, CAR_DOMAIN, 0.85, sc["obstacles"],
                       start=sc["start"], goal=sc["goal"], kernel=kern,
                       fine_dims=121)


def car_cfg(seed=7):
    return ExploreConfig(variant="SageMPC_Goal", epsilon=0.3, T=4.0, H=25,
                         seed=seed, noise_std=1e-4, metrics_dims=24,
                         terminal_mode="growing", max_rounds=80,
                         snapshot_every=5)


@pytest.fixture(scope="session")
def car_results():
    dyn = car_dyn()
    out = {}
    for name in CAR_SCENARIOS:
        env = car_env(name)
        t0 = time.perf_counter()
        res = run(car_cfg(), env, dyn)
        out[name] = {"env": env, "result": res,
                     "wall": time.perf_counter() - t0}
    return out
