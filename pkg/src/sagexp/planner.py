"""Goal selection and sampling-problem builders.

Goal problems are argmins over the set rasters restricted to a
grid-graph reachability surrogate; trajectory-level reachability and
returnability stay with the OCP, which enforces them exactly. The
builders map each closed-loop variant onto the discrete-time program.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .dynamics import DynModel, TerminalSet, is_steady, lift_position
from .errors import EmptySet, SpecError
from .gp import GridSpec
from .sets import SetQuery, SetRaster
from .solver import DistSpec, NlpProblem, build_nlp

# closed-loop variants
SAGEOC_MAXEXPLORE = "SageOC_MaxExplore"
SAGEOC_GOAL = "SageOC_Goal"
SAGEMPC_GOAL = "SageMPC_Goal"
SAGEMPC_MAXEXPLORE = "SageMPC_MaxExplore"
SAGEMPC_LIPSCHITZ = "SageMPC_Lipschitz"
VARIANTS = (SAGEOC_MAXEXPLORE, SAGEOC_GOAL, SAGEMPC_GOAL,
            SAGEMPC_MAXEXPLORE, SAGEMPC_LIPSCHITZ)

# sampling-problem kinds
MAX_UNCERTAINTY = "max_uncertainty"
GOAL_SOFT = "goal_soft"
GOAL_HARD = "goal_hard"
EXPANDER = "expander"


@dataclass(frozen=True)
class GoalResult:
    position: np.ndarray
    loss: float
    witness_input: np.ndarray
    round_index: int
    which_set: str  # "optimistic" | "pessimistic"
    cell: tuple


def reach_mask(grid: GridSpec, passable: np.ndarray, start_cells,
               T: float, v_max: float) -> np.ndarray:
    """Cells reachable out-and-back within T through the passable mask.

    8-connected Dijkstra with metric edge lengths; a cell qualifies when
    its shortest path time is at most T/2 (go there and come back).
    """
    passable = np.asarray(passable, dtype=bool)
    ny, nx = passable.shape
    dist = np.full((ny, nx), np.inf)
    heap = []
    for cell in start_cells:
        iy, ix = cell
        if 0 <= iy < ny and 0 <= ix < nx and passable[iy, ix]:
            dist[iy, ix] = 0.0
            heapq.heappush(heap, (0.0, iy, ix))
    sx, sy = grid.spacing
    steps = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    budget = T / 2.0 * v_max
    while heap:
        d, iy, ix = heapq.heappop(heap)
        if d > dist[iy, ix]:
            continue
        if d > budget:
            continue
        for dy, dx in steps:
            jy, jx = iy + dy, ix + dx
            if 0 <= jy < ny and 0 <= jx < nx and passable[jy, jx]:
                step = float(np.hypot(dx * sx, dy * sy))
                nd = d + step
                if nd < dist[jy, jx]:
                    dist[jy, jx] = nd
                    heapq.heappush(heap, (nd, jy, jx))
    return (dist <= budget) & passable


def select_goal(which_set: str, raster: SetRaster, reach: np.ndarray,
                loss_values: np.ndarray, dyn: DynModel, round_index: int,
                steady_tol: float = 1e-8,
                extra_mask: np.ndarray | None = None) -> GoalResult:
    """Deterministic argmin of the loss over steady-liftable cells of
    (set mask intersected with the reachability surrogate)."""
    if which_set == "optimistic":
        mask = raster.eps_optimistic
    elif which_set == "pessimistic":
        mask = raster.pessimistic
    else:
        raise SpecError(f"unknown set kind {which_set!r}")
    mask = mask & reach
    if extra_mask is not None:
        mask = mask & extra_mask
    if not mask.any():
        raise EmptySet(f"no {which_set} cell is reachable")
    centers = raster.grid.centers().reshape(raster.grid.shape + (2,))
    vals = np.where(mask, loss_values.reshape(raster.grid.shape), np.inf)
    flat = int(np.argmin(vals))  # ties: smallest flat index
    iy, ix = np.unravel_index(flat, raster.grid.shape)
    pos = centers[iy, ix]
    lifted = lift_position(dyn, pos)
    witness = is_steady(dyn, lifted, tol=steady_tol)
    if witness is None:
        raise EmptySet("selected cell is not steady-liftable")
    return GoalResult(position=np.asarray(pos, dtype=float), loss=float(vals[iy, ix]),
                      witness_input=witness, round_index=round_index,
                      which_set=which_set, cell=(int(iy), int(ix)))


@dataclass
class SamplingContext:
    """Everything the builders need for one round."""

    dyn: DynModel
    query: SetQuery  # bounds + epsilon + domain (+ optional Lipschitz)
    terminal: TerminalSet
    x_current: np.ndarray
    goal: np.ndarray
    dist: DistSpec
    H: int
    T: float
    lam: float
    anchors: np.ndarray | None = None  # Lipschitz certificates
    safety_margin: float = 0.0  # conservative shading of the stage bound
    return_anchor: np.ndarray | None = None  # seed position for the return leg


def build_sampling_problem(kind: str, ctx: SamplingContext,
                           soft: bool | None = None,
                           width_guard: float = 0.0) -> NlpProblem:
    """Map a sampling-problem kind onto the discrete-time program.

    max_uncertainty: hard width, goal is the max-width cell (provided by
    the caller through ctx.goal). goal_soft: slack-softened width from the
    current state. goal_hard: hard width, starting inside the terminal
    set. expander: the enlarged stage bound plus the boundary cap at the
    sampling knot (soft by default, hard in the fallback re-solve).
    Hard problems get the width threshold padded by width_guard so a
    converged solution clears epsilon even after solver tolerance.
    """
    cb = ctx.query.bounds
    expander_cap = False
    # the OCP rows use the smooth raw bound (a sound under-approximation
    # of the monotone envelope); run-time gates keep the envelope
    if kind in (MAX_UNCERTAINTY, GOAL_HARD):
        is_soft = False
        base_safety = cb.lower_raw_vg
    elif kind == GOAL_SOFT:
        is_soft = True
        base_safety = cb.lower_raw_vg
    elif kind == EXPANDER:
        is_soft = True
        expander_cap = True
        if ctx.query.lipschitz is None:
            raise SpecError("expander variant needs a Lipschitz constant")
        from .sets import lipschitz_lower_vg

        anchors = ctx.anchors if ctx.anchors is not None else np.zeros((0, 2))

        def base_safety(pos, _q=ctx.query, _a=anchors):
            return lipschitz_lower_vg(_q, pos, _a)
    else:
        raise SpecError(f"unknown sampling problem kind {kind!r}")
    if soft is not None:
        is_soft = soft
    margin = float(ctx.safety_margin)
    if margin > 0.0:
        def safety(pos, _f=base_safety, _m=margin):
            v, g = _f(pos)
            return v - _m, g
    else:
        safety = base_safety
    eps_eff = ctx.query.epsilon + (0.0 if is_soft else width_guard)
    return build_nlp(
        ctx.dyn, ctx.H, ctx.T, ctx.lam, eps_eff, ctx.x_current,
        ctx.goal, ctx.dist, safety, cb.width_vg, ctx.terminal,
        soft_width=is_soft, expander_cap=expander_cap,
        terminal_safety_vg=cb.lower_raw_vg, cap_vg=cb.lower_raw_vg,
        return_anchor=ctx.return_anchor)


def width_argmax_goal(raster: SetRaster, reach: np.ndarray, dyn: DynModel,
                      round_index: int, over: str = "eps_optimistic") -> GoalResult:
    """Max-width cell over the reachable part of the chosen mask."""
    base = raster.eps_optimistic if over == "eps_optimistic" else raster.pessimistic
    mask = base & reach
    if not mask.any():
        raise EmptySet("no reachable cell for width argmax")
    width = raster.width
    vals = np.where(mask, -width, np.inf)
    flat = int(np.argmin(vals))
    iy, ix = np.unravel_index(flat, raster.grid.shape)
    centers = raster.grid.centers().reshape(raster.grid.shape + (2,))
    pos = centers[iy, ix]
    lifted = lift_position(dyn, pos)
    witness = is_steady(dyn, lifted, tol=1e-8)
    return GoalResult(position=np.asarray(pos, dtype=float),
                      loss=float(-vals[iy, ix]), witness_input=witness,
                      round_index=round_index, which_set=over, cell=(int(iy), int(ix)))


def exploration_finished(raster: SetRaster, reach: np.ndarray, epsilon: float,
                         mask: np.ndarray | None = None) -> bool:
    """Grid-level termination check: no reachable pessimistic (or given)
    cell still carries width >= epsilon."""
    base = raster.pessimistic if mask is None else mask
    cells = base & reach
    if not cells.any():
        return True
    return bool(np.all(raster.width[cells] < epsilon))
