"""Closed-loop exploration algorithms.

Three loops share the same round machinery: the return-to-base explorer
(plan from the terminal set, sample, come back), the goal-directed
variant (terminate as soon as the pessimistic goal beats the optimistic
one), and the receding-horizon loop that replans from the current state
each round, keeping the slack-softened sampling problem and the
return-along-previous-plan fallback.

The plant replays planned knots exactly (model equals plant); the
measurement is taken at the sampling knot. All randomness flows from one
seeded generator, so a fixed seed reproduces the run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import BICYCLE, UNICYCLE, DynModel, TerminalSet, is_steady, lift_position
from .errors import EmptySet, SolverBreakdown, SpecError, UnsafeStart
from .gp import BetaSchedule, Bump, ConfBounds, GpModel, GridSpec, PriorMean
from .planner import (
    EXPANDER,
    GOAL_HARD,
    GOAL_SOFT,
    MAX_UNCERTAINTY,
    SAGEMPC_GOAL,
    SAGEMPC_LIPSCHITZ,
    SAGEMPC_MAXEXPLORE,
    SAGEOC_GOAL,
    SAGEOC_MAXEXPLORE,
    VARIANTS,
    SamplingContext,
    build_sampling_problem,
    exploration_finished,
    reach_mask,
    select_goal,
    width_argmax_goal,
)
from .sets import SetQuery, rasterize
from .solver import DistSpec, SolverSettings, cold_start, shift_candidate, sqp_solve
from .errors import DomainError


@dataclass
class ExploreConfig:
    """One closed-loop run's knobs."""

    variant: str
    epsilon: float
    T: float
    H: int
    seed: int = 0
    lam: float = 1e3
    dist_kind: str = "euclid"
    terminal_mode: str = "fixed"
    terminal_margin: float | None = None  # growing mode; defaults to epsilon
    lipschitz: object = None  # None | float | "auto"
    sqrt_beta: float = 3.0
    noise_std: float = 1e-4
    metrics_dims: object = 30  # int or (nx, ny)
    snapshot_every: int = 5
    max_rounds: int = 300
    width_guard: float = 2e-5
    sample_width_tol: float = 1e-6
    solver_max_iter: int = 20
    cold_max_iter: int = 30
    v_max: float | None = None
    bump_radius_scale: float = 0.6
    safety_margin: float | None = None  # planned l >= margin; default 2% of sqrt(sv)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise SpecError(f"unknown variant {self.variant!r}")
        if self.epsilon <= 0 or self.T <= 0:
            raise DomainError("epsilon and T must be positive")
        if self.H < 2:
            raise DomainError("H must be at least 2")


@dataclass
class RoundRecord:
    n: int
    branch: str  # "sample" | "fallback" | "terminate"
    t_start: float
    t_end: float
    knots: np.ndarray  # executed states (k, p)
    inputs: np.ndarray
    dts: np.ndarray
    sample_position: np.ndarray | None = None
    sample_value: float | None = None
    nu: float = 0.0
    width_at_sample: float | None = None
    goal_opt: dict | None = None
    goal_pess: dict | None = None
    solver: dict = field(default_factory=dict)
    min_plan_lower: float = math.inf  # envelope lower bound over knots
    pess_area: float = 0.0
    lip_area: float = 0.0
    explored_cells: int = 0


@dataclass
class RunResult:
    status: str  # "terminated" | "failed"
    failure: str | None
    variant: str
    seed: int
    rounds: list
    snapshots: list  # (n, raster)
    samples: list  # (position, value)
    violations: list  # (time, position, q_value)
    n_prime: int
    physical_time: float
    final_state: np.ndarray | None
    widths_at_samples: list
    prior_vars_at_samples: list
    avr_reference: float | None = None
    final_raster: object = None
    envelope_breaches: int = 0
    chain_breaches: int = 0

    @property
    def terminated(self) -> bool:
        return self.status == "terminated"


def default_v_max(dyn: DynModel) -> float:
    idx = 2 if dyn.kind == UNICYCLE else 3
    return float(dyn.state_box[idx, 1])


class _Loop:
    """Shared state and helpers for the three algorithms."""

    def __init__(self, cfg: ExploreConfig, env, dyn: DynModel):
        self.cfg = cfg
        self.env = env
        self.dyn = dyn
        self.rng = np.random.default_rng(cfg.seed)
        md = cfg.metrics_dims
        dims = (md, md) if isinstance(md, int) else (int(md[0]), int(md[1]))
        self.grid = GridSpec.cover(env.domain_box, dims)
        sv = env.kernel.signal_variance
        ls = float(np.mean(env.kernel.ls))
        margin_needed = (cfg.terminal_margin if cfg.terminal_margin is not None
                         else cfg.epsilon) if cfg.terminal_mode == "growing" else 0.0
        # the known-safe seed: the environment publishes a safe start with
        # clearance, and the prior encodes it as a mean bump there
        l0_target = min(max(margin_needed + 0.05 * math.sqrt(sv),
                            0.25 * env.margin),
                        0.9 * env.q(env.start))
        height = cfg.sqrt_beta * math.sqrt(sv) + l0_target
        prior = PriorMean(0.0, (Bump(tuple(env.start), height,
                                     cfg.bump_radius_scale * ls),))
        self.model = GpModel(env.kernel, prior, cfg.noise_std)
        self.cb = ConfBounds(BetaSchedule(mode="fixed", sqrt_beta=cfg.sqrt_beta),
                             self.grid)
        self.cb.advance(self.model)
        if self.cb.bounds(env.start)[0] < 0:
            raise UnsafeStart("round-0 lower bound negative at the start position")
        if cfg.terminal_mode == "growing":
            need = cfg.terminal_margin if cfg.terminal_margin is not None else cfg.epsilon
            if self.cb.bounds(env.start)[0] < need and not np.any(self.cb.grid_l >= need):
                raise UnsafeStart(
                    "tightened pessimistic set empty at round 0: the start "
                    f"clearance {env.q(env.start):.3f} cannot support the "
                    f"terminal margin {need:.3f}")
        self.lipschitz = None
        if cfg.lipschitz == "auto":
            self.lipschitz = float(env.lipschitz)
        elif cfg.lipschitz is not None:
            self.lipschitz = float(cfg.lipschitz)
        self.x_s = lift_position(dyn, env.start)
        margin = cfg.terminal_margin if cfg.terminal_margin is not None else cfg.epsilon
        if cfg.terminal_mode == "fixed":
            self.terminal = TerminalSet(mode="fixed", x_s=self.x_s)
        else:
            self.terminal = TerminalSet(mode="growing", margin=margin)
        self.dist = DistSpec(kind=cfg.dist_kind)
        self.v_max = cfg.v_max if cfg.v_max is not None else default_v_max(dyn)
        self.safety_margin = (cfg.safety_margin if cfg.safety_margin is not None
                              else 0.02 * math.sqrt(sv))
        self.t = 0.0
        self.rounds: list[RoundRecord] = []
        self.snapshots: list = []
        self.samples: list = []
        self.violations: list = []
        self.widths: list = []
        self.pvars: list = []
        self.x_cur = self.x_s.copy()
        self.tail = None  # (knots, inputs, dts) from the sampling knot on
        self.prev_solution = None
        self.prev_hard = None  # warm start for the fallback hard solves
        self.failure = None
        self._prev_grid_l = None
        self._prev_grid_u = None
        self.envelope_breaches = 0
        self.chain_breaches = 0
        if env.goal is not None:
            centers = self.grid.centers()
            self.rho_cells = np.sum((centers - env.goal) ** 2, axis=1)
        else:
            self.rho_cells = None

    # -- per-round primitives -------------------------------------------

    def rho(self, pos) -> float:
        return float(np.sum((np.asarray(pos, dtype=float) - self.env.goal) ** 2))

    def query(self) -> SetQuery:
        return SetQuery(bounds=self.cb, epsilon=self.cfg.epsilon,
                        domain_box=self.env.domain_box, lipschitz=self.lipschitz)

    def raster(self):
        return rasterize(self.query(), self.grid,
                         samples=[p for p, _ in self.samples])

    def start_cells(self, raster):
        if self.cfg.terminal_mode == "fixed":
            return [self.grid.cell_of(self.env.start)]
        margin = self.terminal.margin
        cells = np.argwhere(raster.lower >= margin)
        if cells.size == 0:
            cells = np.array([self.grid.cell_of(self.env.start)])
        return [tuple(c) for c in cells]

    def masks(self, raster):
        starts = self.start_cells(raster)
        pess_pass = (raster.lipschitz_pessimistic
                     if self.cfg.variant == SAGEMPC_LIPSCHITZ else raster.pessimistic)
        reach_p = reach_mask(self.grid, pess_pass, starts, self.cfg.T, self.v_max)
        reach_o = reach_mask(self.grid, raster.eps_optimistic, starts,
                             self.cfg.T, self.v_max)
        return reach_p, reach_o

    def ctx(self, goal, x_current) -> SamplingContext:
        return SamplingContext(
            dyn=self.dyn, query=self.query(), terminal=self.terminal,
            x_current=np.asarray(x_current, dtype=float), goal=np.asarray(goal, dtype=float),
            dist=self.dist, H=self.cfg.H, T=self.cfg.T, lam=self.cfg.lam,
            anchors=np.array([p for p, _ in self.samples]).reshape(-1, 2),
            safety_margin=self.safety_margin,
            return_anchor=self.nearest_terminal_anchor(x_current))

    def nearest_terminal_anchor(self, x_current):
        """Closest certified return position, seeding the return leg."""
        if self.cfg.terminal_mode != "growing":
            return None
        margin = self.terminal.margin
        ok = self.cb.grid_l >= margin
        if not ok.any():
            return None
        centers = self.grid.centers()[ok.ravel()]
        pos = np.asarray(self.dyn.position_of(np.asarray(x_current)), dtype=float)
        return centers[int(np.argmin(np.sum((centers - pos) ** 2, axis=1)))]

    def pess_goal_mask(self, raster) -> np.ndarray:
        """Pessimistic-goal cells keep a safety margin off the boundary."""
        return raster.lower >= self.safety_margin

    def solve(self, problem, warm=None, budget=None):
        if budget is None:
            budget = (self.cfg.solver_max_iter if warm is not None
                      else self.cfg.cold_max_iter)
        return sqp_solve(problem, warm_start=warm,
                         settings=SolverSettings(max_iter=budget))

    def seed_toward(self, problem, target_pos):
        """Cold-start vector steered at an alternate target position."""
        from dataclasses import replace as _dc_replace

        import copy

        clone = copy.copy(problem)
        clone.goal = np.asarray(target_pos, dtype=float).ravel()
        return cold_start(clone)

    def width_seed(self, problem, raster, reach):
        """Seed pointed at the widest reachable cell, when one exists."""
        try:
            g = width_argmax_goal(raster, reach, self.dyn, 0, over="pessimistic")
        except EmptySet:
            return None
        if g.loss < self.cfg.epsilon:
            return None
        return self.seed_toward(problem, g.position)

    def solve_soft(self, problem, warm=None, multistart=True, alt_seed=None):
        """The shifted candidate is feasibility insurance, not a basin to
        settle in (its sample knot is always the old return point), so a
        goal-seeded cold solve always competes with it; a seed aimed at
        the widest reachable cell breaks ties when the slack stays
        active. The caller suppresses restarts when the grid shows no
        informative cell within reach."""
        sol = self.solve(problem, warm=warm) if warm is not None else None
        if multistart or sol is None:
            alt = self.solve(problem, warm=None)
            if sol is None or _prefer(alt, sol):
                sol = alt
        if multistart and alt_seed is not None and sol.nu > 1e-6:
            alt = self.solve(problem, warm=alt_seed,
                             budget=self.cfg.cold_max_iter)
            if _prefer(alt, sol):
                sol = alt
        return sol

    def informative_reachable(self, raster, passable, epsilon) -> bool:
        """Grid check: is any width >= epsilon cell inside the given mask
        reachable out-and-back from the current position?"""
        cell = self.grid.cell_of(self.dyn.position_of(self.x_cur))
        tube = reach_mask(self.grid, passable, [cell], self.cfg.T, self.v_max)
        return bool(np.any((raster.width >= epsilon) & tube))

    def solve_hard(self, problem, warm=None, alt_seed=None):
        """Hard solves continue from their best iterate when stalled, fall
        back to a cold restart if feasibility stays out of reach, and try
        an exploration-directed seed before concluding infeasibility."""
        sol = self.solve(problem, warm=warm) if warm is not None else None
        if sol is not None and sol.status == "max_iter":
            for _ in range(2):
                feas_before = sol.kkt["feasibility"]
                z = problem.pack(sol.X, sol.inputs, sol.dts, sol.nu)
                again = self.solve(problem, warm=z, budget=40)
                if _prefer(again, sol):
                    sol = again
                else:
                    break
                if (sol.status != "max_iter"
                        or sol.kkt["feasibility"] > 0.5 * feas_before):
                    break
        # the goal-seeded cold solve always competes: warm basins park at
        # stale sample locations
        alt = self.solve(problem, warm=None, budget=self.cfg.cold_max_iter)
        if sol is None or _prefer(alt, sol):
            sol = alt
        if alt_seed is not None and sol.status != "converged":
            alt = self.solve(problem, warm=alt_seed,
                             budget=self.cfg.cold_max_iter)
            if _prefer(alt, sol):
                sol = alt
        return sol

    def stage_lower(self, pos) -> float:
        """Planning-time stage bound: the Lipschitz-enlarged value governs
        the expander variant, the plain envelope everything else."""
        if self.cfg.variant == SAGEMPC_LIPSCHITZ and self.samples:
            from .sets import lipschitz_lower_vg

            anchors = np.array([p for p, _ in self.samples]).reshape(-1, 2)
            val, _ = lipschitz_lower_vg(self.query(), pos, anchors)
            return val
        val, _ = self.cb.lower_vg(pos)
        return val

    def execute(self, knots, inputs, dts, record: RoundRecord) -> bool:
        """Replay planned knots on the exact plant, checking ground truth.

        Refuses (returns False, no motion) when any knot fails the
        planning-time safety gate; a trajectory is only driven if the
        learned stage bound certifies every knot.
        """
        knots = np.atleast_2d(knots)
        lows = [self.stage_lower(self.dyn.position_of(x)) for x in knots]
        min_lower = min(lows) if lows else math.inf
        if min_lower < -1.2e-5:
            return False
        record.knots = knots.copy()
        record.inputs = np.atleast_2d(inputs).copy() if len(np.atleast_1d(inputs)) else np.zeros((0, self.dyn.input_dim))
        record.dts = np.asarray(dts, dtype=float).copy()
        record.min_plan_lower = min_lower
        for i, x in enumerate(knots):
            pos = self.dyn.position_of(x)
            qv = self.env.q(pos)
            if qv < 0.0:
                self.violations.append((self.t + float(np.sum(record.dts[:i])),
                                        np.asarray(pos).tolist(), qv))
        self.t += float(np.sum(record.dts))
        record.t_end = self.t
        if knots.shape[0]:
            self.x_cur = knots[-1].copy()
        return True

    def take_sample(self, pos, record: RoundRecord):
        pos = np.asarray(pos, dtype=float).ravel()
        w, _ = self.cb.width_vg(pos)
        _, std_prev = self.model.posterior(pos.reshape(1, -1))
        y = self.env.measure(pos, self.rng, self.cfg.noise_std)
        self.samples.append((pos.copy(), float(y)))
        self.widths.append(float(w))
        self.pvars.append(float(std_prev[0] ** 2))
        self.model = self.model.update(pos, y)
        self.cb.advance(self.model)
        record.sample_position = pos.copy()
        record.sample_value = float(y)
        record.width_at_sample = float(w)

    def new_record(self, n, branch) -> RoundRecord:
        return RoundRecord(n=n, branch=branch, t_start=self.t, t_end=self.t,
                           knots=np.zeros((0, self.dyn.state_dim)),
                           inputs=np.zeros((0, self.dyn.input_dim)),
                           dts=np.zeros(0))

    def book_keep(self, record: RoundRecord, raster, reach_p):
        record.pess_area = raster.area(raster.pessimistic)
        record.lip_area = raster.area(raster.lipschitz_pessimistic)
        record.explored_cells = int(np.count_nonzero(raster.pessimistic & reach_p))
        if (self.cfg.snapshot_every > 0
                and record.n % self.cfg.snapshot_every == 0):
            self.snapshots.append((record.n, raster))
        # running invariants: monotone envelopes at the memo grid and the
        # pointwise raster chain, counted with zero tolerance
        gl, gu = self.cb.grid_l, self.cb.grid_u
        if self._prev_grid_l is not None:
            if np.any(gl < self._prev_grid_l) or np.any(gu > self._prev_grid_u):
                self.envelope_breaches += 1
            if np.any((gu - gl) > (self._prev_grid_u - self._prev_grid_l)):
                self.envelope_breaches += 1
        self._prev_grid_l, self._prev_grid_u = gl.copy(), gu.copy()
        if ((raster.pessimistic & ~raster.optimistic).any()
                or (raster.eps_optimistic & ~raster.optimistic).any()
                or (raster.pessimistic & ~raster.lipschitz_pessimistic).any()):
            self.chain_breaches += 1

    def goal_info(self, g) -> dict:
        return {"position": np.asarray(g.position).tolist(), "loss": g.loss,
                "cell": list(g.cell), "which_set": g.which_set}

    def result(self, status: str, final_raster=None, avr_reference=None) -> RunResult:
        return RunResult(
            status=status, failure=self.failure, variant=self.cfg.variant,
            seed=self.cfg.seed, rounds=self.rounds, snapshots=self.snapshots,
            samples=self.samples, violations=self.violations,
            n_prime=len(self.samples), physical_time=self.t,
            final_state=None if self.x_cur is None else self.x_cur.copy(),
            widths_at_samples=self.widths, prior_vars_at_samples=self.pvars,
            avr_reference=avr_reference, final_raster=final_raster,
            envelope_breaches=self.envelope_breaches,
            chain_breaches=self.chain_breaches)

    def fail(self, reason: str) -> RunResult:
        self.failure = reason
        return self.result("failed", final_raster=self.raster())

    def final_move(self, target_pos, record: RoundRecord) -> bool:
        """Point-to-point move ending at the lifted target steady state."""
        target_pos = np.asarray(target_pos, dtype=float).ravel()
        cur_pos = self.dyn.position_of(self.x_cur)
        if (np.linalg.norm(cur_pos - target_pos) < 1e-9
                and is_steady(self.dyn, self.x_cur, 1e-6) is not None):
            return True
        term = TerminalSet(mode="steady_at", x_s=target_pos)
        prob = build_sampling_problem(GOAL_SOFT, SamplingContext(
            dyn=self.dyn, query=self.query(), terminal=term,
            x_current=self.x_cur, goal=target_pos, dist=self.dist,
            H=self.cfg.H, T=self.cfg.T, lam=self.cfg.lam,
            anchors=np.array([p for p, _ in self.samples]).reshape(-1, 2)))
        sol = self.solve(prob)
        if sol.status != "converged":
            retry = self.solve(prob, budget=2 * self.cfg.cold_max_iter)
            if _prefer(retry, sol):
                sol = retry
        if sol.status == "infeasible":
            return False
        record.solver = _solver_info(sol)
        return self.execute(sol.X, sol.inputs, sol.dts, record)


def _prefer(a, b) -> bool:
    """True when solution a should replace b."""
    rank = {"converged": 0, "max_iter": 1, "infeasible": 2}
    if rank[a.status] != rank[b.status]:
        return rank[a.status] < rank[b.status]
    if abs(a.nu - b.nu) > 1e-9:
        return a.nu < b.nu
    return a.objective < b.objective


def _solver_info(sol) -> dict:
    return {"status": sol.status, "iterations": sol.iterations,
            "kkt": {k: float(v) for k, v in sol.kkt.items()},
            "objective": float(sol.objective), "nu": float(sol.nu),
            "qp_iterations": int(sol.diagnostics.get("qp_iterations", 0)),
            "wall_ms": float(1e3 * sol.wall_time)}


def run_sageoc(cfg: ExploreConfig, env, dyn: DynModel) -> RunResult:
    """Return-to-base maximum exploration (hard-width sampling rule)."""
    if cfg.variant != SAGEOC_MAXEXPLORE:
        raise SpecError("run_sageoc drives the SageOC_MaxExplore variant")
    loop = _Loop(cfg, env, dyn)
    for n in range(cfg.max_rounds):
        raster = loop.raster()
        reach_p, reach_o = loop.masks(raster)
        rec = loop.new_record(n, "sample")
        loop.book_keep(rec, raster, reach_p)
        grid_done = exploration_finished(raster, reach_p, cfg.epsilon)
        try:
            goal = width_argmax_goal(raster, reach_p, dyn, n, over="pessimistic")
        except EmptySet:
            rec.branch = "terminate"
            loop.rounds.append(rec)
            return loop.result("terminated", final_raster=raster)
        rec.goal_opt = loop.goal_info(goal)
        prob = build_sampling_problem(
            MAX_UNCERTAINTY, loop.ctx(goal.position, loop.x_cur),
            width_guard=cfg.width_guard)
        sol = loop.solve_hard(prob, warm=loop.prev_solution)
        if sol.status == "infeasible":
            rec.branch = "terminate"
            rec.solver = _solver_info(sol)
            loop.rounds.append(rec)
            return loop.result("terminated", final_raster=raster)
        if sol.status == "max_iter" and sol.kkt["feasibility"] > 2e-4:
            if grid_done:
                rec.branch = "terminate"
                rec.solver = _solver_info(sol)
                loop.rounds.append(rec)
                return loop.result("terminated", final_raster=raster)
            return loop.fail(f"solver stalled at round {n}")
        sample_pos = sol.sample_position
        w, _ = loop.cb.width_vg(sample_pos)
        if w < cfg.epsilon - cfg.sample_width_tol:
            rec.branch = "terminate"
            rec.solver = _solver_info(sol)
            loop.rounds.append(rec)
            return loop.result("terminated", final_raster=raster)
        rec.solver = _solver_info(sol)
        rec.nu = float(sol.nu)
        if not loop.execute(sol.X, sol.inputs, sol.dts, rec):
            return loop.fail("planned knot failed the safety gate")
        loop.take_sample(sample_pos, rec)
        loop.prev_solution = prob.pack(sol.X, sol.inputs, sol.dts, sol.nu)
        loop.rounds.append(rec)
        if loop.violations:
            return loop.fail("ground-truth violation")
    return loop.fail("round budget exhausted")


def run_goal_directed(cfg: ExploreConfig, env, dyn: DynModel) -> RunResult:
    """Return-to-base goal seeking with the hard-width closest-safe solve."""
    if cfg.variant != SAGEOC_GOAL:
        raise SpecError("run_goal_directed drives the SageOC_Goal variant")
    if env.goal is None:
        raise SpecError("goal-directed run needs an environment goal")
    loop = _Loop(cfg, env, dyn)
    for n in range(cfg.max_rounds):
        raster = loop.raster()
        reach_p, reach_o = loop.masks(raster)
        rec = loop.new_record(n, "sample")
        loop.book_keep(rec, raster, reach_p)
        try:
            goal_opt = select_goal("optimistic", raster, reach_o, loop.rho_cells,
                                   dyn, n)
        except EmptySet:
            rec.branch = "terminate"
            loop.rounds.append(rec)
            return loop.result("terminated", final_raster=raster,
                               avr_reference=None)
        rec.goal_opt = loop.goal_info(goal_opt)
        try:
            goal_pess = select_goal("pessimistic", raster, reach_p, loop.rho_cells,
                                    dyn, n, extra_mask=loop.pess_goal_mask(raster))
            rec.goal_pess = loop.goal_info(goal_pess)
        except EmptySet:
            goal_pess = None
        if goal_pess is not None and goal_pess.loss <= goal_opt.loss:
            rec.branch = "terminate"
            ok = loop.final_move(goal_pess.position, rec)
            loop.rounds.append(rec)
            if loop.violations:
                return loop.fail("ground-truth violation")
            if not ok:
                return loop.fail("final move infeasible")
            return loop.result("terminated", final_raster=loop.raster(),
                               avr_reference=goal_opt.loss)
        prob = build_sampling_problem(
            GOAL_HARD, loop.ctx(goal_opt.position, loop.x_cur),
            width_guard=cfg.width_guard)
        sol = loop.solve_hard(prob, warm=loop.prev_solution,
                              alt_seed=loop.width_seed(prob, raster, reach_p))
        if sol.status == "infeasible":
            rec.branch = "terminate"
            rec.solver = _solver_info(sol)
            if goal_pess is not None:
                loop.final_move(goal_pess.position, rec)
            loop.rounds.append(rec)
            if loop.violations:
                return loop.fail("ground-truth violation")
            return loop.result("terminated", final_raster=loop.raster(),
                               avr_reference=goal_opt.loss)
        rec.solver = _solver_info(sol)
        rec.nu = float(sol.nu)
        stalled = sol.status == "max_iter" and sol.kkt["feasibility"] > 2e-4
        sample_pos = sol.sample_position
        w, _ = loop.cb.width_vg(sample_pos)
        if stalled or w < cfg.epsilon - cfg.sample_width_tol:
            rec.branch = "terminate"
            if goal_pess is not None:
                loop.final_move(goal_pess.position, rec)
            loop.rounds.append(rec)
            if loop.violations:
                return loop.fail("ground-truth violation")
            return loop.result("terminated", final_raster=loop.raster(),
                               avr_reference=goal_opt.loss)
        if not loop.execute(sol.X, sol.inputs, sol.dts, rec):
            return loop.fail("planned knot failed the safety gate")
        loop.take_sample(sample_pos, rec)
        loop.prev_solution = prob.pack(sol.X, sol.inputs, sol.dts, sol.nu)
        loop.rounds.append(rec)
        if loop.violations:
            return loop.fail("ground-truth violation")
    return loop.fail("round budget exhausted")


def run_sagempc(cfg: ExploreConfig, env, dyn: DynModel) -> RunResult:
    """Receding-horizon exploration: replan from the current state, sample
    when the slack is inactive, otherwise return along the stored plan and
    re-solve the hard problem from the terminal set."""
    if cfg.variant not in (SAGEMPC_GOAL, SAGEMPC_MAXEXPLORE, SAGEMPC_LIPSCHITZ):
        raise SpecError("run_sagempc drives the SageMPC variants")
    goal_mode = cfg.variant == SAGEMPC_GOAL
    if goal_mode and env.goal is None:
        raise SpecError("goal-directed run needs an environment goal")
    expander_mode = cfg.variant == SAGEMPC_LIPSCHITZ
    if expander_mode and cfg.lipschitz is None:
        raise SpecError("Lipschitz variant needs a Lipschitz constant")
    loop = _Loop(cfg, env, dyn)
    soft_kind = EXPANDER if expander_mode else GOAL_SOFT
    for n in range(cfg.max_rounds):
        raster = loop.raster()
        reach_p, reach_o = loop.masks(raster)
        rec = loop.new_record(n, "sample")
        loop.book_keep(rec, raster, reach_p)

        # goals and termination test
        if goal_mode:
            try:
                goal_opt = select_goal("optimistic", raster, reach_o,
                                       loop.rho_cells, dyn, n)
            except EmptySet:
                rec.branch = "terminate"
                loop.rounds.append(rec)
                return loop.result("terminated", final_raster=raster)
            rec.goal_opt = loop.goal_info(goal_opt)
            goal_pess = None
            try:
                goal_pess = select_goal("pessimistic", raster, reach_p,
                                        loop.rho_cells, dyn, n,
                                        extra_mask=loop.pess_goal_mask(raster))
                rec.goal_pess = loop.goal_info(goal_pess)
            except EmptySet:
                pass
            candidates = []
            if is_steady(dyn, loop.x_cur, 1e-6) is not None:
                candidates.append(("current", loop.rho(dyn.position_of(loop.x_cur))))
            if goal_pess is not None:
                candidates.append(("pessimistic", goal_pess.loss))
            if candidates:
                side, best = min(candidates, key=lambda kv: kv[1])
                if best <= goal_opt.loss:
                    rec.branch = "terminate"
                    ok = True
                    if side == "pessimistic":
                        ok = loop.return_via_tail(rec) and loop.final_move(
                            goal_pess.position, rec)
                    loop.rounds.append(rec)
                    if loop.violations:
                        return loop.fail("ground-truth violation")
                    if not ok:
                        return loop.fail("final move infeasible")
                    return loop.result("terminated", final_raster=loop.raster(),
                                       avr_reference=goal_opt.loss)
        else:
            # before the first measurement the anchor certificates are
            # degenerate and the rasterized expander can be empty; the
            # bootstrap round uses the plain pessimistic set instead
            use_expander = expander_mode and len(loop.samples) > 0
            term_mask = raster.expander if use_expander else None
            if exploration_finished(raster, reach_p, cfg.epsilon, mask=term_mask):
                confirm = loop.confirm_finished(raster, reach_p, rec)
                if confirm:
                    rec.branch = "terminate"
                    loop.return_via_tail(rec)
                    loop.rounds.append(rec)
                    if loop.violations:
                        return loop.fail("ground-truth violation")
                    return loop.result("terminated", final_raster=loop.raster())
            try:
                goal_opt = width_argmax_goal(raster, reach_o, dyn, n)
            except EmptySet:
                rec.branch = "terminate"
                loop.return_via_tail(rec)
                loop.rounds.append(rec)
                return loop.result("terminated", final_raster=loop.raster())
            rec.goal_opt = loop.goal_info(goal_opt)

        # slack-softened replanning step from the current state; the
        # expander restriction needs at least one anchor measurement
        round_soft_kind = soft_kind if loop.samples else GOAL_SOFT
        prob = build_sampling_problem(round_soft_kind, loop.ctx(goal_opt.position, loop.x_cur))
        warm = None
        if loop.prev_solution is not None:
            try:
                warm = shift_candidate(prob, loop.prev_solution)
            except Exception:
                warm = None
        pess_pass = (raster.lipschitz_pessimistic if expander_mode
                     else raster.pessimistic)
        width_avail = loop.informative_reachable(
            raster, pess_pass, cfg.epsilon - cfg.sample_width_tol)
        sol = loop.solve_soft(prob, warm=warm, multistart=width_avail,
                              alt_seed=loop.width_seed(prob, raster, reach_p))
        if sol.status == "infeasible":
            if round_soft_kind == EXPANDER:
                # no reachable boundary point from here: same remedy as an
                # active slack, return to the terminal set and re-solve
                sol = None
            else:
                return loop.fail(f"softened problem infeasible at round {n}")
        if sol is not None:
            rec.solver = _solver_info(sol)
            rec.nu = float(sol.nu)
            sample_pos = sol.sample_position
            w, _ = loop.cb.width_vg(sample_pos)
            solution_usable = (sol.status == "converged"
                               or sol.kkt["feasibility"] <= 2e-5)
        else:
            w = -np.inf
            solution_usable = False
        if w >= cfg.epsilon - cfg.sample_width_tol and solution_usable:
            hp = prob.Hp
            if not loop.execute(sol.X[:hp + 1], sol.inputs[:hp], sol.dts[:hp], rec):
                return loop.fail("planned knot failed the safety gate")
            loop.take_sample(sample_pos, rec)
            loop.tail = (sol.X[hp:], sol.inputs[hp:], sol.dts[hp:])
            loop.prev_solution = sol
            loop.rounds.append(rec)
        else:
            # fallback: rejoin the terminal set along the planned return,
            # then solve the hard problem from there. Only a certified
            # solution may be replayed; otherwise use the stored tail of
            # the previous feasible plan.
            rec.branch = "fallback"
            plan = None
            if sol is not None and solution_usable:
                plan = (sol.X, sol.inputs, sol.dts)
            if not loop.return_via_tail(rec, plan=plan):
                return loop.fail("fallback return infeasible")
            hard_kind = (EXPANDER if expander_mode and loop.samples
                         else GOAL_HARD)
            prob2 = build_sampling_problem(
                hard_kind, loop.ctx(goal_opt.position, loop.x_cur),
                soft=False, width_guard=cfg.width_guard)
            warm2 = None
            if (loop.prev_hard is not None
                    and np.allclose(loop.prev_hard[:dyn.state_dim],
                                    loop.x_cur, atol=1e-9)):
                warm2 = loop.prev_hard
            elif sol is not None and np.allclose(sol.X[0], loop.x_cur, atol=1e-9):
                # the soft solution starts here too: seed from it with the
                # slack cleared rather than from scratch
                warm2 = prob2.pack(sol.X, sol.inputs, sol.dts, 0.0)
            sol2 = loop.solve_hard(prob2, warm=warm2,
                                   alt_seed=loop.width_seed(prob2, raster, reach_p))
            stalled = (sol2.status == "max_iter"
                       and sol2.kkt["feasibility"] > 2e-4)
            terminate_now = sol2.status == "infeasible" or stalled
            if not terminate_now:
                sample_pos = sol2.sample_position
                w2, _ = loop.cb.width_vg(sample_pos)
                terminate_now = w2 < cfg.epsilon - cfg.sample_width_tol
            if terminate_now:
                # no informative point remains: settle at the best safe
                # steady state the goal-directed variants know about
                rec.branch = "terminate"
                if goal_mode:
                    try:
                        gp_final = select_goal(
                            "pessimistic", raster, reach_p, loop.rho_cells,
                            dyn, n, extra_mask=loop.pess_goal_mask(raster))
                        loop.final_move(gp_final.position, rec)
                    except EmptySet:
                        pass
                loop.rounds.append(rec)
                if loop.violations:
                    return loop.fail("ground-truth violation")
                return loop.result("terminated", final_raster=loop.raster())
            rec.solver = _solver_info(sol2)
            hp = prob2.Hp
            loop.prev_hard = prob2.pack(sol2.X, sol2.inputs, sol2.dts, sol2.nu)
            if not loop.execute(sol2.X[:hp + 1], sol2.inputs[:hp], sol2.dts[:hp], rec):
                return loop.fail("planned knot failed the safety gate")
            loop.take_sample(sample_pos, rec)
            loop.tail = (sol2.X[hp:], sol2.inputs[hp:], sol2.dts[hp:])
            loop.prev_solution = sol2
            loop.rounds.append(rec)
        if loop.violations:
            return loop.fail("ground-truth violation")
    return loop.fail("round budget exhausted")


# -- helpers shared by the receding-horizon loop ---------------------------

def _return_via_tail(self: _Loop, rec: RoundRecord, plan=None) -> bool:
    """Execute the stored (or provided) return leg back to the terminal set."""
    leg = plan if plan is not None else self.tail
    if leg is None:
        return True  # already parked at the terminal set
    knots, inputs, dts = leg
    if knots.shape[0] <= 1:
        return True
    if np.linalg.norm(knots[0] - self.x_cur) > 1e-6:
        return True  # tail does not start here; nothing stored to replay
    ok = self.execute(knots, inputs, dts, rec)
    self.tail = None
    return ok


def _confirm_finished(self: _Loop, raster, reach_p, rec: RoundRecord) -> bool:
    """Grid says finished; confirm with one hard solve from the return set.

    The confirm gets a modest budget: when the solver cannot produce a
    feasible point and the grid agrees there is none, the two signals
    together settle termination.
    """
    start_state = self.tail[0][-1] if self.tail is not None else self.x_cur
    try:
        goal = width_argmax_goal(raster, reach_p, self.dyn, rec.n,
                                 over="pessimistic")
    except EmptySet:
        return True
    kind = (EXPANDER if self.cfg.variant == SAGEMPC_LIPSCHITZ and self.samples
            else GOAL_HARD)
    prob = build_sampling_problem(kind, self.ctx(goal.position, start_state),
                                  soft=False, width_guard=self.cfg.width_guard)
    sol = self.solve(prob, budget=15)
    if sol.status == "infeasible":
        return True
    if sol.status == "converged":
        w, _ = self.cb.width_vg(sol.sample_position)
        return w < self.cfg.epsilon - self.cfg.sample_width_tol
    return True  # stalled and the grid already voted no


_Loop.return_via_tail = _return_via_tail
_Loop.confirm_finished = _confirm_finished


def run(cfg: ExploreConfig, env, dyn: DynModel) -> RunResult:
    """Dispatch on the configured variant."""
    if cfg.variant == SAGEOC_MAXEXPLORE:
        return run_sageoc(cfg, env, dyn)
    if cfg.variant == SAGEOC_GOAL:
        return run_goal_directed(cfg, env, dyn)
    return run_sagempc(cfg, env, dyn)
