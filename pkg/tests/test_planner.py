"""Reachability mask, goal selection, and builder mapping tests."""

import numpy as np
import pytest

from sagexp.dynamics import UNICYCLE, DynModel, TerminalSet, lift_position
from sagexp.errors import EmptySet, SpecError
from sagexp.gp import BetaSchedule, ConfBounds, GpModel, GridSpec, Kernel, PriorMean
from sagexp.planner import (
    EXPANDER,
    GOAL_HARD,
    GOAL_SOFT,
    MAX_UNCERTAINTY,
    SamplingContext,
    build_sampling_problem,
    exploration_finished,
    reach_mask,
    select_goal,
    width_argmax_goal,
)
from sagexp.sets import SetQuery, rasterize
from sagexp.solver import DistSpec

BOX = [[0.0, 2.0], [0.0, 2.0]]


def unicycle():
    return DynModel(
        kind=UNICYCLE,
        state_box=[[0.0, 2.0], [0.0, 2.0], [-1.0, 1.6], [-7.0, 7.0], [-3.0, 3.0]],
        input_box=[[-2.5, 2.5], [-8.0, 8.0]],
    )


def dijkstra_oracle(passable, start, spacing, budget):
    """Brute-force Bellman-Ford over the 8-connected grid graph."""
    ny, nx = passable.shape
    dist = {c: np.inf for c in zip(*np.nonzero(passable))}
    if start in dist:
        dist[start] = 0.0
    for _ in range(ny * nx):
        changed = False
        for (iy, ix), d in list(dist.items()):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy == dx == 0:
                        continue
                    nb = (iy + dy, ix + dx)
                    if nb in dist:
                        nd = d + np.hypot(dx * spacing[0], dy * spacing[1])
                        if nd < dist[nb] - 1e-15:
                            dist[nb] = nd
                            changed = True
        if not changed:
            break
    out = np.zeros_like(passable)
    for (iy, ix), d in dist.items():
        out[iy, ix] = d <= budget
    return out


class TestReachMask:
    def test_infinite_budget_is_connected_component(self):
        grid = GridSpec.cover(BOX, (8, 8))
        passable = np.ones((8, 8), dtype=bool)
        passable[:, 4] = False  # vertical wall splits the grid
        got = reach_mask(grid, passable, [(0, 0)], T=1e9, v_max=1.0)
        assert got[:, :4].all()
        assert not got[:, 4:].any()

    def test_blocked_corridor_excludes_far_component(self):
        grid = GridSpec.cover(BOX, (6, 6))
        passable = np.ones((6, 6), dtype=bool)
        passable[2:4, 2:4] = True
        passable[:, 3] = False
        got = reach_mask(grid, passable, [(1, 1)], T=1e9, v_max=2.0)
        assert not got[:, 4:].any()

    def test_straight_corridor_hand_counted(self):
        # Spacing 0.1, v_max 2, T 1: path budget is T/2 * v = 1.0, so ten
        # cells along the corridor qualify beyond the start.
        grid = GridSpec(origin=(0.0, 0.0), spacing=(0.1, 0.1), dims=(20, 1))
        passable = np.ones((1, 20), dtype=bool)
        got = reach_mask(grid, passable, [(0, 0)], T=1.0, v_max=2.0)
        assert got[0, :11].all()
        assert not got[0, 11:].any()

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_bellman_ford_oracle(self, seed):
        rng = np.random.default_rng(seed)
        grid = GridSpec.cover(BOX, (7, 7))
        passable = rng.random((7, 7)) > 0.3
        passable[3, 3] = True
        budget = 0.8
        got = reach_mask(grid, passable, [(3, 3)], T=2 * budget, v_max=1.0)
        want = dijkstra_oracle(passable, (3, 3), grid.spacing, budget)
        assert np.array_equal(got, want)


def make_raster(data=(), mean=0.0, sv=0.25, noise=0.05, eps=0.3, dims=(12, 12),
                lipschitz=None):
    kern = Kernel("se", (0.5, 0.5), sv)
    model = GpModel(kern, PriorMean(constant=mean), noise)
    for x, y in data:
        model = model.update(x, y)
    grid = GridSpec.cover(BOX, dims)
    cb = ConfBounds(BetaSchedule(sqrt_beta=3.0), grid)
    cb.advance(model)
    q = SetQuery(bounds=cb, epsilon=eps, domain_box=np.array(BOX), lipschitz=lipschitz)
    return q, rasterize(q, grid, samples=[x for x, _ in data])


class TestSelectGoal:
    def test_interior_goal_minimizes_euclid(self):
        q, raster = make_raster(mean=1.0, sv=0.01)
        reach = np.ones(raster.grid.shape, dtype=bool)
        target = np.array([1.31, 0.72])
        loss = np.sum((raster.grid.centers() - target) ** 2, axis=1)
        got = select_goal("optimistic", raster, reach, loss, unicycle(), 0)
        centers = raster.grid.centers()
        best = centers[np.argmin(loss)]
        assert np.allclose(got.position, best)
        assert got.witness_input is not None

    def test_singleton_pessimistic_mask(self):
        q, raster = make_raster(mean=-1.0, sv=0.01)
        # force exactly one pessimistic cell
        raster.pessimistic[:] = False
        raster.pessimistic[4, 7] = True
        reach = np.ones(raster.grid.shape, dtype=bool)
        loss = np.zeros(raster.grid.shape[0] * raster.grid.shape[1])
        got = select_goal("pessimistic", raster, reach, loss, unicycle(), 3)
        assert got.cell == (4, 7)
        assert got.round_index == 3

    def test_empty_set_raises(self):
        q, raster = make_raster(mean=-1.0, sv=0.01)
        reach = np.ones(raster.grid.shape, dtype=bool)
        loss = np.zeros(raster.grid.shape[0] * raster.grid.shape[1])
        with pytest.raises(EmptySet):
            select_goal("pessimistic", raster, reach, loss, unicycle(), 0)

    def test_determinism_and_tie_break(self):
        q, raster = make_raster(mean=1.0, sv=0.01)
        reach = np.ones(raster.grid.shape, dtype=bool)
        loss = np.ones(raster.grid.shape[0] * raster.grid.shape[1])  # all ties
        a = select_goal("optimistic", raster, reach, loss, unicycle(), 0)
        b = select_goal("optimistic", raster, reach, loss, unicycle(), 0)
        assert a.cell == b.cell == (0, 0)  # smallest flat index wins


class TestBuilders:
    def ctx(self, kind_query=None, lipschitz=None):
        q, raster = make_raster(data=[([0.5, 0.5], 0.9)], lipschitz=lipschitz)
        dyn = unicycle()
        x0 = lift_position(dyn, (0.5, 0.5))
        return SamplingContext(
            dyn=dyn, query=q, terminal=TerminalSet(mode="fixed", x_s=x0),
            x_current=x0, goal=np.array([0.9, 0.8]), dist=DistSpec("euclid"),
            H=6, T=1.0, lam=1e3,
            anchors=np.array([[0.5, 0.5]]))

    def test_goal_soft_has_free_slack(self):
        prob = build_sampling_problem(GOAL_SOFT, self.ctx())
        assert prob.soft_width and not prob.expander_cap

    def test_goal_hard_pins_slack(self):
        prob = build_sampling_problem(GOAL_HARD, self.ctx())
        assert not prob.soft_width

    def test_max_uncertainty_pins_slack(self):
        prob = build_sampling_problem(MAX_UNCERTAINTY, self.ctx())
        assert not prob.soft_width

    def test_expander_needs_lipschitz(self):
        with pytest.raises(SpecError):
            build_sampling_problem(EXPANDER, self.ctx())
        prob = build_sampling_problem(EXPANDER, self.ctx(lipschitz=1.0))
        assert prob.expander_cap and prob.soft_width
        # stage bound is the enlarged one: at a point just outside the
        # plain pessimistic set the enlarged value is higher
        pos = np.array([0.95, 0.5])
        plain, _ = self.ctx().query.bounds.lower_vg(pos)
        enlarged, _ = prob.safety_vg(pos)
        assert enlarged >= plain - 1e-12

    def test_unknown_kind_rejected(self):
        with pytest.raises(SpecError):
            build_sampling_problem("bogus", self.ctx())


class TestTerminationCheck:
    def test_fresh_prior_not_finished(self):
        # mean 2, sv 0.25: l = 0.5 > 0 everywhere with width 3 >= eps
        q, raster = make_raster(mean=2.0, sv=0.25, eps=0.3)
        assert raster.pessimistic.all()
        reach = np.ones(raster.grid.shape, dtype=bool)
        assert not exploration_finished(raster, reach, 0.3)

    def test_saturated_finished(self):
        q, raster = make_raster(mean=1.0, sv=1e-6, eps=0.3)
        reach = np.ones(raster.grid.shape, dtype=bool)
        assert exploration_finished(raster, reach, 0.3)

    def test_width_argmax_goal_on_fresh_prior(self):
        q, raster = make_raster(mean=1.0, sv=0.25, eps=0.3)
        reach = np.ones(raster.grid.shape, dtype=bool)
        g = width_argmax_goal(raster, reach, unicycle(), 0)
        assert g.loss >= 0.3  # prior width is far above epsilon
