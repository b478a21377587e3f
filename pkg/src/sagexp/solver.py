"""Gauss-Newton SQP over the sampling OCP.

The decision vector stacks H+1 states, H inputs, H step lengths, and one
slack: the discrete-time program has shooting equalities through the RK4
map, state/input boxes, stage safety from the learned lower bound, the
width-vs-slack row at the sampling knot, a total-time budget, and boundary
rows (fixed initial state, terminal-set membership). Constraint values and
gradients for the learned bounds are supplied externally per iterate and
enter the QP linearly, so each subproblem stays convex.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dynamics import DynModel, TerminalSet, is_steady, rk4_jacobians, rk4_step
from .errors import QpInfeasible, QpMaxIter, SpecError
from .qp import QpSettings, QpWorkspace


@dataclass(frozen=True)
class DistSpec:
    """Target-seeking objective; its argmin over position is the goal."""

    kind: str = "euclid"  # "euclid" | "weighted"
    a: float = 1.0
    b: float = 0.0
    rho_vg: object = None  # callable pos -> (value, grad), weighted kind only

    def value_grad(self, pos, goal):
        d = np.asarray(pos, dtype=float) - np.asarray(goal, dtype=float)
        if self.kind == "euclid":
            return float(d @ d), 2.0 * d
        if self.kind == "weighted":
            val = self.a * float(d @ d)
            grad = 2.0 * self.a * d
            if self.b != 0.0 and self.rho_vg is not None:
                rv, rg = self.rho_vg(pos)
                val += self.b * rv
                grad = grad + self.b * np.asarray(rg, dtype=float)
            return val, grad
        raise SpecError(f"unknown dist kind {self.kind!r}")

    def gauss_newton_diag(self) -> float:
        return 2.0 * (1.0 if self.kind == "euclid" else self.a)


@dataclass
class SolverSettings:
    feas_tol: float = 1e-5
    stat_tol: float = 1e-2
    max_iter: int = 20
    damping: float = 1e-6
    backtrack: float = 0.5
    max_backtracks: int = 8
    armijo: float = 1e-4
    qp: QpSettings = field(default_factory=lambda: QpSettings(
        eps_abs=1e-6, eps_rel=1e-6, max_iter=500, check_every=50,
        raise_on_max_iter=False))


@dataclass
class NlpProblem:
    """Assembled problem; built through build_nlp."""

    dyn: DynModel
    H: int
    T: float
    lam: float
    epsilon: float
    x0: np.ndarray
    goal: np.ndarray
    dist: DistSpec
    safety_vg: object  # pos -> (value, grad); stage lower-bound
    width_vg: object  # pos -> (value, grad)
    terminal: TerminalSet
    soft_width: bool = True
    expander_cap: bool = False
    terminal_safety_vg: object = None  # defaults to safety_vg
    cap_vg: object = None  # expander cap bound; defaults to safety_vg
    return_anchor: object = None  # seed position for the return leg

    def __post_init__(self):
        p, m = self.dyn.state_dim, self.dyn.input_dim
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        self.goal = np.asarray(self.goal, dtype=float).ravel()
        if self.H < 2:
            raise SpecError("horizon H must be at least 2")
        if self.x0.size != p:
            raise SpecError(f"x0 has dim {self.x0.size}, expected {p}")
        if self.goal.size != 2:
            raise SpecError("goal must be a 2-d position")
        if self.T <= 0:
            raise SpecError("time budget T must be positive")
        if self.terminal.mode == "fixed":
            if self.terminal.x_s.size != p:
                raise SpecError("terminal anchor has wrong state dimension")
            box = self.dyn.state_box
            if np.any(self.terminal.x_s < box[:, 0]) or np.any(self.terminal.x_s > box[:, 1]):
                raise SpecError("terminal anchor lies outside the state box")
        if self.terminal.mode == "steady_at" and self.terminal.x_s.size < 2:
            raise SpecError("steady_at terminal set needs a position anchor")
        if self.terminal_safety_vg is None:
            self.terminal_safety_vg = self.safety_vg
        if self.cap_vg is None:
            self.cap_vg = self.safety_vg
        self.Hp = self.H // 2
        self.p, self.m = p, m
        self.nx = (self.H + 1) * p
        self.na = self.H * m
        self.nz = self.nx + self.na + self.H + 1

    # -- flat layout -------------------------------------------------------

    def x_slice(self, k) -> slice:
        return slice(k * self.p, (k + 1) * self.p)

    def a_slice(self, k) -> slice:
        return slice(self.nx + k * self.m, self.nx + (k + 1) * self.m)

    def dt_index(self, k) -> int:
        return self.nx + self.na + k

    @property
    def nu_index(self) -> int:
        return self.nz - 1

    def pack(self, X, A, dts, nu) -> np.ndarray:
        z = np.empty(self.nz)
        z[:self.nx] = np.asarray(X, dtype=float).ravel()
        z[self.nx:self.nx + self.na] = np.asarray(A, dtype=float).ravel()
        z[self.nx + self.na:self.nz - 1] = np.asarray(dts, dtype=float).ravel()
        z[-1] = nu
        return z

    def unpack(self, z):
        X = z[:self.nx].reshape(self.H + 1, self.p)
        A = z[self.nx:self.nx + self.na].reshape(self.H, self.m)
        dts = z[self.nx + self.na:self.nz - 1]
        return X, A, dts, z[-1]


@dataclass
class NlpSolution:
    X: np.ndarray
    inputs: np.ndarray
    dts: np.ndarray
    nu: float
    status: str  # "converged" | "max_iter" | "infeasible"
    kkt: dict
    iterations: int
    wall_time: float
    objective: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def sample_position(self) -> np.ndarray:
        hp = (self.X.shape[0] - 1) // 2
        return self.X[hp, :2].copy()


def build_nlp(dyn: DynModel, H: int, T: float, lam: float, epsilon: float,
              x0, goal, dist: DistSpec, safety_vg, width_vg,
              terminal: TerminalSet, soft_width: bool = True,
              expander_cap: bool = False, terminal_safety_vg=None,
              cap_vg=None, return_anchor=None) -> NlpProblem:
    """Validate and assemble the discrete-time sampling problem."""
    return NlpProblem(dyn=dyn, H=H, T=T, lam=lam, epsilon=epsilon, x0=x0,
                      goal=goal, dist=dist, safety_vg=safety_vg,
                      width_vg=width_vg, terminal=terminal,
                      soft_width=soft_width, expander_cap=expander_cap,
                      terminal_safety_vg=terminal_safety_vg, cap_vg=cap_vg,
                      return_anchor=return_anchor)


def cold_start(prob: NlpProblem) -> np.ndarray:
    """Deterministic straight-line seed toward the goal, boxes enforced.

    Positions run out to the goal by the sampling knot and back toward the
    return anchor; headings sit on the start-to-goal bearing with a
    matching speed profile. An all-rest seed leaves the lateral dynamics
    uncontrollable in the first linearization, which stalls the SQP.
    """
    H, Hp, p = prob.H, prob.Hp, prob.p
    pos0 = prob.x0[:2]
    if prob.terminal.mode in ("fixed", "steady_at"):
        ret = prob.terminal.x_s[:2]
    elif prob.return_anchor is not None:
        ret = np.asarray(prob.return_anchor, dtype=float).ravel()[:2]
    else:
        ret = pos0
    # pull the target toward the start until the seed path is certified
    # safe; a seed deep in unsafe territory makes the first QP infeasible
    target = np.asarray(prob.goal, dtype=float)
    for frac in np.linspace(1.0, 0.0, 21):
        cand = pos0 + frac * (target - pos0)
        probe = np.linspace(pos0, cand, Hp + 1)
        if all(prob.safety_vg(pt)[0] >= 0.0 for pt in probe):
            target = cand
            break
    out_leg = np.linspace(pos0, target, Hp + 1)
    back_leg = np.linspace(target, ret, H - Hp + 1)[1:]
    positions = np.vstack([out_leg, back_leg])
    d = target - pos0
    bearing = float(np.arctan2(d[1], d[0])) if np.linalg.norm(d) > 1e-12 else prob.x0[2 if prob.dyn.kind == "bicycle" else 3]
    T = prob.T
    v_out = 2.0 * np.linalg.norm(target - pos0) / max(T, 1e-9)
    v_back = 2.0 * np.linalg.norm(ret - target) / max(T, 1e-9)
    X = np.zeros((H + 1, p))
    X[:, :2] = positions
    if prob.dyn.kind == "unicycle":
        X[:, 3] = bearing
        X[:Hp, 2] = v_out
        X[Hp + 1:, 2] = -v_back
    else:
        X[:, 2] = bearing
        X[:Hp, 3] = v_out
        X[Hp + 1:, 3] = -v_back
    box = prob.dyn.state_box
    X = np.clip(X, box[:, 0], box[:, 1])
    X[0] = prob.x0
    A = np.zeros((H, prob.m))
    dts = np.full(H, T / H)
    nu = 0.0
    if prob.soft_width:
        w, _ = prob.width_vg(X[Hp, :2])
        nu = max(0.0, prob.epsilon - w)
    return prob.pack(X, A, dts, nu)


def shift_candidate(prob: NlpProblem, prev: NlpSolution) -> np.ndarray:
    """Standard receding-horizon candidate: shift by the executed knots
    and hold the terminal steady state for the freed stages. Steady holds
    are exact for any step length, so the leftover time budget is spread
    over them to keep the stages non-degenerate."""
    Hp = prob.Hp
    X = np.vstack([prev.X[Hp:], np.repeat(prev.X[-1][None, :], Hp, axis=0)])
    hold_input = is_steady(prob.dyn, prev.X[-1], tol=1e-6)
    hold_dt = 0.0
    if hold_input is None:
        hold_input = np.zeros(prob.m)
    else:
        hold_dt = max(0.0, (prob.T - float(np.sum(prev.dts[Hp:]))) / max(Hp, 1))
    A = np.vstack([prev.inputs[Hp:], np.tile(hold_input, (Hp, 1))])
    dts = np.concatenate([prev.dts[Hp:], np.full(Hp, hold_dt)])
    nu = 0.0
    if prob.soft_width:
        w, _ = prob.width_vg(X[prob.Hp, :2])
        nu = max(0.0, prob.epsilon - w)
    return prob.pack(X, A, dts, nu)


def _project_boxes(prob: NlpProblem, z: np.ndarray) -> np.ndarray:
    """Clamp the box-bounded variables; the QP honors these bounds only up
    to its own tolerance, and the evaluators need exact box membership."""
    z = z.copy()
    sbox, ibox = prob.dyn.state_box, prob.dyn.input_box
    X = z[:prob.nx].reshape(prob.H + 1, prob.p)
    np.clip(X[1:], sbox[:, 0], sbox[:, 1], out=X[1:])
    A = z[prob.nx:prob.nx + prob.na].reshape(prob.H, prob.m)
    np.clip(A, ibox[:, 0], ibox[:, 1], out=A)
    dts = z[prob.nx + prob.na:prob.nz - 1]
    np.clip(dts, 0.0, prob.T, out=dts)
    z[-1] = max(z[-1], 0.0)
    return z


class _Eval:
    """All constraint values and first-order data at one iterate."""

    def __init__(self, prob: NlpProblem, z: np.ndarray):
        self.z = z
        X, A, dts, nu = prob.unpack(z)
        self.X, self.A, self.dts, self.nu = X, A, dts, nu
        H, p = prob.H, prob.p
        self.defects = np.empty((H, p))
        self.jacs = []
        for k in range(H):
            self.defects[k] = X[k + 1] - rk4_step(prob.dyn, X[k], A[k], dts[k])
            self.jacs.append(rk4_jacobians(prob.dyn, X[k], A[k], dts[k]))
        self.safety = []
        for k in range(H):
            self.safety.append(prob.safety_vg(X[k, :2]))
        self.width = prob.width_vg(X[prob.Hp, :2])
        self.obj_dist, self.obj_grad = prob.dist.value_grad(X[prob.Hp, :2], prob.goal)
        self.objective = prob.lam * nu + self.obj_dist
        self.time_used = float(np.sum(dts))
        if prob.terminal.mode == "growing":
            self.term_safety = prob.terminal_safety_vg(X[-1, :2])
        else:
            self.term_safety = None

    def _violations(self, prob: NlpProblem) -> np.ndarray:
        """Per-row constraint violations (boxes excluded: iterates stay
        inside by construction of the QP bounds)."""
        rows = [np.abs(self.defects).ravel()]
        rows.append(np.array([max(0.0, -val) for val, _ in self.safety]))
        wval, _ = self.width
        rows.append(np.array([
            max(0.0, prob.epsilon - wval - self.nu),
            max(0.0, self.time_used - prob.T),
            max(0.0, -self.nu),
        ]))
        if prob.expander_cap:
            lval, _ = prob.cap_vg(self.X[prob.Hp, :2])
            rows.append(np.array([max(0.0, lval)]))
        if prob.terminal.mode == "fixed":
            rows.append(np.abs(self.X[-1] - prob.terminal.x_s))
        elif prob.terminal.mode == "steady_at":
            steady = [2, 4] if prob.dyn.kind == "unicycle" else [3]
            rows.append(np.concatenate([
                np.abs(self.X[-1, :2] - prob.terminal.x_s[:2]),
                np.abs(self.X[-1, steady]),
            ]))
        else:
            tval, _ = self.term_safety
            steady = [2, 4] if prob.dyn.kind == "unicycle" else [3]
            rows.append(np.concatenate([
                [max(0.0, prob.terminal.margin - tval)],
                np.abs(self.X[-1, steady]),
            ]))
        return np.concatenate(rows)

    def violation(self, prob: NlpProblem) -> float:
        """l1 aggregate, the exact-penalty merit term."""
        return float(np.sum(self._violations(prob)))

    def violation_max(self, prob: NlpProblem) -> float:
        """Worst single constraint violation, the convergence measure."""
        v = self._violations(prob)
        return float(v.max()) if v.size else 0.0


def _build_qp(prob: NlpProblem, ev: _Eval, damping: float, elastic_pen=None):
    """Linearize everything at the iterate; variables are steps d."""
    H, p, m, nz = prob.H, prob.p, prob.m, prob.nz
    rows_i, cols_i, vals_i = [], [], []
    lo_rows, up_rows = [], []
    r = 0

    def add_entry(row, col, val):
        rows_i.append(row)
        cols_i.append(col)
        vals_i.append(val)

    # variable bounds as identity rows
    lo_var = np.full(nz, -np.inf)
    up_var = np.full(nz, np.inf)
    sbox, ibox = prob.dyn.state_box, prob.dyn.input_box
    for k in range(H + 1):
        sl = prob.x_slice(k)
        lo_var[sl] = sbox[:, 0] - ev.X[k]
        up_var[sl] = sbox[:, 1] - ev.X[k]
    for k in range(H):
        sl = prob.a_slice(k)
        lo_var[sl] = ibox[:, 0] - ev.A[k]
        up_var[sl] = ibox[:, 1] - ev.A[k]
    for k in range(H):
        i = prob.dt_index(k)
        lo_var[i] = -ev.dts[k]
        up_var[i] = prob.T - ev.dts[k]
    if prob.soft_width:
        lo_var[prob.nu_index] = -ev.nu
    else:
        lo_var[prob.nu_index] = -ev.nu
        up_var[prob.nu_index] = -ev.nu
    # initial state pinned
    lo_var[prob.x_slice(0)] = 0.0
    up_var[prob.x_slice(0)] = 0.0
    # terminal handling via bounds where possible
    if prob.terminal.mode == "fixed":
        gap = prob.terminal.x_s - ev.X[-1]
        lo_var[prob.x_slice(H)] = gap
        up_var[prob.x_slice(H)] = gap
    elif prob.terminal.mode == "steady_at":
        sl = prob.x_slice(H)
        for i in range(2):
            lo_var[sl.start + i] = prob.terminal.x_s[i] - ev.X[-1][i]
            up_var[sl.start + i] = prob.terminal.x_s[i] - ev.X[-1][i]
        steady = [2, 4] if prob.dyn.kind == "unicycle" else [3]
        for i in steady:
            lo_var[sl.start + i] = -ev.X[-1][i]
            up_var[sl.start + i] = -ev.X[-1][i]
    else:
        tbox = prob.terminal.shrunk_state_box(prob.dyn)
        sl = prob.x_slice(H)
        lo_var[sl] = np.maximum(lo_var[sl], tbox[:, 0] - ev.X[-1])
        up_var[sl] = np.minimum(up_var[sl], tbox[:, 1] - ev.X[-1])
        steady = [2, 4] if prob.dyn.kind == "unicycle" else [3]
        for i in steady:
            lo_var[sl.start + i] = -ev.X[-1][i]
            up_var[sl.start + i] = -ev.X[-1][i]
    for i in range(nz):
        add_entry(r + i, i, 1.0)
    lo_rows.append(lo_var)
    up_rows.append(up_var)
    r += nz

    elastic_cols = []

    def maybe_elastic(row, sense):
        """Append an elastic column for a relaxable inequality row."""
        if elastic_pen is None:
            return
        elastic_cols.append((row, sense))

    # shooting equalities
    for k in range(H):
        A_k, B_k, c_k = ev.jacs[k]
        for i in range(p):
            row = r + i
            add_entry(row, prob.x_slice(k + 1).start + i, 1.0)
            for j in range(p):
                if A_k[i, j] != 0.0:
                    add_entry(row, prob.x_slice(k).start + j, -A_k[i, j])
            for j in range(m):
                if B_k[i, j] != 0.0:
                    add_entry(row, prob.a_slice(k).start + j, -B_k[i, j])
            if c_k[i] != 0.0:
                add_entry(row, prob.dt_index(k), -c_k[i])
        rhs = -ev.defects[k]
        lo_rows.append(rhs)
        up_rows.append(rhs)
        r += p

    # stage safety: l(pos_k) + g.d >= 0
    for k in range(H):
        val, grad = ev.safety[k]
        row = r
        add_entry(row, prob.x_slice(k).start + 0, grad[0])
        add_entry(row, prob.x_slice(k).start + 1, grad[1])
        lo_rows.append(np.array([-val]))
        up_rows.append(np.array([np.inf]))
        maybe_elastic(row, +1)
        r += 1

    # width at the sampling knot: w + g.d + dnu >= eps - nu
    wval, wgrad = ev.width
    row = r
    add_entry(row, prob.x_slice(prob.Hp).start + 0, wgrad[0])
    add_entry(row, prob.x_slice(prob.Hp).start + 1, wgrad[1])
    add_entry(row, prob.nu_index, 1.0)
    lo_rows.append(np.array([prob.epsilon - wval - ev.nu]))
    up_rows.append(np.array([np.inf]))
    maybe_elastic(row, +1)
    r += 1

    # expander cap: l(pos_Hp) + g.d <= 0
    if prob.expander_cap:
        lval, lgrad = prob.cap_vg(ev.X[prob.Hp, :2])
        row = r
        add_entry(row, prob.x_slice(prob.Hp).start + 0, lgrad[0])
        add_entry(row, prob.x_slice(prob.Hp).start + 1, lgrad[1])
        lo_rows.append(np.array([-np.inf]))
        up_rows.append(np.array([-lval]))
        maybe_elastic(row, -1)
        r += 1

    # growing terminal: tightened lower bound at the final position
    if prob.terminal.mode == "growing":
        tval, tgrad = ev.term_safety
        row = r
        add_entry(row, prob.x_slice(H).start + 0, tgrad[0])
        add_entry(row, prob.x_slice(H).start + 1, tgrad[1])
        lo_rows.append(np.array([prob.terminal.margin - tval]))
        up_rows.append(np.array([np.inf]))
        maybe_elastic(row, +1)
        r += 1

    # time budget
    row = r
    for k in range(H):
        add_entry(row, prob.dt_index(k), 1.0)
    lo_rows.append(np.array([-np.inf]))
    up_rows.append(np.array([prob.T - ev.time_used]))
    r += 1

    meta = {
        "shoot_start": nz,
        "safety_start": nz + H * p,
        "width_row": nz + H * p + H,
    }
    cursor = meta["width_row"] + 1
    meta["expander_row"] = None
    meta["term_row"] = None
    if prob.expander_cap:
        meta["expander_row"] = cursor
        cursor += 1
    if prob.terminal.mode == "growing":
        meta["term_row"] = cursor
        cursor += 1
    meta["time_row"] = cursor

    n_elastic = len(elastic_cols)
    ncols = nz + n_elastic
    for j, (row, sense) in enumerate(elastic_cols):
        add_entry(row, nz + j, float(sense))

    A = sp.coo_matrix((vals_i, (rows_i, cols_i)), shape=(r, ncols)).tocsc()
    lo = np.concatenate(lo_rows)
    up = np.concatenate(up_rows)
    if n_elastic:
        bound_rows = sp.coo_matrix(
            (np.ones(n_elastic), (np.arange(n_elastic), nz + np.arange(n_elastic))),
            shape=(n_elastic, ncols)).tocsc()
        A = sp.vstack([A, bound_rows]).tocsc()
        lo = np.concatenate([lo, np.zeros(n_elastic)])
        up = np.concatenate([up, np.full(n_elastic, np.inf)])

    # Gauss-Newton cost: damping everywhere, curvature on the sampled
    # position block, linear terms from the objective gradient.
    Pdiag = np.full(ncols, damping)
    pos0 = prob.x_slice(prob.Hp).start
    gn = prob.dist.gauss_newton_diag()
    Pdiag[pos0] += gn
    Pdiag[pos0 + 1] += gn
    q = np.zeros(ncols)
    q[pos0] += ev.obj_grad[0]
    q[pos0 + 1] += ev.obj_grad[1]
    q[prob.nu_index] += prob.lam
    if n_elastic:
        q[nz:] = elastic_pen
        Pdiag[nz:] = np.maximum(Pdiag[nz:], 1e-2)  # conditions the LP-like rows
    return sp.diags(Pdiag).tocsc(), q, A, lo, up, meta


def _stationarity(prob: NlpProblem, ev: _Eval, A, y, ncols) -> float:
    """Inf-norm of the Lagrangian gradient using the QP duals.

    The slack coordinate is normalized by its own penalty scale; its
    stationarity is linear and the duals absorb lam exactly, so residual
    noise there should not mask progress elsewhere.
    """
    g = np.zeros(ncols)
    pos0 = prob.x_slice(prob.Hp).start
    g[pos0] += ev.obj_grad[0]
    g[pos0 + 1] += ev.obj_grad[1]
    g[prob.nu_index] += prob.lam
    resid = g + A.T @ y
    resid[prob.nu_index] /= (1.0 + prob.lam)
    return float(np.max(np.abs(resid[:prob.nz])))


def _soc_bounds(prob: NlpProblem, meta: dict, ev_try: _Eval, Ad: np.ndarray,
                d: np.ndarray, lo: np.ndarray, up: np.ndarray):
    """Second-order-corrected bounds: same Jacobians, residuals from the
    trial point. Cancels the curvature of the nonlinear rows (Maratos fix)."""
    lo2, up2 = lo.copy(), up.copy()
    H, p = prob.H, prob.p
    s0 = meta["shoot_start"]
    for k in range(H):
        rows = slice(s0 + k * p, s0 + (k + 1) * p)
        val = Ad[rows] - ev_try.defects[k]
        lo2[rows] = val
        up2[rows] = val
    f0 = meta["safety_start"]
    for k in range(H):
        r = f0 + k
        lo2[r] = -ev_try.safety[k][0] + Ad[r]
    r = meta["width_row"]
    c_try = ev_try.width[0] + prob.unpack(ev_try.z)[3]
    lo2[r] = prob.epsilon - c_try + Ad[r]
    if meta["expander_row"] is not None:
        r = meta["expander_row"]
        lval, _ = prob.cap_vg(ev_try.X[prob.Hp, :2])
        up2[r] = -lval + Ad[r]
    if meta["term_row"] is not None:
        r = meta["term_row"]
        lo2[r] = prob.terminal.margin - ev_try.term_safety[0] + Ad[r]
    return lo2, up2


def sqp_solve(prob: NlpProblem, warm_start: np.ndarray | None = None,
              settings: SolverSettings | None = None) -> NlpSolution:
    """Damped Gauss-Newton SQP: l1 merit line search with a second-order
    correction retry on full-step rejections."""
    st = settings or SolverSettings()
    t0 = time.perf_counter()
    z = cold_start(prob) if warm_start is None else np.asarray(warm_start, dtype=float).copy()
    ev = _Eval(prob, z)
    damping = st.damping
    pen = 10.0

    def _rank(e):
        # feasible iterates first (by objective), infeasible by violation
        v = e.violation_max(prob)
        return (1, v, 0.0) if v > st.feas_tol else (0, 0.0, e.objective)

    best = (_rank(ev), z, ev)
    status = "max_iter"
    kkt = {"stationarity": np.inf, "feasibility": ev.violation_max(prob),
           "complementarity": np.inf}
    qp_dual = None
    iterations = 0
    elastic_used = False
    qp_iter_total = 0
    elastic_streak = 0
    feas_at_streak = np.inf

    cold = warm_start is None
    rough_qp = None
    if cold:
        import dataclasses

        rough_qp = dataclasses.replace(st.qp, max_iter=min(200, st.qp.max_iter))
    for it in range(1, st.max_iter + 1):
        iterations = it
        elastic_now = False
        qp_settings = rough_qp if (cold and it <= 6 and rough_qp) else st.qp
        P, q, Aqp, lo, up, meta = _build_qp(prob, ev, damping)
        ws = None
        try:
            ws = QpWorkspace(P, q, Aqp, lo, up, qp_settings)
            warm = None
            if qp_dual is not None and qp_dual.size == Aqp.shape[0]:
                warm = (np.zeros(Aqp.shape[1]), qp_dual)
            sol = ws.solve(warm=warm)
        except (QpInfeasible, QpMaxIter) as exc:
            if isinstance(exc, QpMaxIter) and exc.best is not None:
                sol = exc.best
            else:
                elastic_used = True
                elastic_now = True
                ws = None
                P, q, Aqp, lo, up, meta = _build_qp(
                    prob, ev, damping,
                    elastic_pen=max(1e3, 10.0 * pen, 2.0 * prob.lam))
                try:
                    sol = QpWorkspace(P, q, Aqp, lo, up, qp_settings).solve()
                except (QpInfeasible, QpMaxIter) as exc2:
                    if isinstance(exc2, QpMaxIter) and exc2.best is not None:
                        sol = exc2.best
                    else:
                        status = "infeasible"
                        break
        qp_iter_total += sol.iterations
        qp_dual = sol.y if sol.y.size == Aqp.shape[0] else None
        d = sol.x[:prob.nz]

        feas = ev.violation_max(prob)
        merit_feas = ev.violation(prob)
        if elastic_now:
            # consecutive restoration solves stuck at a substantial
            # violation mean the constraints are truly inconsistent; small
            # residuals keep iterating through the ordinary machinery
            elastic_streak += 1
            if (elastic_streak >= 5 and feas > 1e-2
                    and feas > 0.9 * feas_at_streak):
                status = "infeasible"
                break
            if elastic_streak == 1:
                feas_at_streak = feas
        else:
            elastic_streak = 0
            feas_at_streak = np.inf
        gscale = 1.0 + float(np.max(np.abs(ev.obj_grad)))
        stat = _stationarity(prob, ev, Aqp, sol.y, Aqp.shape[1]) / gscale
        res = Aqp @ sol.x
        slack = np.clip(np.minimum(res - lo, up - res), 0.0, 1e6)
        comp = float(np.max(np.abs(sol.y) * slack)) if sol.y.size else 0.0
        kkt = {"stationarity": stat, "feasibility": feas, "complementarity": comp}
        if feas <= st.feas_tol and stat <= st.stat_tol:
            status = "converged"
            best = (_rank(ev), z, ev)
            break

        # exact-penalty weight from the general-row duals (bound rows are
        # never violated along the search, so they do not matter here);
        # elastic-mode duals carry the artificial relaxation cost and are
        # excluded to keep the weight meaningful
        if not elastic_now:
            y_gen = sol.y[prob.nz:] if sol.y.size >= prob.nz else sol.y
            if y_gen.size:
                pen = max(pen, 1.05 * float(np.max(np.abs(y_gen))))
        merit0 = ev.objective + pen * merit_feas
        quad = float(sol.x @ (P @ sol.x))
        pred = max(-(q @ sol.x + 0.5 * quad) + pen * merit_feas, 1e-16)

        accepted = False
        alpha = 1.0
        # full step, then a second-order correction, then backtracking
        z_try = _project_boxes(prob, z + d)
        ev_try = _Eval(prob, z_try)
        if ev_try.objective + pen * ev_try.violation(prob) <= merit0 - st.armijo * pred:
            accepted = True
        elif ws is not None:
            Ad = Aqp @ sol.x
            lo2, up2 = _soc_bounds(prob, meta, ev_try, Ad, d, lo, up)
            try:
                ws.update_bounds(lo2, up2)
                soc = ws.solve(warm=(sol.x, sol.y))
                z_soc = _project_boxes(prob, z + soc.x[:prob.nz])
                ev_soc = _Eval(prob, z_soc)
                if (ev_soc.objective + pen * ev_soc.violation(prob)
                        <= merit0 - st.armijo * pred):
                    accepted = True
                    z_try, ev_try = z_soc, ev_soc
                    qp_iter_total += soc.iterations
            except (QpInfeasible, QpMaxIter):
                pass
        if not accepted:
            alpha = st.backtrack
            for _ in range(st.max_backtracks):
                z_try = _project_boxes(prob, z + alpha * d)
                ev_try = _Eval(prob, z_try)
                merit_try = ev_try.objective + pen * ev_try.violation(prob)
                if merit_try <= merit0 - st.armijo * alpha * pred:
                    accepted = True
                    break
                alpha *= st.backtrack

        if accepted:
            step_norm = float(np.max(np.abs(z_try - z)))
            z, ev = z_try, ev_try
            # trust-ratio scaling: expand after clean full steps, contract
            # when the line search had to truncate hard
            if alpha >= 1.0:
                damping = max(st.damping, damping * 0.35)
            elif alpha < 0.25:
                damping = min(1e6, damping * 4.0)
            r_new = _rank(ev)
            if r_new < best[0]:
                best = (r_new, z, ev)
            if step_norm < 1e-14 and feas <= st.feas_tol:
                status = "converged"
                break
        else:
            damping = min(1e6, damping * 10.0)
            if damping >= 1e6:
                break

    if status != "converged":
        _, z, ev = best
    feas_final = ev.violation_max(prob)
    if status != "converged" and elastic_now and feas_final > st.feas_tol:
        status = "infeasible"
    if status == "max_iter" and feas_final > 1e3 * st.feas_tol and not prob.soft_width:
        # hard problems that cannot reach feasibility surface as infeasible
        status = "infeasible"
    X, A, dts, nu = prob.unpack(z)
    kkt["feasibility"] = feas_final
    return NlpSolution(X=X.copy(), inputs=A.copy(), dts=dts.copy(), nu=float(nu),
                       status=status, kkt=kkt, iterations=iterations,
                       wall_time=time.perf_counter() - t0,
                       objective=float(ev.objective),
                       diagnostics={"qp_iterations": qp_iter_total,
                                    "elastic": elastic_used,
                                    "penalty": pen})
