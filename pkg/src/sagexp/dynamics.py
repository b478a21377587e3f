"""Vehicle models, RK4 discretization, steady states, and terminal sets.

Two kinds are wired in: a second-order unicycle (5 states) and a kinematic
bicycle with slip angle (4 states). All right-hand sides are dtype-agnostic
so complex-step differentiation gives machine-precision Jacobians of the
discretized map, including sensitivity to the step length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SpecError

UNICYCLE = "unicycle"
BICYCLE = "bicycle"


@dataclass(frozen=True)
class DynModel:
    """Continuous-time model with state and input boxes.

    Unicycle state (x_p, y_p, v, theta, omega), inputs (accel, ang_accel).
    Bicycle state (x_p, y_p, theta, v), inputs (steer, accel).
    """

    kind: str
    state_box: np.ndarray  # (p, 2)
    input_box: np.ndarray  # (m, 2)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (UNICYCLE, BICYCLE):
            raise SpecError(f"unknown dynamics kind {self.kind!r}")
        object.__setattr__(self, "state_box", np.asarray(self.state_box, dtype=float))
        object.__setattr__(self, "input_box", np.asarray(self.input_box, dtype=float))
        if self.state_box.shape != (self.state_dim, 2):
            raise SpecError("state_box shape mismatch")
        if self.input_box.shape != (self.input_dim, 2):
            raise SpecError("input_box shape mismatch")
        if self.kind == BICYCLE:
            p = dict(self.params)
            p.setdefault("l_f", 1.105)
            p.setdefault("l_r", 1.738)
            object.__setattr__(self, "params", p)

    @property
    def state_dim(self) -> int:
        return 5 if self.kind == UNICYCLE else 4

    @property
    def input_dim(self) -> int:
        return 2

    def position_of(self, state) -> np.ndarray:
        return np.asarray(state)[..., :2]


def f(model: DynModel, state, inp):
    """Continuous-time right-hand side, any float or complex dtype."""
    x = np.asarray(state)
    a = np.asarray(inp)
    out = np.zeros_like(x)
    if model.kind == UNICYCLE:
        v, theta, omega = x[2], x[3], x[4]
        out[0] = v * np.cos(theta)
        out[1] = v * np.sin(theta)
        out[2] = a[0]
        out[3] = omega
        out[4] = a[1]
    else:
        theta, v = x[2], x[3]
        delta, accel = a[0], a[1]
        l_f = model.params["l_f"]
        l_r = model.params["l_r"]
        beta = np.arctan(l_r / (l_f + l_r) * np.tan(delta))
        out[0] = v * np.cos(theta + beta)
        out[1] = v * np.sin(theta + beta)
        out[2] = v / l_r * np.sin(beta)
        out[3] = accel
    return out


def rk4_step(model: DynModel, state, inp, dt):
    """Classical fourth-order step with zero-order-hold input."""
    if np.real(dt) < 0:
        raise DomainError("dt must be nonnegative")
    k1 = f(model, state, inp)
    k2 = f(model, state + 0.5 * dt * k1, inp)
    k3 = f(model, state + 0.5 * dt * k2, inp)
    k4 = f(model, state + dt * k3, inp)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


_CS_H = 1e-30


def rk4_jacobians(model: DynModel, state, inp, dt):
    """Complex-step Jacobians of the discrete map.

    Returns (A, B, c): sensitivities of rk4_step w.r.t. state, input, and
    the step length. Exact to machine precision for these smooth models;
    the state/input perturbations ride one batched integration (the
    right-hand side broadcasts over trailing axes).
    """
    x = np.asarray(state, dtype=complex).ravel()
    a = np.asarray(inp, dtype=complex).ravel()
    p, m = x.size, a.size
    Xb = np.repeat(x[:, None], p + m, axis=1)
    Ab = np.repeat(a[:, None], p + m, axis=1)
    for i in range(p):
        Xb[i, i] += 1j * _CS_H
    for j in range(m):
        Ab[j, p + j] += 1j * _CS_H
    out = rk4_step(model, Xb, Ab, dt)
    A = np.imag(out[:, :p]) / _CS_H
    B = np.imag(out[:, p:]) / _CS_H
    c = np.imag(rk4_step(model, x, a, dt + 1j * _CS_H)) / _CS_H
    return A, B, c


def is_steady(model: DynModel, state, tol: float = 1e-8):
    """Input witness making f(x, a) = 0, or None.

    Unicycle needs v = omega = 0; bicycle needs v = 0 (every position is
    a steady state at rest). A least-squares polish covers other kinds.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    x = np.asarray(state, dtype=float)
    if model.kind == UNICYCLE:
        if abs(x[2]) <= tol and abs(x[4]) <= tol:
            return np.zeros(2)
        return None
    if model.kind == BICYCLE:
        if abs(x[3]) <= tol:
            return np.zeros(2)
        return None
    a = np.zeros(model.input_dim)
    for _ in range(10):
        r = f(model, x, a)
        if np.linalg.norm(r) <= tol:
            return a
        _, B, _ = rk4_jacobians(model, x, a, 0.0)
        Jf = np.zeros((x.size, a.size))
        h = 1e-30
        ac = a.astype(complex)
        for i in range(a.size):
            av = ac.copy()
            av[i] += 1j * h
            Jf[:, i] = np.imag(f(model, x.astype(complex), av)) / h
        step, *_ = np.linalg.lstsq(Jf, -r, rcond=None)
        a = a + step
    return a if np.linalg.norm(f(model, x, a)) <= tol else None


def lift_position(model: DynModel, pos) -> np.ndarray:
    """Steady state sitting at a cartesian position (zero motion states)."""
    pos = np.asarray(pos, dtype=float).ravel()
    x = np.zeros(model.state_dim)
    x[:2] = pos
    return x


@dataclass(frozen=True)
class TerminalSet:
    """Return-set description used by the OCP terminal constraint.

    mode "fixed": the singleton {x_s}. mode "growing": steady states whose
    position clears the tightened pessimistic bound, with state and input
    boxes shrunk toward the interior by `box_shrink`. mode "steady_at":
    any steady state parked at a given position (heading free), used for
    synthesized point-to-point moves.
    """

    mode: str
    x_s: np.ndarray | None = None
    margin: float = 0.0  # lower-bound tightening for the growing mode
    box_shrink: float = 0.05

    def __post_init__(self):
        if self.mode not in ("fixed", "growing", "steady_at"):
            raise SpecError(f"unknown terminal mode {self.mode!r}")
        if self.mode in ("fixed", "steady_at"):
            if self.x_s is None:
                raise SpecError(f"{self.mode} terminal set needs an anchor")
            object.__setattr__(self, "x_s", np.asarray(self.x_s, dtype=float))

    def shrunk_state_box(self, model: DynModel) -> np.ndarray:
        box = model.state_box.copy()
        pad = self.box_shrink * (box[:, 1] - box[:, 0])
        box[:, 0] += pad
        box[:, 1] -= pad
        return box

    def shrunk_input_box(self, model: DynModel) -> np.ndarray:
        box = model.input_box.copy()
        pad = self.box_shrink * (box[:, 1] - box[:, 0])
        box[:, 0] += pad
        box[:, 1] -= pad
        return box

    def contains(self, model: DynModel, bounds, state, tol: float = 1e-8) -> bool:
        """Membership test (used by tests and the planner, not the OCP)."""
        x = np.asarray(state, dtype=float)
        if self.mode == "fixed":
            return bool(np.linalg.norm(x - self.x_s) <= max(tol, 1e-8))
        witness = is_steady(model, x, max(tol, 1e-8))
        if witness is None:
            return False
        sbox = self.shrunk_state_box(model)
        abox = self.shrunk_input_box(model)
        if np.any(x < sbox[:, 0] - tol) or np.any(x > sbox[:, 1] + tol):
            return False
        if np.any(witness < abox[:, 0] - tol) or np.any(witness > abox[:, 1] + tol):
            return False
        lo, _ = bounds.bounds(model.position_of(x))
        return lo >= self.margin - tol
