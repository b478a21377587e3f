"""Convex QP backend: operator-splitting with active-set polish.

Solves  min 1/2 x'Px + q'x  s.t.  l <= Ax <= u  with P PSD. Equality rows
use l = u. The iteration is the standard over-relaxed splitting on a
quasi-definite KKT system factorized once per problem; a polish solve on
the detected active set refines the answer to near machine precision.
Dual sign convention: stationarity is P x + q + A' y = 0, so an active
lower bound carries y < 0 (its textbook multiplier is -y).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import QpInfeasible, QpMaxIter


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str  # "solved" | "max_iter"
    iterations: int
    pri_res: float
    dua_res: float
    polished: bool = False
    wall_time: float = 0.0


@dataclass
class QpSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    eps_infeas: float = 1e-6
    max_iter: int = 20000
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    sigma: float = 1e-6
    alpha: float = 1.6
    check_every: int = 25
    polish: bool = True
    raise_on_max_iter: bool = True
    adaptive_rho: bool = True
    max_refactor: int = 6


def _ruiz_equilibrate(P, q, A, passes=3):
    """Symmetric Ruiz scaling of [[P, A'], [A, 0]] plus cost normalization."""
    n, m = P.shape[0], A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()
    for _ in range(passes):
        Pabs = np.abs(Ps)
        Aabs = np.abs(As)
        col_norm_p = Pabs.max(axis=0).toarray().ravel() if sp.issparse(Ps) else Pabs.max(axis=0)
        if m:
            col_norm_a = Aabs.max(axis=0).toarray().ravel() if sp.issparse(As) else Aabs.max(axis=0)
            row_norm_a = Aabs.max(axis=1).toarray().ravel() if sp.issparse(As) else Aabs.max(axis=1)
        else:
            col_norm_a = np.zeros(n)
            row_norm_a = np.zeros(0)
        dn = np.sqrt(np.maximum(np.maximum(col_norm_p, col_norm_a), 1e-12))
        en = np.sqrt(np.maximum(row_norm_a, 1e-12))
        Dn = sp.diags(1.0 / dn)
        En = sp.diags(1.0 / en)
        Ps = (Dn @ Ps @ Dn).tocsc()
        As = (En @ As @ Dn).tocsc()
        qs = qs / dn
        d /= dn
        e /= en
        # cost scaling keeps gradient magnitudes near unity
        gnorm = max(np.abs(Ps).max() if Ps.nnz else 0.0, np.abs(qs).max() if n else 0.0)
        if gnorm > 1e-12:
            cn = 1.0 / max(np.sqrt(gnorm), 1e-6)
        else:
            cn = 1.0
        Ps = Ps * cn
        qs = qs * cn
        c *= cn
    return Ps.tocsc(), qs, As.tocsc(), d, e, c


class QpWorkspace:
    """Reusable solver state for a fixed sparsity pattern."""

    def __init__(self, P, q, A, l, u, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self.P0 = sp.csc_matrix(P)
        self.A0 = sp.csc_matrix(A)
        self.q0 = np.asarray(q, dtype=float).ravel()
        self.l0 = np.asarray(l, dtype=float).ravel()
        self.u0 = np.asarray(u, dtype=float).ravel()
        self.n = self.P0.shape[0]
        self.m = self.A0.shape[0]
        if np.any(self.l0 > self.u0 + 1e-12):
            raise QpInfeasible("inconsistent bounds l > u")

        self.P, self.q, self.A, self.d, self.e, self.c = _ruiz_equilibrate(
            self.P0, self.q0, self.A0)
        # row scaling E = diag(e) maps constraints to E l <= E A D x_s <= E u
        self.l = self.l0 * self.e
        self.u = self.u0 * self.e

        s = self.settings
        eq = (self.u - self.l) < 1e-10
        self.rho = np.full(self.m, s.rho)
        self.rho[eq] = s.rho * s.rho_eq_scale
        self._factorize()

    def _factorize(self):
        s = self.settings
        kkt = sp.vstack([
            sp.hstack([self.P + s.sigma * sp.eye(self.n), self.A.T]),
            sp.hstack([self.A, -sp.diags(1.0 / self.rho)]),
        ]).tocsc()
        self.kkt = splu(kkt)

    def update_bounds(self, l, u) -> None:
        """Swap constraint bounds; the KKT factorization is unaffected."""
        self.l0 = np.asarray(l, dtype=float).ravel()
        self.u0 = np.asarray(u, dtype=float).ravel()
        if np.any(self.l0 > self.u0 + 1e-12):
            raise QpInfeasible("inconsistent bounds l > u")
        self.l = self.l0 * self.e
        self.u = self.u0 * self.e

    # -- main loop ---------------------------------------------------------

    def solve(self, warm=None) -> QpSolution:
        t0 = time.perf_counter()
        s = self.settings
        n, m = self.n, self.m
        if warm is not None:
            x = warm[0] / self.d
            y = warm[1] * self.c / self.e
            z = np.clip(self.A @ x, self.l, self.u)
        else:
            x = np.zeros(n)
            y = np.zeros(m)
            z = np.zeros(m)
        status = "max_iter"
        iters = s.max_iter
        pri = dua = np.inf
        refactors = 0
        x_chk, y_chk = x.copy(), y.copy()
        for k in range(1, s.max_iter + 1):
            rho, rho_inv = self.rho, 1.0 / self.rho
            rhs = np.concatenate([s.sigma * x - self.q, z - rho_inv * y])
            sol = self.kkt.solve(rhs)
            x_t = sol[:n]
            z_t = z + rho_inv * (sol[n:] - y)
            x = s.alpha * x_t + (1 - s.alpha) * x
            zrelax = s.alpha * z_t + (1 - s.alpha) * z
            z_new = np.clip(zrelax + rho_inv * y, self.l, self.u)
            y = y + rho * (zrelax - z_new)
            z = z_new
            if k % s.check_every == 0 or k == s.max_iter:
                pri, dua = self._residuals(x, y, z)
                eps_p, eps_d = self._eps_pri(x, z), self._eps_dua(x, y)
                if pri <= eps_p and dua <= eps_d:
                    status = "solved"
                    iters = k
                    break
                # deltas accumulated since the previous check carry far
                # better signal than single-iteration noise
                flag = self._certificates(x - x_chk, y - y_chk)
                x_chk, y_chk = x.copy(), y.copy()
                if flag:
                    raise QpInfeasible(f"{flag} infeasibility certificate found",
                                       certificate=flag)
                if s.adaptive_rho and refactors < s.max_refactor and self.m:
                    ratio = np.sqrt((pri / max(eps_p, 1e-30))
                                    / max(dua / max(eps_d, 1e-30), 1e-30))
                    if ratio > 5.0 or ratio < 0.2:
                        scale = float(np.clip(ratio, 1e-3, 1e3))
                        self.rho = np.clip(self.rho * scale, 1e-6, 1e6)
                        self._factorize()
                        refactors += 1
        x_u, y_u, z_u = self._unscale(x, y, z)
        pri_u, dua_u = self._residuals_unscaled(x_u, y_u, z_u)
        sol = QpSolution(x=x_u, y=y_u, z=z_u, status=status, iterations=iters,
                         pri_res=pri_u, dua_res=dua_u)
        if s.polish:
            self._polish(sol)
        sol.wall_time = time.perf_counter() - t0
        if sol.status != "solved" and s.raise_on_max_iter:
            raise QpMaxIter("QP hit iteration limit", best=sol)
        return sol

    # -- helpers -------------------------------------------------------------

    def _residuals(self, x, y, z):
        pri = np.max(np.abs(self.A @ x - z)) if self.m else 0.0
        dua = np.max(np.abs(self.P @ x + self.q + self.A.T @ y)) if self.n else 0.0
        return pri, dua

    def _eps_pri(self, x, z):
        s = self.settings
        sc = max(np.max(np.abs(self.A @ x)) if self.m else 0.0,
                 np.max(np.abs(z)) if self.m else 0.0)
        return s.eps_abs + s.eps_rel * sc

    def _eps_dua(self, x, y):
        s = self.settings
        sc = max(np.max(np.abs(self.P @ x)) if self.n else 0.0,
                 np.max(np.abs(self.A.T @ y)) if self.m else 0.0,
                 np.max(np.abs(self.q)) if self.n else 0.0)
        return s.eps_abs + s.eps_rel * sc

    def _certificates(self, dx, dy):
        """Primal/dual infeasibility checks on unscaled data (vectorized)."""
        s = self.settings
        dx_u = dx * self.d
        dy_u = dy * self.e / self.c
        ninf = np.max(np.abs(dy_u)) if self.m else 0.0
        if ninf > 1e-9:
            dyn = dy_u / ninf
            pos = np.maximum(dyn, 0.0)
            neg = np.minimum(dyn, 0.0)
            u_inf = ~np.isfinite(self.u0)
            l_inf = ~np.isfinite(self.l0)
            ok = not (np.any(u_inf & (pos > s.eps_infeas))
                      or np.any(l_inf & (neg < -s.eps_infeas)))
            if ok:
                atd = np.max(np.abs(self.A0.T @ dyn))
                support = (np.sum(np.where(u_inf, 0.0, self.u0) * pos)
                           + np.sum(np.where(l_inf, 0.0, self.l0) * neg))
                if atd <= s.eps_infeas and support <= -s.eps_infeas:
                    return "primal"
        nx = np.max(np.abs(dx_u)) if self.n else 0.0
        if nx > 1e-9:
            dxn = dx_u / nx
            if (np.max(np.abs(self.P0 @ dxn)) <= s.eps_infeas
                    and self.q0 @ dxn <= -s.eps_infeas):
                Adx = self.A0 @ dxn
                ok = not (np.any(np.isfinite(self.u0) & (Adx > s.eps_infeas))
                          or np.any(np.isfinite(self.l0) & (Adx < -s.eps_infeas)))
                if ok:
                    return "dual"
        return None

    def _unscale(self, x, y, z):
        return x * self.d, y * self.e / self.c, z / self.e

    def _residuals_unscaled(self, x, y, z):
        pri = np.max(np.abs(self.A0 @ x - z)) if self.m else 0.0
        dua = np.max(np.abs(self.P0 @ x + self.q0 + self.A0.T @ y)) if self.n else 0.0
        return pri, dua

    def _polish(self, sol: QpSolution, act_tol=1e-7, max_passes=10):
        """Active-set refinement seeded by the splitting solution.

        Solves the equality-KKT on the guessed working set, then drops
        wrong-sign rows and adds violated ones until the KKT conditions
        are clean or the pass budget runs out. Accepted only when it
        strictly improves the residuals.
        """
        if self.m == 0:
            return
        z = sol.z
        low_act = ((z - self.l0 < act_tol * np.maximum(1.0, np.abs(self.l0)))
                   & np.isfinite(self.l0))
        upp_act = ((self.u0 - z < act_tol * np.maximum(1.0, np.abs(self.u0)))
                   & np.isfinite(self.u0))
        upp_act &= ~low_act
        eq = np.isfinite(self.l0) & np.isfinite(self.u0) & ((self.u0 - self.l0) < 1e-12)
        low_act |= eq
        upp_act &= ~eq
        reg = 1e-9
        for _ in range(max_passes):
            rows = np.flatnonzero(low_act | upp_act)
            Aact = self.A0[rows] if rows.size else sp.csc_matrix((0, self.n))
            b = np.where(low_act[rows], self.l0[rows], self.u0[rows])
            kkt = sp.vstack([
                sp.hstack([self.P0 + reg * sp.eye(self.n), Aact.T]),
                sp.hstack([Aact, -reg * sp.eye(rows.size)]),
            ]).tocsc()
            try:
                lu = splu(kkt)
            except RuntimeError:
                return
            rhs = np.concatenate([-self.q0, b])
            t = lu.solve(rhs)
            for _ in range(1):
                resid = rhs - np.concatenate([
                    self.P0 @ t[:self.n] + Aact.T @ t[self.n:],
                    Aact @ t[:self.n],
                ])
                t = t + lu.solve(resid)
            x_new = t[:self.n]
            y_new = np.zeros(self.m)
            y_new[rows] = t[self.n:]
            Ax = self.A0 @ x_new
            # wrong-sign duals leave the working set (never the equalities)
            drop_low = low_act & ~eq & (y_new > act_tol)
            drop_upp = upp_act & (y_new < -act_tol)
            # violated inactive rows join at the violated side
            add_low = ~(low_act | upp_act) & np.isfinite(self.l0) & (Ax < self.l0 - act_tol)
            add_upp = ~(low_act | upp_act) & np.isfinite(self.u0) & (Ax > self.u0 + act_tol)
            if not (drop_low.any() or drop_upp.any() or add_low.any() or add_upp.any()):
                pri = max(np.max(np.maximum(self.l0 - Ax, 0.0)),
                          np.max(np.maximum(Ax - self.u0, 0.0)))
                dua = np.max(np.abs(self.P0 @ x_new + self.q0 + self.A0.T @ y_new))
                if max(pri, dua) <= max(sol.pri_res, sol.dua_res) + 1e-12:
                    sol.x, sol.y = x_new, y_new
                    sol.z = np.clip(Ax, self.l0, self.u0)
                    sol.pri_res, sol.dua_res = pri, dua
                    sol.polished = True
                    if max(pri, dua) < 1e-6:
                        sol.status = "solved"
                return
            low_act = (low_act & ~drop_low) | add_low
            upp_act = (upp_act & ~drop_upp) | add_upp
            upp_act &= ~low_act


def qp_solve(P, q, A, l, u, settings: QpSettings | None = None, warm=None) -> QpSolution:
    """One-shot convex QP solve; see QpWorkspace for the conventions."""
    return QpWorkspace(P, q, A, l, u, settings).solve(warm=warm)
