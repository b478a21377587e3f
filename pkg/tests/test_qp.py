"""QP backend tests against projected-gradient and dense KKT oracles."""

import numpy as np
import pytest
import scipy.sparse as sp

from sagexp.errors import QpInfeasible
from sagexp.qp import QpSettings, QpWorkspace, qp_solve


def projected_gradient_oracle(P, q, lo, hi, iters=300000, tol=1e-12):
    """Slow projected gradient for box-constrained QPs.

    Deliberately naive: fixed step from the Lipschitz constant of the
    gradient, projection onto the box each sweep.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    L = np.linalg.eigvalsh(P).max()
    step = 1.0 / max(L, 1e-12)
    x = np.clip(np.zeros_like(q), lo, hi)
    for _ in range(iters):
        g = P @ x + q
        x_new = np.clip(x - step * g, lo, hi)
        if np.max(np.abs(x_new - x)) < tol:
            return x_new
        x = x_new
    return x


def dense_kkt_oracle(P, q, A, b):
    """Equality-constrained QP via one dense saddle-point solve."""
    n, m = len(q), len(b)
    kkt = np.block([[P, A.T], [A, np.zeros((m, m))]])
    sol = np.linalg.solve(kkt, np.concatenate([-q, b]))
    return sol[:n], sol[n:]


class TestTextbook:
    def test_scalar_lower_bound(self):
        # min 1/2 x^2 s.t. x >= 1  ->  x = 1, textbook multiplier 1.
        sol = qp_solve(np.array([[1.0]]), np.array([0.0]),
                       np.array([[1.0]]), np.array([1.0]), np.array([np.inf]))
        assert abs(sol.x[0] - 1.0) < 1e-8
        assert abs(-sol.y[0] - 1.0) < 1e-8  # active lower bound: y = -lambda

    def test_unconstrained_quadratic(self):
        P = np.array([[2.0, 0.5], [0.5, 1.0]])
        q = np.array([1.0, -2.0])
        sol = qp_solve(P, q, sp.csc_matrix((0, 2)), np.zeros(0), np.zeros(0))
        assert np.allclose(sol.x, np.linalg.solve(P, -q), atol=1e-7)

    def test_equality_only_matches_dense_kkt(self):
        rng = np.random.default_rng(0)
        n, m = 8, 3
        M = rng.normal(size=(n, n))
        P = M @ M.T + np.eye(n)
        q = rng.normal(size=n)
        A = rng.normal(size=(m, n))
        b = rng.normal(size=m)
        sol = qp_solve(P, q, A, b, b)
        ox, oy = dense_kkt_oracle(P, q, A, b)
        assert np.allclose(sol.x, ox, atol=1e-6)
        assert np.allclose(sol.y, oy, atol=1e-5)


class TestBoxQp:
    @pytest.mark.parametrize("seed", range(4))
    def test_random_box_qp_matches_projected_gradient(self, seed):
        rng = np.random.default_rng(seed)
        n = 10
        M = rng.normal(size=(n, n))
        P = M @ M.T + 0.5 * np.eye(n)
        q = rng.normal(size=n) * 2
        lo = -rng.uniform(0.1, 1.0, size=n)
        hi = rng.uniform(0.1, 1.0, size=n)
        sol = qp_solve(P, q, np.eye(n), lo, hi)
        ox = projected_gradient_oracle(P, q, lo, hi)
        assert np.max(np.abs(sol.x - ox)) < 1e-5

    def test_mixed_rows_feasible(self):
        # Box plus a coupling inequality; verify KKT residuals directly.
        P = np.diag([1.0, 2.0, 0.5])
        q = np.array([-1.0, 0.3, 2.0])
        A = np.vstack([np.eye(3), np.array([[1.0, 1.0, 1.0]])])
        lo = np.array([-1, -1, -1, -np.inf])
        hi = np.array([1, 1, 1, 0.5])
        sol = qp_solve(P, q, A, lo, hi)
        assert sol.pri_res < 1e-7
        assert sol.dua_res < 1e-6
        assert np.all(A @ sol.x <= hi + 1e-7)
        assert np.all(A @ sol.x >= lo - 1e-7)


class TestInfeasibility:
    def test_contradictory_rows_raise(self):
        # x >= 1 and x <= -1 simultaneously.
        P = np.array([[1.0]])
        q = np.array([0.0])
        A = np.array([[1.0], [1.0]])
        lo = np.array([1.0, -np.inf])
        hi = np.array([np.inf, -1.0])
        with pytest.raises(QpInfeasible):
            qp_solve(P, q, A, lo, hi)

    def test_crossed_bounds_raise_immediately(self):
        with pytest.raises(QpInfeasible):
            qp_solve(np.eye(1), np.zeros(1), np.eye(1),
                     np.array([2.0]), np.array([1.0]))

    def test_unbounded_direction_flagged_dual(self):
        # min -x with x >= 0 only: dual infeasible (unbounded below).
        P = np.zeros((1, 1))
        q = np.array([-1.0])
        A = np.array([[1.0]])
        with pytest.raises(QpInfeasible) as exc:
            qp_solve(P, q, A, np.array([0.0]), np.array([np.inf]))
        assert exc.value.certificate == "dual"


class TestDeterminismAndWarm:
    def test_identical_inputs_identical_outputs(self):
        rng = np.random.default_rng(11)
        n = 12
        M = rng.normal(size=(n, n))
        P = M @ M.T + np.eye(n)
        q = rng.normal(size=n)
        A = np.vstack([np.eye(n), rng.normal(size=(4, n))])
        lo = np.concatenate([-np.ones(n), -np.ones(4)])
        hi = np.concatenate([np.ones(n), np.ones(4)])
        a = qp_solve(P, q, A, lo, hi)
        b = qp_solve(P, q, A, lo, hi)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.y, b.y)

    def test_warm_start_converges_faster(self):
        rng = np.random.default_rng(21)
        n = 30
        M = rng.normal(size=(n, n))
        P = sp.csc_matrix(M @ M.T + np.eye(n))
        q = rng.normal(size=n)
        A = sp.vstack([sp.eye(n), sp.csc_matrix(rng.normal(size=(6, n)))]).tocsc()
        lo = np.concatenate([-np.ones(n), -2 * np.ones(6)])
        hi = np.concatenate([np.ones(n), 2 * np.ones(6)])
        ws = QpWorkspace(P, q, A, lo, hi, QpSettings(polish=False))
        cold = ws.solve()
        ws2 = QpWorkspace(P, q, A, lo, hi, QpSettings(polish=False))
        warm = ws2.solve(warm=(cold.x, cold.y))
        assert warm.iterations <= cold.iterations
        assert np.max(np.abs(warm.x - cold.x)) < 1e-5
