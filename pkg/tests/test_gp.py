"""GP posterior, update, and kernel tests against dense linear-algebra oracles."""

import math

import numpy as np
import pytest

from sagexp.errors import DomainError, NonPositiveDefinite
from sagexp.gp import Bump, GpModel, Kernel, PriorMean


def dense_posterior_oracle(kernel, mean_fn, noise_std, X, y, Q):
    """Straightforward dense solve of the posterior equations.

    Independent of the package's Cholesky path: builds the Gram matrix
    explicitly and uses numpy.linalg.solve.
    """
    K = kernel(X, X) + noise_std**2 * np.eye(len(X))
    Kinv_y = np.linalg.solve(K, y - mean_fn(X))
    Kqx = kernel(Q, X)
    mean = mean_fn(Q) + Kqx @ Kinv_y
    cov = kernel(Q, Q) - Kqx @ np.linalg.solve(K, Kqx.T)
    return mean, np.sqrt(np.maximum(np.diag(cov), 0.0))


def make_model(family="se", ls=1.0, sv=1.0, noise=0.1, mean=0.0):
    kern = Kernel(family=family, lengthscale=(ls, ls), signal_variance=sv)
    return GpModel(kern, PriorMean(constant=mean), noise)


class TestKernel:
    @pytest.mark.parametrize("family", ["se", "matern52"])
    def test_diagonal_equals_signal_variance(self, family):
        kern = Kernel(family, (0.7, 1.3), 2.5)
        pts = np.random.default_rng(0).uniform(-2, 2, size=(6, 2))
        K = kern(pts, pts)
        assert np.allclose(np.diag(K), 2.5)

    @pytest.mark.parametrize("family", ["se", "matern52"])
    def test_symmetry_and_psd(self, family):
        rng = np.random.default_rng(1)
        kern = Kernel(family, (0.5, 0.9), 1.7)
        pts = rng.uniform(-3, 3, size=(15, 2))
        K = kern(pts, pts)
        assert np.allclose(K, K.T, atol=1e-12)
        eig = np.linalg.eigvalsh(K)
        assert eig.min() >= -1e-8 * 1.7

    @pytest.mark.parametrize("family", ["se", "matern52"])
    def test_grad_matches_finite_differences(self, family):
        kern = Kernel(family, (0.6, 1.1), 0.8)
        B = np.array([[0.3, -0.4], [1.0, 2.0], [-0.7, 0.2]])
        x = np.array([0.1, 0.5])
        g = kern.grad_x(x, B)
        h = 1e-6
        for d in range(2):
            e = np.zeros(2)
            e[d] = h
            fd = (kern((x + e).reshape(1, -1), B) - kern((x - e).reshape(1, -1), B)) / (2 * h)
            assert np.allclose(g[:, d], fd[0], atol=1e-6)


class TestPosterior:
    def test_empty_model_returns_prior(self):
        model = make_model(sv=2.0, mean=0.7)
        Q = np.array([[0.0, 0.0], [1.0, -3.0]])
        mean, std = model.posterior(Q)
        assert np.allclose(mean, 0.7)
        assert np.allclose(std, math.sqrt(2.0))

    def test_noiseless_interpolates_datum(self):
        model = make_model(noise=1e-12)
        model = model.update([0.5, -0.2], 1.3)
        mean, std = model.posterior([[0.5, -0.2]])
        assert abs(mean[0] - 1.3) < 1e-6
        assert std[0] <= 1e-4

    def test_two_point_matches_dense_oracle(self):
        kern = Kernel("se", (1.0, 1.0), 1.0)
        model = GpModel(kern, PriorMean(), 0.3)
        X = np.array([[0.0, 0.0], [1.0, 0.5]])
        y = np.array([0.8, -0.4])
        for xi, yi in zip(X, y):
            model = model.update(xi, yi)
        Q = np.array([[0.2, 0.2], [2.0, -1.0], [0.0, 0.0]])
        mean, std = model.posterior(Q)
        om, os_ = dense_posterior_oracle(kern, PriorMean(), 0.3, X, y, Q)
        assert np.allclose(mean, om, atol=1e-10)
        assert np.allclose(std, os_, atol=1e-10)

    @pytest.mark.parametrize("family", ["se", "matern52"])
    def test_random_instances_match_oracle(self, family):
        rng = np.random.default_rng(7)
        kern = Kernel(family, (0.8, 1.2), 1.5)
        pm = PriorMean(constant=0.3, bumps=(Bump((0.0, 0.0), 1.0, 0.5),))
        for _ in range(5):
            n = rng.integers(1, 8)
            X = rng.uniform(-2, 2, size=(n, 2))
            y = rng.normal(size=n)
            model = GpModel(kern, pm, 0.15, X, y)
            Q = rng.uniform(-2, 2, size=(4, 2))
            mean, std = model.posterior(Q)
            om, os_ = dense_posterior_oracle(kern, pm, 0.15, X, y, Q)
            assert np.allclose(mean, om, atol=1e-9)
            assert np.allclose(std, os_, atol=1e-9)

    def test_variance_bounded_by_prior(self):
        rng = np.random.default_rng(3)
        model = make_model(sv=1.3, noise=0.05)
        for _ in range(12):
            model = model.update(rng.uniform(-1, 1, size=2), rng.normal())
        _, std = model.posterior(rng.uniform(-1, 1, size=(50, 2)))
        assert np.all(std**2 <= 1.3 + 1e-8)
        assert np.all(std**2 >= 0.0)

    def test_duplicate_noiseless_data_rescued_by_jitter(self):
        # Rank-deficient Gram stays PSD, so the jitter path must cope.
        model = make_model(noise=0.0)
        for _ in range(3):
            model = model.update([0.0, 0.0], 1.0)
        mean, std = model.posterior([[0.0, 0.0]])
        assert abs(mean[0] - 1.0) < 1e-4
        assert std[0] < 1e-4

    def test_indefinite_matrix_raises_with_diagnostics(self):
        from sagexp.gp import cholesky_with_jitter

        bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3, -1
        with pytest.raises(NonPositiveDefinite) as exc:
            cholesky_with_jitter(bad, 1e-10)
        assert exc.value.diagnostics["eig_min"] < 0
        assert "cond" in exc.value.diagnostics

    def test_posterior_grad_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        model = make_model(family="matern52", ls=0.7, sv=0.9, noise=0.1, mean=0.2)
        for _ in range(6):
            model = model.update(rng.uniform(-1, 1, size=2), rng.normal())
        x = np.array([0.25, -0.3])
        mean, std, dmean, dstd = model.posterior_grad(x)
        h = 1e-6
        for d in range(2):
            e = np.zeros(2)
            e[d] = h
            mp, sp = model.posterior((x + e).reshape(1, -1))
            mm, sm = model.posterior((x - e).reshape(1, -1))
            assert abs(dmean[d] - (mp[0] - mm[0]) / (2 * h)) < 1e-5
            assert abs(dstd[d] - (sp[0] - sm[0]) / (2 * h)) < 1e-5


class TestUpdate:
    def test_far_point_barely_moves(self):
        # SE covariance at 10 lengthscales is exp(-50) ~ 2e-22.
        model = make_model(noise=0.1)
        far = np.array([[10.0, 0.0]])
        m0, s0 = model.posterior(far)
        model = model.update([0.0, 0.0], 2.0)
        m1, s1 = model.posterior(far)
        assert abs(m1[0] - m0[0]) <= 1e-6
        assert abs(s1[0] - s0[0]) <= 1e-6

    def test_repeated_update_shrinks_std(self):
        model = make_model(noise=0.1)
        x = np.array([0.3, 0.3])
        prev = model.posterior([x])[1][0]
        for _ in range(4):
            model = model.update(x, 0.5)
            cur = model.posterior([x])[1][0]
            assert cur < prev
            prev = cur

    def test_update_order_permutation_invariant(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(-1, 1, size=(5, 2))
        y = rng.normal(size=5)
        Q = rng.uniform(-1, 1, size=(6, 2))
        base = make_model(noise=0.2)
        m1 = base
        for xi, yi in zip(X, y):
            m1 = m1.update(xi, yi)
        perm = [3, 0, 4, 1, 2]
        m2 = base
        for i in perm:
            m2 = m2.update(X[i], y[i])
        a_mean, a_std = m1.posterior(Q)
        b_mean, b_std = m2.posterior(Q)
        assert np.allclose(a_mean, b_mean, atol=1e-8)
        assert np.allclose(a_std, b_std, atol=1e-8)

    def test_update_never_inflates_variance(self):
        rng = np.random.default_rng(9)
        model = make_model(noise=0.05)
        Q = rng.uniform(-1, 1, size=(30, 2))
        _, prev = model.posterior(Q)
        for _ in range(10):
            model = model.update(rng.uniform(-1, 1, size=2), rng.normal())
            _, cur = model.posterior(Q)
            assert np.all(cur**2 <= prev**2 + 1e-8)
            prev = cur

    def test_rejects_nonfinite_observation(self):
        model = make_model()
        with pytest.raises(DomainError):
            model.update([0.0, 0.0], float("nan"))
