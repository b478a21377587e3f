"""Gaussian-process model of the unknown constraint field.

Exact posterior via dense Cholesky, monotone confidence envelopes with a
grid memo, the theoretical confidence scaling, and information-theoretic
diagnostics (mutual information, greedy capacity estimate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .errors import BetaUnavailable, DomainError, NonPositiveDefinite

_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class Kernel:
    """Stationary covariance function over position space.

    Parameters
    ----------
    family : str
        "se" (squared exponential) or "matern52".
    lengthscale : array-like
        Positive lengthscale per input dimension.
    signal_variance : float
        Marginal variance k(x, x).
    """

    family: str
    lengthscale: tuple
    signal_variance: float

    def __post_init__(self):
        if self.family not in ("se", "matern52"):
            raise DomainError(f"unknown kernel family {self.family!r}")
        ls = np.atleast_1d(np.asarray(self.lengthscale, dtype=float))
        if np.any(ls <= 0):
            raise DomainError("lengthscale must be positive")
        if self.signal_variance <= 0:
            raise DomainError("signal_variance must be positive")
        object.__setattr__(self, "lengthscale", tuple(ls.tolist()))

    @property
    def ls(self) -> np.ndarray:
        return np.asarray(self.lengthscale, dtype=float)

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Cross-covariance matrix between row sets A (n,d) and B (m,d)."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        diff = (A[:, None, :] - B[None, :, :]) / self.ls
        r2 = np.sum(diff * diff, axis=-1)
        if self.family == "se":
            return self.signal_variance * np.exp(-0.5 * r2)
        r = np.sqrt(np.maximum(r2, 0.0))
        return (
            self.signal_variance
            * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2)
            * np.exp(-_SQRT5 * r)
        )

    def grad_x(self, x: np.ndarray, B: np.ndarray) -> np.ndarray:
        """d k(x, b) / d x for each row b of B; shape (m, d)."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        B = np.atleast_2d(np.asarray(B, dtype=float))
        ls2 = self.ls**2
        diff = x - B  # (m, d)
        if self.family == "se":
            k = self(x, B)[0]  # (m,)
            return -k[:, None] * diff / ls2
        scaled = diff / self.ls
        r = np.sqrt(np.maximum(np.sum(scaled * scaled, axis=-1), 0.0))
        # dk/dr = -(5/3) sv r (1 + sqrt5 r) e^{-sqrt5 r}; dr/dx = diff / (ls^2 r)
        coef = -(5.0 / 3.0) * self.signal_variance * (1.0 + _SQRT5 * r) * np.exp(-_SQRT5 * r)
        return coef[:, None] * diff / ls2


@dataclass(frozen=True)
class Bump:
    """Gaussian bump used as a prior-mean component."""

    center: tuple
    height: float
    radius: float


@dataclass(frozen=True)
class PriorMean:
    """Constant plus a fixed sum of Gaussian bumps."""

    constant: float = 0.0
    bumps: tuple = ()

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(X.shape[0], self.constant, dtype=float)
        for b in self.bumps:
            d2 = np.sum((X - np.asarray(b.center)) ** 2, axis=1)
            out += b.height * np.exp(-0.5 * d2 / b.radius**2)
        return out

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        g = np.zeros_like(x)
        for b in self.bumps:
            d = x - np.asarray(b.center)
            g += b.height * np.exp(-0.5 * np.dot(d, d) / b.radius**2) * (-d / b.radius**2)
        return g


def cholesky_with_jitter(base: np.ndarray, jitter: float):
    """Lower Cholesky of base + jitter*I with a single x100 escalation.

    Raises NonPositiveDefinite with condition diagnostics when both
    attempts fail.
    """
    n = base.shape[0]
    if n == 0:
        return np.zeros((0, 0)), jitter
    for jit in (jitter, jitter * 100.0):
        try:
            return cholesky(base + jit * np.eye(n), lower=True), jit
        except np.linalg.LinAlgError:
            continue
    diag = np.diag(base)
    eigs = np.linalg.eigvalsh(base)
    raise NonPositiveDefinite(
        "Gram matrix not positive definite after jitter escalation",
        diagnostics={
            "n": n,
            "jitter_final": jitter * 100.0,
            "diag_min": float(diag.min()),
            "diag_max": float(diag.max()),
            "eig_min": float(eigs.min()),
            "cond": float(eigs.max() / max(abs(eigs.min()), 1e-300)),
        },
    )


class GpModel:
    """Immutable exact GP over the scalar constraint field.

    `update` returns a new model; the Cholesky factor is cached lazily
    per instance so repeated posterior queries are cheap.
    """

    def __init__(self, kernel: Kernel, prior_mean: PriorMean, noise_std: float,
                 X=None, y=None):
        if noise_std < 0:
            raise DomainError("noise_std must be >= 0")
        self.kernel = kernel
        self.prior_mean = prior_mean
        self.noise_std = float(noise_std)
        self.X = np.zeros((0, 2)) if X is None else np.atleast_2d(np.asarray(X, dtype=float)).copy()
        self.y = np.zeros(0) if y is None else np.asarray(y, dtype=float).ravel().copy()
        if self.X.shape[0] != self.y.shape[0]:
            raise DomainError("X and y must have matching first dimension")
        self._fact = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def update(self, x, y: float) -> "GpModel":
        """Return a new model with one more observation appended."""
        if not np.isfinite(y):
            raise DomainError("observation must be finite")
        x = np.asarray(x, dtype=float).reshape(1, -1)
        X = x if self.n == 0 else np.vstack([self.X, x])
        ynew = np.append(self.y, float(y))
        return GpModel(self.kernel, self.prior_mean, self.noise_std, X, ynew)

    # -- factorization ---------------------------------------------------

    def _factorize(self):
        if self._fact is not None:
            return self._fact
        n = self.n
        K = self.kernel(self.X, self.X) if n else np.zeros((0, 0))
        base = K + self.noise_std**2 * np.eye(n)
        L, jit = cholesky_with_jitter(base, 1e-10 * self.kernel.signal_variance)
        resid = self.y - self.prior_mean(self.X) if n else np.zeros(0)
        alpha = cho_solve((L, True), resid) if n else np.zeros(0)
        self._fact = (L, alpha, jit)
        return self._fact

    # -- posterior -------------------------------------------------------

    def posterior(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation at the query rows."""
        Q = np.atleast_2d(np.asarray(queries, dtype=float))
        if not np.all(np.isfinite(Q)):
            raise DomainError("queries must be finite")
        sv = self.kernel.signal_variance
        mean_prior = self.prior_mean(Q)
        if self.n == 0:
            return mean_prior, np.full(Q.shape[0], math.sqrt(sv))
        L, alpha, _ = self._factorize()
        Kqx = self.kernel(Q, self.X)
        mean = mean_prior + Kqx @ alpha
        V = solve_triangular(L, Kqx.T, lower=True)
        var = np.maximum(sv - np.sum(V * V, axis=0), 0.0)
        return mean, np.sqrt(var)

    def posterior_grad(self, x) -> tuple[float, float, np.ndarray, np.ndarray]:
        """Value and analytic position-gradient of posterior mean and std.

        Returns (mean, std, dmean_dx, dstd_dx). The std gradient is clamped
        near zero variance to avoid division blow-up.
        """
        x = np.asarray(x, dtype=float).ravel()
        mp = self.prior_mean(x.reshape(1, -1))[0]
        gp = self.prior_mean.grad(x)
        sv = self.kernel.signal_variance
        if self.n == 0:
            return mp, math.sqrt(sv), gp, np.zeros_like(x)
        L, alpha, _ = self._factorize()
        kq = self.kernel(x.reshape(1, -1), self.X)[0]  # (n,)
        G = self.kernel.grad_x(x, self.X)  # (n, d)
        mean = mp + kq @ alpha
        dmean = gp + G.T @ alpha
        w = cho_solve((L, True), kq)
        var = max(sv - kq @ w, 0.0)
        std = math.sqrt(var)
        dvar = -2.0 * (G.T @ w)
        dstd = dvar / (2.0 * max(std, 1e-12))
        return mean, std, dmean, dstd


def beta_theoretical(B_q: float, noise_std: float, p: float, gamma_hat: float) -> float:
    """Confidence scaling sqrt(beta_n) from the RKHS-norm bound."""
    if not (0.0 < p < 1.0):
        raise DomainError("p must lie in (0, 1)")
    if B_q <= 0 or noise_std < 0 or gamma_hat < 0:
        raise DomainError("B_q > 0, noise_std >= 0, gamma_hat >= 0 required")
    return B_q + 4.0 * noise_std * math.sqrt(gamma_hat + 1.0 + math.log(1.0 / p))


@dataclass
class BetaSchedule:
    """Fixed or theoretical sqrt(beta) per round."""

    mode: str = "fixed"  # "fixed" | "theoretical"
    sqrt_beta: float = 3.0
    B_q: float = 1.0
    p: float = 0.05
    noise_std: float = 0.0
    gamma_provider: object = None  # callable n -> gamma_hat_n

    def value(self, n: int) -> float:
        if self.mode == "fixed":
            return self.sqrt_beta
        if self.mode == "theoretical":
            if self.gamma_provider is None:
                raise BetaUnavailable("theoretical beta requires a gamma estimate")
            return beta_theoretical(self.B_q, self.noise_std, self.p,
                                    float(self.gamma_provider(n)))
        raise DomainError(f"unknown beta mode {self.mode!r}")


@dataclass(frozen=True)
class GridSpec:
    """Cell-centered raster over an axis-aligned position box."""

    origin: tuple  # lower corner (x, y)
    spacing: tuple  # cell size per axis
    dims: tuple  # (nx, ny)

    @classmethod
    def cover(cls, box, dims) -> "GridSpec":
        box = np.asarray(box, dtype=float)
        nx, ny = dims
        sx = (box[0, 1] - box[0, 0]) / nx
        sy = (box[1, 1] - box[1, 0]) / ny
        return cls(origin=(box[0, 0], box[1, 0]), spacing=(sx, sy), dims=(nx, ny))

    @property
    def shape(self) -> tuple:
        return (self.dims[1], self.dims[0])  # (rows=y, cols=x)

    def centers(self) -> np.ndarray:
        """All cell centers, row-major over (y, x); shape (nx*ny, 2)."""
        nx, ny = self.dims
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.spacing[0]
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.spacing[1]
        XX, YY = np.meshgrid(xs, ys)
        return np.column_stack([XX.ravel(), YY.ravel()])

    def cell_of(self, pos) -> tuple:
        """(iy, ix) of the cell containing pos, clipped to the grid."""
        pos = np.asarray(pos, dtype=float).ravel()
        ix = int(np.clip((pos[0] - self.origin[0]) / self.spacing[0], 0, self.dims[0] - 1))
        iy = int(np.clip((pos[1] - self.origin[1]) / self.spacing[1], 0, self.dims[1] - 1))
        return iy, ix

    def cell_area(self) -> float:
        return self.spacing[0] * self.spacing[1]


class _Bilinear:
    """Bilinear interpolation over the cell-center lattice, clamped at edges."""

    def __init__(self, grid: GridSpec, values: np.ndarray):
        self.grid = grid
        self.values = values.reshape(grid.shape)

    def value_and_grad(self, pos):
        g = self.grid
        nx, ny = g.dims
        fx = (pos[0] - g.origin[0]) / g.spacing[0] - 0.5
        fy = (pos[1] - g.origin[1]) / g.spacing[1] - 0.5
        ix = int(np.clip(np.floor(fx), 0, nx - 2)) if nx > 1 else 0
        iy = int(np.clip(np.floor(fy), 0, ny - 2)) if ny > 1 else 0
        tx = np.clip(fx - ix, 0.0, 1.0) if nx > 1 else 0.0
        ty = np.clip(fy - iy, 0.0, 1.0) if ny > 1 else 0.0
        v = self.values
        v00 = v[iy, ix]
        v10 = v[iy, ix + 1] if nx > 1 else v00
        v01 = v[iy + 1, ix] if ny > 1 else v00
        v11 = v[iy + 1, ix + 1] if nx > 1 and ny > 1 else v00
        val = (v00 * (1 - tx) * (1 - ty) + v10 * tx * (1 - ty)
               + v01 * (1 - tx) * ty + v11 * tx * ty)
        dx = ((v10 - v00) * (1 - ty) + (v11 - v01) * ty) / g.spacing[0] if nx > 1 else 0.0
        dy = ((v01 - v00) * (1 - tx) + (v11 - v10) * tx) / g.spacing[1] if ny > 1 else 0.0
        return float(val), np.array([dx, dy])


class ConfBounds:
    """Monotone confidence envelopes built round by round.

    Round n uses the posterior after n-1 samples with scaling sqrt(beta_n),
    intersected with the round n-1 envelope. The intersection is memoized
    exactly on a fixed grid plus a bounded LRU of ad-hoc query points;
    off-grid evaluations combine the raw interval with bilinear
    interpolation of the grid memo.
    """

    def __init__(self, beta: BetaSchedule, grid: GridSpec, lru_capacity: int = 4096):
        self.beta = beta
        self.grid = grid
        self.lru_capacity = int(lru_capacity)
        self.n = 0
        self.model_prev: GpModel | None = None
        self.sqrt_beta = float("nan")
        self.grid_l: np.ndarray | None = None
        self.grid_u: np.ndarray | None = None
        self._interp_l = None
        self._interp_u = None
        self._lru: dict = {}

    def advance(self, model_prev: GpModel) -> None:
        """Start round n+1 from the posterior holding n samples."""
        self.n += 1
        self.model_prev = model_prev
        self.sqrt_beta = self.beta.value(self.n)
        pts = self.grid.centers()
        mean, std = model_prev.posterior(pts)
        raw_l = mean - self.sqrt_beta * std
        raw_u = mean + self.sqrt_beta * std
        if self.grid_l is None:
            self.grid_l, self.grid_u = raw_l, raw_u
        else:
            self.grid_l = np.maximum(self.grid_l, raw_l)
            self.grid_u = np.minimum(self.grid_u, raw_u)
        self._interp_l = _Bilinear(self.grid, self.grid_l)
        self._interp_u = _Bilinear(self.grid, self.grid_u)

    def _require_ready(self):
        if self.model_prev is None:
            raise BetaUnavailable("ConfBounds.advance must be called before queries")

    # -- vector evaluation (raster / metrics path) -----------------------

    def raw(self, X) -> tuple[np.ndarray, np.ndarray]:
        self._require_ready()
        mean, std = self.model_prev.posterior(X)
        return mean - self.sqrt_beta * std, mean + self.sqrt_beta * std

    def envelope(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Raw interval intersected with the interpolated grid memo."""
        self._require_ready()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo, hi = self.raw(X)
        for i, p in enumerate(X):
            li, _ = self._interp_l.value_and_grad(p)
            ui, _ = self._interp_u.value_and_grad(p)
            lo[i] = max(lo[i], li)
            hi[i] = min(hi[i], ui)
        return lo, hi

    # -- memoized point query (the per-point monotone construction) ------

    def bounds(self, x) -> tuple[float, float]:
        """Monotone (l, u) at x, memoized in the LRU across rounds."""
        self._require_ready()
        key = tuple(np.asarray(x, dtype=float).ravel().tolist())
        entry = self._lru.pop(key, None)
        if entry is not None and entry[2] == self.n:
            self._lru[key] = entry
            return entry[0], entry[1]
        lo_raw, hi_raw = self.raw(np.asarray(key).reshape(1, -1))
        lo, hi = float(lo_raw[0]), float(hi_raw[0])
        if entry is not None:
            lo, hi = max(entry[0], lo), min(entry[1], hi)
        self._lru[key] = (lo, hi, self.n)
        if len(self._lru) > self.lru_capacity:
            self._lru.pop(next(iter(self._lru)))
        return lo, hi

    # -- differentiable scalar evaluation (solver path) ------------------

    def lower_vg(self, pos) -> tuple[float, np.ndarray]:
        """Envelope lower bound and active-branch gradient at pos."""
        self._require_ready()
        mean, std, dmean, dstd = self.model_prev.posterior_grad(pos)
        raw = mean - self.sqrt_beta * std
        graw = dmean - self.sqrt_beta * dstd
        vi, gi = self._interp_l.value_and_grad(np.asarray(pos, dtype=float).ravel())
        return (vi, gi) if vi > raw else (raw, graw)

    def lower_raw_vg(self, pos) -> tuple[float, np.ndarray]:
        """Smooth round-n lower bound without the memo intersection.

        Always at or below the envelope, so constraints enforced on it
        stay sound; the smoothness helps the trajectory optimizer.
        """
        self._require_ready()
        mean, std, dmean, dstd = self.model_prev.posterior_grad(pos)
        return mean - self.sqrt_beta * std, dmean - self.sqrt_beta * dstd

    def upper_vg(self, pos) -> tuple[float, np.ndarray]:
        self._require_ready()
        mean, std, dmean, dstd = self.model_prev.posterior_grad(pos)
        raw = mean + self.sqrt_beta * std
        graw = dmean + self.sqrt_beta * dstd
        vi, gi = self._interp_u.value_and_grad(np.asarray(pos, dtype=float).ravel())
        return (vi, gi) if vi < raw else (raw, graw)

    def width_vg(self, pos) -> tuple[float, np.ndarray]:
        lo, gl = self.lower_vg(pos)
        hi, gu = self.upper_vg(pos)
        return hi - lo, gu - gl


@dataclass
class InfoDiagnostics:
    """Per-sample variance record and the closed-form mutual information."""

    noise_std: float
    prior_vars: list = field(default_factory=list)

    def record(self, sigma_prev: float) -> None:
        self.prior_vars.append(float(sigma_prev) ** 2)

    def mutual_information(self) -> float:
        return mutual_information(self.prior_vars, self.noise_std)


def mutual_information(prior_vars, noise_std: float) -> float:
    """I_n = 1/2 sum log(1 + var_i / noise^2) over the sampling sequence."""
    if noise_std <= 0:
        raise DomainError("mutual information needs noise_std > 0")
    s = np.asarray(prior_vars, dtype=float)
    return float(0.5 * np.sum(np.log1p(s / noise_std**2)))


def greedy_capacity(kernel: Kernel, noise_std: float, grid_pts, n: int,
                    return_curve: bool = False):
    """Greedy max-variance capacity estimate over a candidate grid.

    Selection depends only on candidate locations (variance is
    data-location-only); returns gamma_hat_n, or the whole curve
    [gamma_hat_1 .. gamma_hat_n] when return_curve is set.
    """
    if noise_std <= 0:
        raise DomainError("greedy capacity needs noise_std > 0")
    pts = np.atleast_2d(np.asarray(grid_pts, dtype=float))
    m = pts.shape[0]
    if m == 0:
        raise DomainError("candidate grid is empty")
    if n <= 0:
        return [] if return_curve else 0.0
    var = np.full(m, kernel.signal_variance)
    W = np.zeros((n, m))
    curve = []
    total = 0.0
    s2 = noise_std**2
    for i in range(n):
        j = int(np.argmax(var))
        total += 0.5 * math.log1p(var[j] / s2)
        curve.append(total)
        d = math.sqrt(var[j] + s2)
        row = (kernel(pts[j].reshape(1, -1), pts)[0] - W[:i, j] @ W[:i]) / d
        W[i] = row
        var = np.maximum(var - row * row, 0.0)
    return curve if return_curve else curve[-1]
