"""Constraint-set predicates and grid rasterizations.

Pessimistic, optimistic, and epsilon-optimistic membership come straight
from the confidence envelopes; the Lipschitz-enlarged set and the expander
use a finite anchor set as an inner approximation of the existential over
the whole domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, OutOfDomain
from .gp import ConfBounds, GridSpec


@dataclass
class SetQuery:
    """Bundle of everything needed to answer set-membership queries."""

    bounds: ConfBounds
    epsilon: float
    domain_box: np.ndarray  # (2, 2) rows [lo, hi] per axis
    lipschitz: float | None = None

    def __post_init__(self):
        self.domain_box = np.asarray(self.domain_box, dtype=float)
        if self.epsilon <= 0:
            raise DomainError("epsilon must be positive")
        if self.lipschitz is not None and self.lipschitz <= 0:
            raise DomainError("lipschitz constant must be positive when given")

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        box = self.domain_box
        if np.any(x < box[:, 0]) or np.any(x > box[:, 1]):
            raise OutOfDomain(f"{x.tolist()} outside domain box")
        return x


def in_pessimistic(q: SetQuery, x) -> bool:
    x = q._check(x)
    lo, _ = q.bounds.bounds(x)
    return lo >= 0.0


def in_optimistic(q: SetQuery, x) -> bool:
    x = q._check(x)
    _, hi = q.bounds.bounds(x)
    return hi >= 0.0


def in_eps_optimistic(q: SetQuery, x) -> bool:
    x = q._check(x)
    _, hi = q.bounds.bounds(x)
    return hi - q.epsilon >= 0.0


def lipschitz_lower(q: SetQuery, x, anchors) -> float:
    """max over anchors of l(z) - L * ||x - z||; -inf for no anchors."""
    if q.lipschitz is None:
        raise DomainError("lipschitz constant not configured")
    x = np.asarray(x, dtype=float).ravel()
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if anchors.size == 0:
        return -np.inf
    lows = np.array([q.bounds.bounds(z)[0] for z in anchors])
    dist = np.linalg.norm(anchors - x, axis=1)
    return float(np.max(lows - q.lipschitz * dist))


def in_lipschitz_pessimistic(q: SetQuery, x, anchors) -> bool:
    x = q._check(x)
    return lipschitz_lower(q, x, anchors) >= 0.0


def in_expander(q: SetQuery, x, anchors) -> bool:
    """Near-boundary cells: Lipschitz-certified safe but l(x) <= 0."""
    x = q._check(x)
    lo, _ = q.bounds.bounds(x)
    return lo <= 0.0 and in_lipschitz_pessimistic(q, x, anchors)


@dataclass
class SetRaster:
    """Cell-centered boolean masks for one round."""

    grid: GridSpec
    n: int
    lower: np.ndarray  # envelope values at cell centers, grid shape
    upper: np.ndarray
    pessimistic: np.ndarray  # boolean masks, grid shape (ny, nx)
    optimistic: np.ndarray
    eps_optimistic: np.ndarray
    lipschitz_pessimistic: np.ndarray
    expander: np.ndarray
    anchors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def area(self, mask: np.ndarray) -> float:
        return float(np.count_nonzero(mask)) * self.grid.cell_area()


def default_anchors(grid: GridSpec, lower: np.ndarray, samples) -> np.ndarray:
    """Sample locations plus strongly-pessimistic grid cells.

    Cells with l > 0.5 * max l qualify when the field is anywhere
    positive; a cheap inner approximation of the continuous existential.
    """
    pts = [np.atleast_2d(np.asarray(samples, dtype=float))] if len(samples) else []
    lmax = lower.max() if lower.size else -np.inf
    if lmax > 0:
        centers = grid.centers()
        pts.append(centers[lower.ravel() > 0.5 * lmax])
    if not pts:
        return np.zeros((0, 2))
    return np.vstack(pts)


def rasterize(q: SetQuery, grid: GridSpec, samples=()) -> SetRaster:
    """Evaluate all masks cell-center-wise.

    The Lipschitz mask is the union of the pessimistic mask (witness
    z = x) and the anchor certificate, which keeps the pointwise chain
    S^p within the enlarged set by construction.
    """
    cb = q.bounds
    if cb.grid is grid or cb.grid == grid:
        lower = cb.grid_l.copy()
        upper = cb.grid_u.copy()
    else:
        lower, upper = cb.envelope(grid.centers())
    shape = grid.shape
    lower = lower.reshape(shape)
    upper = upper.reshape(shape)

    pess = lower >= 0.0
    opti = upper >= 0.0
    eps_opti = upper - q.epsilon >= 0.0

    anchors = default_anchors(grid, lower, samples)
    if q.lipschitz is not None and anchors.shape[0] > 0:
        centers = grid.centers()
        anchor_low = cb.envelope(anchors)[0]
        # max over anchors of l(z) - L ||x - z||, vectorized per anchor block
        diff = centers[:, None, :] - anchors[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        cert = np.max(anchor_low[None, :] - q.lipschitz * dist, axis=1)
        lip = pess | (cert.reshape(shape) >= 0.0)
    else:
        lip = pess.copy()
    expander = lip & (lower <= 0.0)

    return SetRaster(
        grid=grid,
        n=cb.n,
        lower=lower,
        upper=upper,
        pessimistic=pess,
        optimistic=opti,
        eps_optimistic=eps_opti,
        lipschitz_pessimistic=lip,
        expander=expander,
        anchors=anchors,
    )


def lipschitz_lower_vg(q: SetQuery, pos, anchors) -> tuple[float, np.ndarray]:
    """Value and subgradient of the anchor-certified Lipschitz lower bound.

    Used by the solver when the enlarged pessimistic set replaces the
    plain one in the stage constraints; the gradient follows the active
    anchor (or the envelope gradient when z = x dominates).
    """
    pos = np.asarray(pos, dtype=float).ravel()
    lo, glo = q.bounds.lower_vg(pos)
    best, gbest = lo, glo
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if anchors.size and q.lipschitz is not None:
        lows = q.bounds.envelope(anchors)[0]
        diff = pos[None, :] - anchors
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        vals = lows - q.lipschitz * dist
        j = int(np.argmax(vals))
        if vals[j] > best and dist[j] > 1e-12:
            best = float(vals[j])
            gbest = -q.lipschitz * diff[j] / dist[j]
    return best, gbest


# -- run-length encoding for log snapshots --------------------------------

def rle_encode(mask: np.ndarray) -> list:
    """Per-row [start, length] runs of True cells."""
    rows = []
    for row in np.asarray(mask, dtype=bool):
        runs = []
        idx = np.flatnonzero(np.diff(np.concatenate(([False], row, [False]))))
        for s, e in zip(idx[::2], idx[1::2]):
            runs.append([int(s), int(e - s)])
        rows.append(runs)
    return rows


def rle_decode(rows: list, shape: tuple) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for iy, runs in enumerate(rows):
        for s, ln in runs:
            mask[iy, s:s + ln] = True
    return mask
