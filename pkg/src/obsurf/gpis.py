"""Implicit-surface environment estimate backed by a GP.

The surface is the 0-level set of the posterior mean over labeled
points: negative means interior, positive exterior. Queries support a
free-space mean override driven by a visibility oracle, lower
confidence bounds for conservative checks, and export to a boolean
occupancy grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .gp import GpSolve, KernelParams, PosteriorStats

# Observed points closer than this are treated as the same point; the
# most recent label wins. Keeps the Gram matrix well conditioned.
DEDUP_TOL = 1e-9

FREE_LABEL = 1.0

# Acklam's rational approximation to the standard normal quantile.
_ICDF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
           1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ICDF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
           6.680131188771972e+01, -1.328068155288572e+01)
_ICDF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
           -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ICDF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
           3.754408661907416e+00)
_ICDF_PLOW = 0.02425


def norm_cdf(x: float) -> float:
    """Standard normal CDF via erf."""
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def inv_norm_cdf(p: float) -> float:
    """Standard normal quantile.

    Rational approximation refined with two Newton steps on the
    erf-based CDF; round-trip error is far below 1e-8 over (0, 1).
    """
    if not (0.0 < p < 1.0):
        raise ValueError(f"quantile argument must lie in (0, 1), got {p}")
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    if p < _ICDF_PLOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p > 1.0 - _ICDF_PLOW:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    else:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    for _ in range(2):
        err = norm_cdf(x) - p
        pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if pdf <= 0.0:
            break
        x -= err / pdf
    return x


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned bounding box plus cell size for occupancy export."""

    lo: tuple
    hi: tuple
    resolution: float

    def __post_init__(self):
        if not (self.resolution > 0.0):
            raise ValueError("grid resolution must be positive")
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("grid bounds must satisfy hi > lo per axis")

    @property
    def shape(self) -> tuple:
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        return tuple(int(np.ceil((h - l) / self.resolution - 1e-12))
                     for l, h in zip(lo, hi))

    def centers(self) -> np.ndarray:
        """All cell centers, shape (prod(shape), d), C order."""
        axes = [np.asarray(self.lo[i]) + (np.arange(n) + 0.5) * self.resolution
                for i, n in enumerate(self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_index(self, point) -> tuple:
        """Index of the cell containing a point (clipped to the grid)."""
        p = np.asarray(point, dtype=float).ravel()
        idx = np.floor((p - np.asarray(self.lo)) / self.resolution).astype(int)
        return tuple(int(np.clip(i, 0, n - 1)) for i, n in zip(idx, self.shape))


@dataclass(frozen=True)
class OccupancyGrid:
    origin: tuple
    resolution: float
    cells: np.ndarray  # boolean, True = occupied

    def to_text(self) -> str:
        d = self.cells.ndim
        header = " ".join(
            [str(d), repr(float(self.resolution))]
            + [repr(float(o)) for o in self.origin]
            + [str(n) for n in self.cells.shape]
        )
        lines = [header]
        if d == 2:
            for row in self.cells:
                lines.append("".join("1" if c else "0" for c in row))
        elif d == 3:
            for slab in self.cells:
                for row in slab:
                    lines.append("".join("1" if c else "0" for c in row))
                lines.append("")
            if lines[-1] == "":
                lines.pop()
        else:
            raise ValueError(f"unsupported grid dimension {d}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OccupancyGrid":
        raw = text.splitlines()
        head = raw[0].split()
        d = int(head[0])
        resolution = float(head[1])
        origin = tuple(float(v) for v in head[2:2 + d])
        shape = tuple(int(v) for v in head[2 + d:2 + 2 * d])
        rows = [ln for ln in raw[1:] if ln.strip() != ""]
        flat = np.array([[ch == "1" for ch in ln] for ln in rows], dtype=bool)
        return cls(origin, resolution, flat.reshape(shape))


class Gpis:
    """The estimated environment: a GP implicit surface over labeled points.

    Instances are immutable after construction; every update returns a
    new value, so concurrent readers are safe. The optional free-space
    oracle maps a (q, d) array of points to a boolean visibility mask;
    where it reports True the predicted mean is overridden to the
    exterior label value (variance is never touched).
    """

    def __init__(
        self,
        points: Optional[np.ndarray] = None,
        labels: Optional[np.ndarray] = None,
        params: Optional[KernelParams] = None,
        goal_seeds: Optional[np.ndarray] = None,
        free_space: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    ):
        self.params = params if params is not None else KernelParams()
        if points is None or np.asarray(points).size == 0:
            self.points = np.zeros((0, 0))
            self.labels = np.zeros(0)
        else:
            self.points = np.atleast_2d(np.asarray(points, dtype=float)).copy()
            self.labels = np.asarray(labels, dtype=float).ravel().copy()
            if self.points.shape[0] != self.labels.shape[0]:
                raise ValueError("points and labels must have equal length")
            if np.any(self.labels < -1.0) or np.any(self.labels > 1.0):
                raise ValueError("labels must lie in [-1, 1]")
        self.goal_seeds = (np.zeros((0, self.points.shape[1] if self.points.size else 0))
                           if goal_seeds is None
                           else np.atleast_2d(np.asarray(goal_seeds, dtype=float)))
        self.free_space = free_space
        self._solve: Optional[GpSolve] = None

    # -- construction ------------------------------------------------

    def with_active(self, points: np.ndarray, labels: np.ndarray) -> "Gpis":
        """New surface conditioned on a replacement active set."""
        return Gpis(points, labels, self.params, self.goal_seeds, self.free_space)

    def with_params(self, params: KernelParams) -> "Gpis":
        return Gpis(self.points, self.labels, params, self.goal_seeds, self.free_space)

    def seed_with_goal(self, goals: np.ndarray) -> "Gpis":
        """Add goal points as exterior evidence (label 1), idempotently.

        Seeded points reflect the assumption that the goal is reachable
        and therefore outside any obstacle.
        """
        goals = np.atleast_2d(np.asarray(goals, dtype=float))
        if goals.size == 0:
            raise ValueError("goal seeding requires at least one point")
        pts = self.points if self.points.size else np.zeros((0, goals.shape[1]))
        labs = self.labels
        for g in goals:
            if pts.shape[0]:
                d = np.linalg.norm(pts - g[None, :], axis=1)
                j = int(np.argmin(d))
                if d[j] <= DEDUP_TOL:
                    labs = labs.copy()
                    labs[j] = FREE_LABEL
                    continue
            pts = np.vstack([pts, g[None, :]])
            labs = np.append(labs, FREE_LABEL)
        seeds = self.goal_seeds
        if seeds.size == 0:
            seeds = goals.copy()
        else:
            for g in goals:
                if not np.any(np.linalg.norm(seeds - g[None, :], axis=1) <= DEDUP_TOL):
                    seeds = np.vstack([seeds, g[None, :]])
        return Gpis(pts, labs, self.params, seeds, self.free_space)

    # -- queries -----------------------------------------------------

    def _solver(self) -> Optional[GpSolve]:
        if self.points.size == 0:
            return None
        if self._solve is None:
            self._solve = GpSolve(self.points, self.labels, self.params)
        return self._solve

    def predict_many(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean (post-processed) and raw variance per query row."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        solver = self._solver()
        if solver is None:
            mean = np.zeros(queries.shape[0])
            var = np.full(queries.shape[0], self.params.outputscale)
        else:
            mean, var = solver.predict(queries)
        if self.free_space is not None:
            vis = np.asarray(self.free_space(queries), dtype=bool)
            mean = np.where(vis, FREE_LABEL, mean)
        return mean, var

    def predict_mean(self, queries: np.ndarray) -> np.ndarray:
        """Post-processed posterior mean only (cheaper than predict_many
        for large query batches)."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        solver = self._solver()
        mean = (np.zeros(queries.shape[0]) if solver is None
                else solver.predict_mean(queries))
        if self.free_space is not None:
            vis = np.asarray(self.free_space(queries), dtype=bool)
            mean = np.where(vis, FREE_LABEL, mean)
        return mean

    def predict(self, x: np.ndarray) -> PosteriorStats:
        mean, var = self.predict_many(np.asarray(x, dtype=float)[None, :])
        return PosteriorStats(float(mean[0]), float(var[0]))

    def lcb(self, x: np.ndarray, zeta: float) -> float:
        """Lower confidence bound mean + quantile(zeta) * std at x.

        zeta below one half pulls the bound pessimistic; exactly one
        half reduces to the post-processed mean.
        """
        if not (0.0 < zeta < 1.0):
            raise ValueError(f"zeta must lie in (0, 1), got {zeta}")
        stats = self.predict(x)
        return stats.mean + inv_norm_cdf(zeta) * math.sqrt(stats.variance)

    def lcb_many(self, queries: np.ndarray, zeta: float) -> np.ndarray:
        if not (0.0 < zeta < 1.0):
            raise ValueError(f"zeta must lie in (0, 1), got {zeta}")
        mean, var = self.predict_many(queries)
        return mean + inv_norm_cdf(zeta) * np.sqrt(var)

    def occupancy_grid(self, spec: GridSpec) -> OccupancyGrid:
        """Boolean occupancy over the grid: occupied where mean <= 0.

        The boundary value 0 counts as occupied, so a blank prior marks
        everything occupied until seeding or visibility carves out free
        space.
        """
        mean = self.predict_mean(spec.centers())
        cells = (mean <= 0.0).reshape(spec.shape)
        return OccupancyGrid(tuple(float(v) for v in spec.lo), spec.resolution, cells)
