"""Task-informed constraints on the estimated surface.

Two constraint families: a collision-free path must exist on the
occupancy grid between the tracked point and every goal, and the state
estimate must not penetrate the surface under a conservative lower
confidence bound. A constraint set is satisfied only when every member
is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy import ndimage

from .gp import kernel_matrix, KernelParams, SolverError, _JITTERS
from .gpis import Gpis, GridSpec, OccupancyGrid, inv_norm_cdf, FREE_LABEL


@dataclass(frozen=True)
class PathExists:
    """Collision-free grid path between the tracked component and the
    goals must exist."""

    grid: GridSpec
    component: int = 0


@dataclass(frozen=True)
class NoPenetration:
    """No state component may fall below the surface lower confidence
    bound at quantile zeta."""

    zeta: float

    def __post_init__(self):
        if not (0.0 < self.zeta < 1.0):
            raise ValueError("zeta must lie in (0, 1)")


ConstraintSpec = Union[PathExists, NoPenetration]


def connected_components(grid: OccupancyGrid) -> np.ndarray:
    """Label free cells by component id (occupied cells get 0).

    Free-space connectivity is 8-neighbor in 2-D and 26-neighbor in
    3-D.
    """
    cells = grid.cells
    if cells.size == 0:
        raise ValueError("empty grid")
    structure = np.ones((3,) * cells.ndim, dtype=int)
    labels, _ = ndimage.label(~cells, structure=structure)
    return labels


def path_exists(gpis: Gpis, state_point: np.ndarray, goals: np.ndarray,
                spec: GridSpec) -> bool:
    """True when the cells holding the state point and every goal share
    one free component. An occupied endpoint cell counts as violated,
    not as an error: the state sitting on the predicted surface is
    exactly the situation refinement should fix.
    """
    grid = gpis.occupancy_grid(spec)
    return _grid_path_exists(grid, spec, state_point, goals)


def _grid_path_exists(grid: OccupancyGrid, spec: GridSpec,
                      state_point: np.ndarray, goals: np.ndarray) -> bool:
    labels = connected_components(grid)
    start = labels[spec.cell_index(state_point)]
    if start == 0:
        return False
    for g in np.atleast_2d(np.asarray(goals, dtype=float)):
        if labels[spec.cell_index(g)] != start:
            return False
    return True


def no_penetration(gpis: Gpis, state: np.ndarray, zeta: float) -> bool:
    """True when every component's lower confidence bound stays
    strictly above the surface."""
    lcb = gpis.lcb_many(np.atleast_2d(np.asarray(state, dtype=float)), zeta)
    return bool(np.all(lcb > 0.0))


def satisfied(spec: ConstraintSpec, gpis: Gpis, state: np.ndarray,
              goals: np.ndarray) -> bool:
    state = np.atleast_2d(np.asarray(state, dtype=float))
    if isinstance(spec, PathExists):
        return path_exists(gpis, state[spec.component], goals, spec.grid)
    if isinstance(spec, NoPenetration):
        return no_penetration(gpis, state, spec.zeta)
    raise TypeError(f"unknown constraint spec {spec!r}")


def all_satisfied(specs: Sequence[ConstraintSpec], gpis: Gpis,
                  state: np.ndarray, goals: np.ndarray) -> bool:
    """Conjunction over the configured constraints."""
    if not specs:
        raise ValueError("constraint set must not be empty")
    return all(satisfied(s, gpis, state, goals) for s in specs)


class SubsetEvaluator:
    """Constraint conjunction over candidate subsets of the active set.

    Refinement evaluates hundreds of subsets against fixed query points
    (grid centers, state components), so the kernel blocks between the
    full active set and those queries are computed once here and sliced
    per candidate. Results are identical to conditioning a fresh
    surface on the subset.
    """

    def __init__(
        self,
        specs: Sequence[ConstraintSpec],
        points: np.ndarray,
        labels: np.ndarray,
        params: KernelParams,
        free_space: Optional[Callable[[np.ndarray], np.ndarray]],
        state: np.ndarray,
        goals: np.ndarray,
    ):
        if not specs:
            raise ValueError("constraint set must not be empty")
        self.specs = list(specs)
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.labels = np.asarray(labels, dtype=float).ravel()
        self.params = params
        self.state = np.atleast_2d(np.asarray(state, dtype=float))
        self.goals = np.atleast_2d(np.asarray(goals, dtype=float))
        m = self.points.shape[0]
        self._gram = kernel_matrix(self.points, self.points, params) if m else None

        self._jobs = []
        for spec in self.specs:
            if isinstance(spec, PathExists):
                q = spec.grid.centers()
                need_var = False
            else:
                q = self.state
                need_var = True
            vis = (np.asarray(free_space(q), dtype=bool) if free_space is not None
                   else np.zeros(q.shape[0], dtype=bool))
            kq = kernel_matrix(q, self.points, params) if m else np.zeros((q.shape[0], 0))
            self._jobs.append((spec, q, vis, kq, need_var))

    def _subset_posterior(self, idx: np.ndarray, kq: np.ndarray, vis: np.ndarray,
                          need_var: bool):
        q = kq.shape[0]
        if idx.size == 0:
            mean = np.zeros(q)
            var = np.full(q, self.params.outputscale)
        else:
            ks = self._gram[np.ix_(idx, idx)].copy()
            diag = np.arange(idx.size)
            data = kq[:, idx]
            for jit in _JITTERS:
                ks[diag, diag] = self._gram[idx, idx] + self.params.noise + jit
                try:
                    cho = cho_factor(ks, lower=True)
                    break
                except np.linalg.LinAlgError:
                    continue
            else:
                raise SolverError("subset Gram matrix not positive definite")
            alpha = cho_solve(cho, self.labels[idx])
            mean = data @ alpha
            if need_var:
                sol = cho_solve(cho, data.T)
                var = self.params.outputscale - np.einsum("mq,qm->q", sol, data)
                np.clip(var, 0.0, None, out=var)
            else:
                var = None
        mean = np.where(vis, FREE_LABEL, mean)
        return mean, var

    def __call__(self, keep: np.ndarray) -> bool:
        """Evaluate the conjunction on the subset selected by `keep`."""
        idx = np.where(np.asarray(keep, dtype=bool))[0]
        for spec, q, vis, kq, need_var in self._jobs:
            mean, var = self._subset_posterior(idx, kq, vis, need_var)
            if isinstance(spec, PathExists):
                cells = (mean <= 0.0).reshape(spec.grid.shape)
                grid = OccupancyGrid(tuple(float(v) for v in spec.grid.lo),
                                     spec.grid.resolution, cells)
                ok = _grid_path_exists(grid, spec.grid,
                                       self.state[spec.component], self.goals)
            else:
                lcb = mean + inv_norm_cdf(spec.zeta) * np.sqrt(var)
                ok = bool(np.all(lcb > 0.0))
            if not ok:
                return False
        return True
