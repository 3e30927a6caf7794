"""Sampling-based model-predictive control over the estimated surface.

Each control step perturbs a nominal control sequence with Gaussian
noise, rolls the candidates through the nominal dynamics, scores them
with a four-term cost (goal progress with a success basin, action
magnitude, predicted collision with the surface estimate, and negative
posterior variance as an exploration bonus), and returns the
exponentially-weighted average sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class GoalSet:
    """Goal locations for a subset of state components."""

    components: np.ndarray  # (g,) int indices
    points: np.ndarray  # (g, d)

    @classmethod
    def single(cls, component: int, point) -> "GoalSet":
        return cls(np.array([component], dtype=int),
                   np.atleast_2d(np.asarray(point, dtype=float)))

    @property
    def empty(self) -> bool:
        return len(self.components) == 0


@dataclass(frozen=True)
class CostWeights:
    action: float
    exploration: float
    collision: float
    basin: float
    r_g: float

    def __post_init__(self):
        if self.collision < 0.0 or self.basin < 0.0 or not (self.r_g > 0.0):
            raise ValueError("collision and basin weights must be >= 0, r_g > 0")


@dataclass(frozen=True)
class MppiConfig:
    temperature: float
    samples: int
    horizon: int
    noise_cov: np.ndarray  # diagonal of the control-noise covariance
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        if not (self.temperature > 0.0):
            raise ValueError("temperature must be positive")
        if self.samples < 1 or self.horizon < 1:
            raise ValueError("need at least one sample and one step of horizon")
        if np.any(np.asarray(self.noise_cov) < 0.0):
            raise ValueError("noise covariance diagonal must be non-negative")


# -- cost terms (batched over samples; leading axis K) -----------------

def _goal_costs(states: np.ndarray, goals: GoalSet, w: CostWeights) -> np.ndarray:
    """Distance-to-goal plus success-basin bonus, summed over t=1..T."""
    k = states.shape[0]
    if goals.empty:
        return np.zeros(k)
    pos = states[:, 1:, goals.components, :]  # (K, T, g, d)
    dist = np.linalg.norm(pos - goals.points[None, None, :, :], axis=-1)
    in_basin = np.all(dist < w.r_g, axis=-1)  # (K, T)
    return dist.sum(axis=(1, 2)) - w.basin * in_basin.sum(axis=1)


def _action_costs(controls: np.ndarray) -> np.ndarray:
    return np.linalg.norm(controls, axis=-1).sum(axis=-1)


def _surface_costs(
    states: np.ndarray,
    surface,
    component: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Collision indicator sum and negative-variance exploration term.

    Collision counts every component whose post-processed mean is <= 0;
    exploration uses the raw posterior variance of the selected
    component only.
    """
    k, t1, n, d = states.shape
    pts = states[:, 1:].reshape(-1, d)
    mean = surface.predict_mean(pts)
    collision = (mean <= 0.0).reshape(k, -1).sum(axis=1).astype(float)
    sel = states[:, 1:, component, :].reshape(-1, d)
    _, var = surface.predict_many(sel)
    exploration = -var.reshape(k, -1).sum(axis=1)
    return collision, exploration


# -- single-trajectory views (mostly for tests and inspection) ---------

def goal_cost(states: np.ndarray, goals: GoalSet, w: CostWeights) -> float:
    return float(_goal_costs(np.asarray(states, float)[None], goals, w)[0])


def action_cost(controls: np.ndarray) -> float:
    return float(_action_costs(np.asarray(controls, float)[None])[0])


def collision_cost(states: np.ndarray, surface) -> float:
    c, _ = _surface_costs(np.asarray(states, float)[None], surface, 0)
    return float(c[0])


def exploration_cost(states: np.ndarray, surface, component: int) -> float:
    _, e = _surface_costs(np.asarray(states, float)[None], surface, component)
    return float(e[0])


def select_component(surface, state: np.ndarray) -> int:
    """Index of the component the surface rates most interior (argmin of
    the post-processed mean; ties break to the lowest index)."""
    mean = surface.predict_mean(np.atleast_2d(np.asarray(state, float)))
    return int(np.argmin(mean))


def mppi_step(
    x0: np.ndarray,
    nominal: np.ndarray,
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray],
    surface,
    goals: GoalSet,
    weights: CostWeights,
    cfg: MppiConfig,
    component: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One planning step.

    dynamics maps a batch of states (K, n, d) and controls (K, u) to
    next states. Perturbed controls are clamped to bounds before
    rollout, and the clamped values are what enter both the action cost
    and the weighted average. Returns the first action of the averaged
    sequence and the shifted sequence (last step repeated).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    nominal = np.asarray(nominal, dtype=float)
    t_hor, u_dim = nominal.shape
    if t_hor != cfg.horizon:
        raise ValueError("nominal sequence length must match the horizon")
    k = cfg.samples

    std = np.sqrt(np.asarray(cfg.noise_cov, dtype=float))
    eps = rng.standard_normal((k, t_hor, u_dim)) * std[None, None, :]
    cand = np.clip(nominal[None] + eps, cfg.u_min, cfg.u_max)

    states = np.empty((k, t_hor + 1) + x0.shape)
    states[:, 0] = x0[None]
    for t in range(t_hor):
        states[:, t + 1] = dynamics(states[:, t], cand[:, t])

    costs = _goal_costs(states, goals, weights)
    costs += weights.action * _action_costs(cand)
    if surface is not None:
        coll, expl = _surface_costs(states, surface, component)
        costs += weights.collision * coll + weights.exploration * expl
    bad = ~np.isfinite(states.reshape(k, -1)).all(axis=1)
    costs = np.where(bad, np.inf, costs)

    finite = np.isfinite(costs)
    if not finite.any():
        sample_w = np.full(k, 1.0 / k)
    else:
        shifted = (costs - costs[finite].min()) / cfg.temperature
        sample_w = np.where(finite, np.exp(-np.where(finite, shifted, 0.0)), 0.0)
        sample_w /= sample_w.sum()

    averaged = np.einsum("k,ktu->tu", sample_w, cand)
    shifted_seq = np.vstack([averaged[1:], averaged[-1:]])
    return averaged[0], shifted_seq
