"""Constraint-driven refinement of the active dataset.

When the estimated surface violates the task constraints, a binary
keep/remove vector over the active set is optimized to restore
satisfaction while removing as little well-supported data as possible.
The search runs a covariance-matrix-adaptation evolution strategy whose
coordinates are thresholded to bits, with a margin correction that
keeps every bit explorable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .contact import DatasetPair, TAG_GOAL
from .gp import KernelParams, kernel_matrix
from .gpis import inv_norm_cdf

PENALTY = 10.0  # weight of the constraint-violation term in the objective

COV_EIG_FLOOR = 1e-10


def compute_weights(bar_points: np.ndarray, mem_points: np.ndarray,
                    params: KernelParams) -> np.ndarray:
    """Softmax kernel-density weights of active points against memory.

    Active points surrounded by much collected data get large weights,
    biasing the optimizer toward keeping them: repeatedly encountered
    evidence is unlikely to be spurious.
    """
    bar_points = np.atleast_2d(np.asarray(bar_points, dtype=float))
    if bar_points.shape[0] == 0:
        raise ValueError("active set must be non-empty")
    mem_points = np.atleast_2d(np.asarray(mem_points, dtype=float))
    if mem_points.shape[0] == 0:
        score = np.zeros(bar_points.shape[0])
    else:
        score = kernel_matrix(bar_points, mem_points, params).sum(axis=1)
    e = np.exp(score - score.max())
    return e / e.sum()


@dataclass
class RefinementProblem:
    """One keep/remove optimization instance.

    weights is the full-length weight vector; pinned marks entries whose
    bit is fixed at 1 (exterior-labeled points and goal seeds); feasible
    evaluates the constraint conjunction on a full-length bit vector.
    """

    weights: np.ndarray
    pinned: np.ndarray
    feasible: Callable[[np.ndarray], bool]


def phi(problem: RefinementProblem, omega: np.ndarray) -> float:
    """Objective: negated kept weight plus a flat penalty on violation."""
    omega = np.asarray(omega, dtype=bool)
    ok = problem.feasible(omega)
    return float(-(problem.weights @ omega) + PENALTY * (0.0 if ok else 1.0))


@dataclass
class CmawmState:
    """Distribution state of the bit-vector optimizer."""

    mean: np.ndarray
    step_size: float
    cov: np.ndarray
    margin: float
    p_sigma: np.ndarray = field(init=False)
    p_cov: np.ndarray = field(init=False)

    def __post_init__(self):
        m = len(self.mean)
        self.p_sigma = np.zeros(m)
        self.p_cov = np.zeros(m)


def _cma_constants(m: int, popsize: int):
    mu = popsize // 2
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w ** 2)
    c_sigma = (mueff + 2.0) / (m + mueff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, np.sqrt((mueff - 1.0) / (m + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mueff / m) / (m + 4.0 + 2.0 * mueff / m)
    c_1 = 2.0 / ((m + 1.3) ** 2 + mueff)
    c_mu = min(1.0 - c_1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((m + 2.0) ** 2 + mueff))
    chi_n = np.sqrt(m) * (1.0 - 1.0 / (4.0 * m) + 1.0 / (21.0 * m * m))
    return mu, w, mueff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n


def run_cmawm(
    problem: RefinementProblem,
    generations: int,
    popsize: int,
    seed: int,
) -> tuple[np.ndarray, float, bool]:
    """Search for the feasible bit vector keeping the most weight.

    Samples are binarized at 0.5, scored by `phi`, and recombined by
    rank; after each distribution update every coordinate's marginal is
    clipped so the minority bit keeps probability >= 1/(popsize * m).
    The best feasible candidate by kept weight is returned; if none is
    found the all-ones vector comes back with found_feasible False.

    Deterministic for a fixed (problem, seed).
    """
    if generations < 1:
        raise ValueError("generations must be >= 1")
    if popsize < 4:
        raise ValueError("population size must be >= 4")
    pinned = np.asarray(problem.pinned, dtype=bool)
    n_all = len(pinned)
    free_idx = np.where(~pinned)[0]
    m = len(free_idx)

    best_omega = np.ones(n_all, dtype=bool)
    best_score = -1.0
    found = False

    def full(bits: np.ndarray) -> np.ndarray:
        omega = np.ones(n_all, dtype=bool)
        omega[free_idx] = bits
        return omega

    cache: dict[bytes, tuple[float, float, bool]] = {}

    def score(bits: np.ndarray) -> tuple[float, float, bool]:
        key = bits.tobytes()
        hit = cache.get(key)
        if hit is None:
            omega = full(bits)
            ok = bool(problem.feasible(omega))
            kept = float(problem.weights @ omega)
            hit = (-kept + PENALTY * (0.0 if ok else 1.0), kept, ok)
            cache[key] = hit
        return hit

    if m == 0:
        # Nothing to optimize: the single candidate is the full set.
        _, kept, ok = score(np.zeros(0, dtype=bool))
        return best_omega, (kept if ok else -1.0), ok

    mu, w, mueff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n = _cma_constants(m, popsize)
    state = CmawmState(mean=np.full(m, 0.5), step_size=0.25,
                       cov=np.eye(m), margin=1.0 / (popsize * m))
    q_margin = inv_norm_cdf(1.0 - state.margin)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))

    for gen in range(generations):
        cov = 0.5 * (state.cov + state.cov.T)
        eigval, eigvec = np.linalg.eigh(cov)
        eigval = np.clip(eigval, COV_EIG_FLOOR, None)
        sqrt_c = eigvec * np.sqrt(eigval)  # B diag(D)
        inv_sqrt_c = (eigvec / np.sqrt(eigval)) @ eigvec.T

        z = rng.standard_normal((popsize, m))
        y = z @ sqrt_c.T
        x = state.mean[None, :] + state.step_size * y
        bits = x >= 0.5

        values = np.empty(popsize)
        for k in range(popsize):
            val, kept, ok = score(bits[k])
            values[k] = val
            if ok and kept > best_score:
                best_omega = full(bits[k])
                best_score = kept
                found = True

        order = np.argsort(values, kind="stable")[:mu]
        y_w = w @ y[order]
        state.mean = state.mean + state.step_size * y_w

        state.p_sigma = ((1.0 - c_sigma) * state.p_sigma
                         + np.sqrt(c_sigma * (2.0 - c_sigma) * mueff)
                         * (inv_sqrt_c @ y_w))
        ps_norm = np.linalg.norm(state.p_sigma)
        denom = np.sqrt(1.0 - (1.0 - c_sigma) ** (2 * (gen + 1)))
        h_sig = float(ps_norm / denom < (1.4 + 2.0 / (m + 1.0)) * chi_n)
        state.p_cov = ((1.0 - c_c) * state.p_cov
                       + h_sig * np.sqrt(c_c * (2.0 - c_c) * mueff) * y_w)

        rank_mu = np.einsum("i,ij,ik->jk", w, y[order], y[order])
        state.cov = ((1.0 - c_1 - c_mu) * cov
                     + c_1 * (np.outer(state.p_cov, state.p_cov)
                              + (1.0 - h_sig) * c_c * (2.0 - c_c) * cov)
                     + c_mu * rank_mu)
        state.step_size *= float(np.exp((c_sigma / d_sigma)
                                        * (ps_norm / chi_n - 1.0)))
        state.step_size = float(np.clip(state.step_size, 1e-8, 1e4))

        # The mean lives in the bit-encoding box; letting it run past the
        # thresholds only kills exploration without changing any sample's
        # rounding.
        state.mean = np.clip(state.mean, 0.0, 1.0)
        # Margin correction: keep both bit values reachable per coordinate.
        sd = state.step_size * np.sqrt(np.clip(np.diag(state.cov),
                                               COV_EIG_FLOOR, None))
        lo = 0.5 - sd * q_margin
        hi = 0.5 + sd * q_margin
        state.mean = np.clip(state.mean, lo, hi)

    return best_omega, (best_score if found else -1.0), found


@dataclass(frozen=True)
class RefinementEvent:
    """Structured record of one refinement run."""

    step: int
    bar_before: int
    bar_after: int
    purged: int
    generations: int
    found_feasible: bool
    phi_star: float
    removed_points: np.ndarray

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "bar_before": self.bar_before,
            "bar_after": self.bar_after,
            "purged": self.purged,
            "generations": self.generations,
            "found_feasible": self.found_feasible,
            "phi_star": self.phi_star,
            "removed": [[float(v) for v in p] for p in self.removed_points],
        }


def refine_contacts(
    dp: DatasetPair,
    params: KernelParams,
    feasible_factory: Callable[[np.ndarray, np.ndarray], Callable[[np.ndarray], bool]],
    generations: int,
    popsize: int,
    seed: int,
    step: int = -1,
) -> tuple[DatasetPair, RefinementEvent]:
    """Purge stall data, then optimize the keep vector over interiors.

    feasible_factory builds the constraint evaluator from the purged
    active set (points, labels); candidate bit vectors index into it.
    Points removed from the active set stay in memory; only optimized
    interior points are ever dropped, never exteriors or goal seeds.
    """
    bar_before = dp.bar_size
    purged_n = int(dp.bar_mask.sum())
    dp = dp.purge_masked()
    if dp.bar_size == 0:
        event = RefinementEvent(step, bar_before, 0, purged_n, 0, False, -1.0,
                                np.zeros((0, dp.bar_points.shape[1])))
        return dp, event

    weights = compute_weights(dp.bar_points, dp.mem_points, params)
    # Observations count as contact evidence when their label is at or
    # below one half (the impeded-motion threshold); only clearly
    # exterior points above it and goal seeds keep their bit fixed at 1.
    # Everything surface-adjacent is the optimizer's to keep or drop.
    pinned = (dp.bar_labels > 0.5) | (dp.bar_tags == TAG_GOAL)
    feasible = feasible_factory(dp.bar_points, dp.bar_labels)
    problem = RefinementProblem(weights=weights, pinned=pinned, feasible=feasible)

    # Dropping interior points only ever frees estimated space, so the
    # fully-relaxed candidate is a cheap feasibility certificate: if even
    # it fails, no search can succeed and the set stays as purged.
    relaxed = pinned.copy()
    if not (pinned.all() or feasible(relaxed)):
        event = RefinementEvent(step, bar_before, dp.bar_size, purged_n,
                                0, False, -1.0,
                                np.zeros((0, dp.bar_points.shape[1])))
        return dp, event

    omega, phi_star, found = run_cmawm(problem, generations, popsize, seed)
    if not found and not pinned.all():
        # The search missed, but the certificate is itself feasible.
        omega, phi_star, found = relaxed, float(weights @ relaxed), True

    if found:
        removed = dp.bar_points[~omega]
        out = dp.keep_bar(omega)
    else:
        removed = np.zeros((0, dp.bar_points.shape[1]))
        out = dp
    event = RefinementEvent(step, bar_before, out.bar_size, purged_n,
                            generations, found, phi_star, removed)
    return out, event
