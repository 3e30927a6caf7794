"""Exact Gaussian-process regression with a Matern-3/2 kernel.

Zero-mean GP, dense Cholesky inference, and marginal-likelihood
hyperparameter fitting in log space. Dataset sizes in this project are
O(10^2), so everything is exact; no sparse approximations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist

SQRT3 = np.sqrt(3.0)

# Jitter escalation ladder applied to the Gram diagonal on factorization
# failure. Bounded so genuine conditioning problems still surface.
_JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

LOG_2PI = np.log(2.0 * np.pi)


class SolverError(RuntimeError):
    """Gram matrix could not be factorized even after jitter escalation."""


@dataclass(frozen=True)
class KernelParams:
    """Matern-3/2 kernel hyperparameters.

    lengthscale and outputscale must be positive, noise non-negative.
    The smoothness is fixed at 3/2 and is not a degree of freedom.
    """

    lengthscale: float = 0.1
    outputscale: float = 1.0
    noise: float = 1e-4

    nu = 1.5  # class constant, immutable by construction

    def __post_init__(self):
        if not (self.lengthscale > 0.0):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if not (self.outputscale > 0.0):
            raise ValueError(f"outputscale must be positive, got {self.outputscale}")
        if self.noise < 0.0:
            raise ValueError(f"noise must be non-negative, got {self.noise}")


@dataclass(frozen=True)
class PosteriorStats:
    """Posterior mean and variance of the GP at a single query point."""

    mean: float
    variance: float


def matern32(r, params: KernelParams):
    """Matern-3/2 covariance as a function of distance.

    k(r) = outputscale * (1 + sqrt(3) r / l) * exp(-sqrt(3) r / l)

    Accepts scalars or arrays; distances must be non-negative.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < 0.0):
        raise ValueError("matern32 requires non-negative distances")
    s = SQRT3 * r / params.lengthscale
    out = params.outputscale * (1.0 + s) * np.exp(-s)
    return out if out.ndim else float(out)


def kernel_matrix(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Cross-covariance matrix k(a_i, b_j) without any noise term."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return matern32(cdist(a, b), params)


def _factor_gram(points: np.ndarray, params: KernelParams):
    """Cholesky of K + noise*I with jitter escalation.

    Returns the (cho_factor) tuple. Raises SolverError when even the
    largest jitter fails.
    """
    k = kernel_matrix(points, points, params)
    if not np.all(np.isfinite(k)):
        raise SolverError("non-finite entries in Gram matrix")
    n = k.shape[0]
    diag = np.arange(n)
    for jit in _JITTERS:
        ky = k.copy()
        ky[diag, diag] += params.noise + jit
        try:
            return cho_factor(ky, lower=True)
        except np.linalg.LinAlgError:
            continue
    raise SolverError(f"Gram matrix not positive definite after jitter {max(_JITTERS)}")


class GpSolve:
    """Reusable factorization of one training set.

    Caches the Cholesky factor, the weight vector alpha = Ky^-1 y, and
    (lazily) the explicit inverse used for batched variance queries.
    Treat instances as immutable once built.
    """

    def __init__(self, points: np.ndarray, labels: np.ndarray, params: KernelParams):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.labels = np.asarray(labels, dtype=float).ravel()
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points and labels must have equal length")
        self.params = params
        self._cho = _factor_gram(self.points, params)
        self.alpha = cho_solve(self._cho, self.labels)
        self._kinv = None

    @property
    def kinv(self) -> np.ndarray:
        if self._kinv is None:
            self._kinv = cho_solve(self._cho, np.eye(self.points.shape[0]))
        return self._kinv

    def predict(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at each query row."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        ks = kernel_matrix(queries, self.points, self.params)  # (q, m)
        mean = ks @ self.alpha
        # var = k(0) - diag(ks Ky^-1 ks^T), computed via the explicit
        # inverse so the whole batch is one BLAS call.
        var = self.params.outputscale - np.einsum("qm,qm->q", ks @ self.kinv, ks)
        np.clip(var, 0.0, None, out=var)
        return mean, var

    def predict_mean(self, queries: np.ndarray) -> np.ndarray:
        """Posterior mean only; skips the quadratic variance term."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        return kernel_matrix(queries, self.points, self.params) @ self.alpha


def gp_posterior(
    points: np.ndarray,
    labels: np.ndarray,
    params: KernelParams,
    query: np.ndarray,
) -> PosteriorStats:
    """Zero-prior-mean GP posterior at a single query point.

    With empty training data this is the prior: mean 0, variance equal
    to the outputscale.
    """
    query = np.asarray(query, dtype=float).ravel()
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        return PosteriorStats(0.0, params.outputscale)
    mean, var = GpSolve(points, labels, params).predict(query[None, :])
    return PosteriorStats(float(mean[0]), float(var[0]))


def _lml_terms(points: np.ndarray, labels: np.ndarray, params: KernelParams):
    """Shared pieces for the LML value and gradient."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    y = np.asarray(labels, dtype=float).ravel()
    m = x.shape[0]
    r = cdist(x, x)
    s = SQRT3 * r / params.lengthscale
    e = np.exp(-s)
    k = params.outputscale * (1.0 + s) * e
    ky = k + params.noise * np.eye(m)
    return x, y, m, s, e, k, ky


def log_marginal_likelihood(
    points: np.ndarray,
    labels: np.ndarray,
    params: KernelParams,
) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient in log-parameter space.

    Returns (value, gradient) with the gradient ordered as
    (d/dlog lengthscale, d/dlog outputscale, d/dlog noise). The value is
    -0.5 y^T Ky^-1 y - 0.5 log|Ky| - (m/2) log(2 pi).
    """
    x, y, m, s, e, k, ky = _lml_terms(points, labels, params)
    if m == 0:
        raise ValueError("log_marginal_likelihood requires non-empty training data")
    if not np.all(np.isfinite(ky)):
        raise SolverError("non-finite Gram matrix")
    for jit in _JITTERS:
        try:
            cho = cho_factor(ky + jit * np.eye(m), lower=True)
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise SolverError("singular Gram matrix in marginal likelihood")
    alpha = cho_solve(cho, y)
    logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
    value = -0.5 * (y @ alpha) - 0.5 * logdet - 0.5 * m * LOG_2PI

    kinv = cho_solve(cho, np.eye(m))
    w = np.outer(alpha, alpha) - kinv  # dLML/dKy = 0.5 * w

    # dK/dlog(l) = outputscale * s^2 * exp(-s); dK/dlog(sf2) = K;
    # dKy/dlog(sn2) = noise * I.
    dk_dlog_l = params.outputscale * s * s * e
    g_l = 0.5 * np.sum(w * dk_dlog_l)
    g_sf = 0.5 * np.sum(w * k)
    g_sn = 0.5 * params.noise * np.trace(w)
    return float(value), np.array([g_l, g_sf, g_sn])


def fit_hyperparams(
    points: np.ndarray,
    labels: np.ndarray,
    p0: KernelParams,
    steps: int = 20,
    lr: float = 0.05,
    fit_noise: bool = True,
    lengthscale_bounds: tuple | None = None,
    outputscale_bounds: tuple | None = None,
) -> KernelParams:
    """Gradient ascent on the LML in log-parameter space.

    Backtracking (step halving, at most 10 times) guarantees the
    accepted LML sequence is non-decreasing; on a non-finite LML the fit
    aborts and returns the last finite parameters. With noise == 0 the
    noise coordinate is excluded regardless of fit_noise. Optional
    bounds box-constrain the search: candidates are projected into the
    box before the acceptance check, so monotonicity still holds.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0 or np.asarray(points).size == 0:
        return p0

    fit_noise = fit_noise and p0.noise > 0.0
    theta = np.log([p0.lengthscale, p0.outputscale, max(p0.noise, 1e-300)])
    lo = np.full(3, -np.inf)
    hi = np.full(3, np.inf)
    if lengthscale_bounds is not None:
        lo[0], hi[0] = np.log(lengthscale_bounds)
    if outputscale_bounds is not None:
        lo[1], hi[1] = np.log(outputscale_bounds)
    theta = np.clip(theta, lo, hi)

    def unpack(t: np.ndarray) -> KernelParams:
        return replace(
            p0,
            lengthscale=float(np.exp(t[0])),
            outputscale=float(np.exp(t[1])),
            noise=p0.noise if not fit_noise else float(np.exp(t[2])),
        )

    try:
        best, grad = log_marginal_likelihood(points, labels, unpack(theta))
    except SolverError:
        return p0
    if not np.isfinite(best):
        return p0

    for _ in range(steps):
        if not fit_noise:
            grad = grad.copy()
            grad[2] = 0.0
        step = lr * grad
        accepted = False
        for _ in range(10):
            cand = np.clip(theta + step, lo, hi)
            try:
                val, g = log_marginal_likelihood(points, labels, unpack(cand))
            except SolverError:
                val = -np.inf
            if np.isfinite(val) and val >= best and np.any(cand != theta):
                theta, best, grad = cand, val, g
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    return unpack(theta)
