"""Low-dimensional Bayesian first guess for the regression background.

A sample of spatially uniform parameter sets is drawn in the bounds
hypercube and costed with the multi-gauge J. Each member is weighted by
``L_i = exp(-2**alpha * (J_i / J_min - 1)**2)`` times its prior density,
giving a posterior mean and variance. The decay exponent ``alpha`` is picked
on the L-curve of (J at the posterior mean, Mahalanobis distance between the
posterior mean and the plain sample average).
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateWeights, NonPositiveJmin, ZeroVarianceComponent
from .model import N_PARAMS

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = tuple(range(-1, 11))


@dataclass
class EnsembleSample:
    members: np.ndarray            # (N, 4)
    density: np.ndarray            # (N,) prior density f(theta_i)
    costs: np.ndarray | None = None

    @property
    def size(self):
        return self.members.shape[0]

    @property
    def j_min(self):
        return float(np.min(self.costs))

    def to_csv(self):
        lines = ["member,cp,cft,kexc,lr,J"]
        for i, (m, j) in enumerate(zip(self.members, self.costs)):
            lines.append(f"{i},{m[0]!r},{m[1]!r},{m[2]!r},{m[3]!r},{float(j)!r}")
        return "\n".join(lines) + "\n"


@dataclass
class PosteriorEstimate:
    mean: np.ndarray
    variance: np.ndarray
    normalizer: float
    alpha: float
    prior_average: np.ndarray
    cost_shift: float = 0.0
    distance: float | None = None
    skipped_components: list = field(default_factory=list)


def sample_prior(bounds, n, seed=0, density="uniform"):
    """Draw ``n`` uniform parameter sets strictly inside the bounds."""
    if n < 1:
        raise ValueError("sample size must be positive")
    if density != "uniform":
        raise ValueError(f"unsupported prior density {density!r}")
    rng = np.random.default_rng(seed)
    u = rng.random((n, N_PARAMS))
    members = bounds.lower + bounds.width * u
    members = np.clip(members, np.nextafter(bounds.lower, np.inf),
                      np.nextafter(bounds.upper, -np.inf))
    volume = float(np.prod(bounds.width))
    return EnsembleSample(members, np.full(n, 1.0 / volume))


def cost_sample(setup, sample, threads=1):
    """Fill ``sample.costs`` with the multi-gauge J of each member.

    Members are independent; results are gathered by member index so the
    outcome does not depend on ``threads``.
    """
    evaluate = setup.cost_uniform
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            costs = list(pool.map(evaluate, sample.members))
    else:
        costs = [evaluate(m) for m in sample.members]
    sample.costs = np.asarray(costs, dtype=np.float64)
    return sample


def likelihood(j_i, j_min, alpha):
    """exp(-2**alpha * (J_i/J_min - 1)**2)."""
    if not j_min > 0:
        raise NonPositiveJmin(f"J_min = {j_min!r} must be positive")
    ratio = np.asarray(j_i, dtype=np.float64) / j_min - 1.0
    value = np.exp(-(2.0 ** alpha) * ratio * ratio)
    return float(value) if np.ndim(value) == 0 else value


def _shifted_costs(costs):
    j_min = float(np.min(costs))
    if j_min > 0:
        return costs, 0.0
    shift = 1.0 - j_min
    log.info("non-positive J_min %.6g: costs shifted by %.6g", j_min, shift)
    return costs + shift, shift


def posterior_mean_var(sample, alpha):
    costs, shift = _shifted_costs(sample.costs)
    weights = likelihood(costs, float(np.min(costs)), alpha) * sample.density
    k = float(np.sum(weights))
    if not (np.isfinite(k) and k > 0):
        raise DegenerateWeights(f"normalizer K = {k!r}")
    theta = sample.members
    mean = (weights[:, None] * theta).sum(axis=0) / k
    diff = theta - mean
    var = (weights[:, None] * diff * diff).sum(axis=0) / k
    return PosteriorEstimate(mean, var, k, alpha, theta.mean(axis=0), shift)


def mahalanobis_distance(est, on_zero="raise"):
    """Sum over components of (mean - prior average)² / variance.

    A component with zero variance and a non-zero offset has no finite
    distance; it raises ``ZeroVarianceComponent`` or, with
    ``on_zero="skip"``, is left out and listed in ``est.skipped_components``.
    """
    diff = est.mean - est.prior_average
    total = 0.0
    skipped = []
    for k in range(diff.size):
        if est.variance[k] > 0:
            total += diff[k] * diff[k] / est.variance[k]
        elif diff[k] != 0:
            skipped.append(k)
    if skipped and on_zero == "raise":
        raise ZeroVarianceComponent(skipped)
    est.distance = float(total)
    est.skipped_components = skipped
    return est.distance


def select_corner(alphas, costs, distances):
    """Index of the L-curve corner.

    Both axes are min-max normalised and the point nearest the origin wins;
    ties go to the smallest alpha. If every distance is zero the smallest
    alpha with minimal cost is returned.
    """
    costs = np.asarray(costs, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    if np.all(distances == 0):
        return int(np.flatnonzero(costs == costs.min())[0])

    def unit(v):
        span = v.max() - v.min()
        return np.zeros_like(v) if span == 0 else (v - v.min()) / span

    radius = np.hypot(unit(costs), unit(distances))
    return int(np.argmin(radius))


@dataclass
class LCurve:
    alphas: list
    costs: list
    distances: list
    estimates: list
    corner: int

    @property
    def alpha(self):
        return self.alphas[self.corner]

    @property
    def estimate(self):
        return self.estimates[self.corner]

    def to_csv(self):
        lines = ["alpha,J,D"]
        for a, j, d in zip(self.alphas, self.costs, self.distances):
            lines.append(f"{a},{j!r},{d!r}")
        return "\n".join(lines) + "\n"


def lcurve_select_alpha(setup, sample, alphas=DEFAULT_ALPHAS):
    """Evaluate the L-curve over ``alphas`` and return its corner."""
    costs, distances, estimates = [], [], []
    for alpha in alphas:
        est = posterior_mean_var(sample, alpha)
        distances.append(mahalanobis_distance(est, on_zero="skip"))
        costs.append(float(setup.cost_uniform(est.mean)))
        estimates.append(est)
    corner = select_corner(alphas, costs, distances)
    return LCurve(list(alphas), costs, distances, estimates, corner)


@dataclass
class LdbResult:
    prior: np.ndarray
    alpha: float
    normalizer: float
    variance: np.ndarray
    lcurve: LCurve
    sample: EnsembleSample


def ldb_first_guess(setup, n=512, seed=0, threads=1, alphas=DEFAULT_ALPHAS):
    """Sample, cost, pick alpha on the L-curve and return the posterior mean."""
    sample = sample_prior(setup.bounds, n, seed)
    cost_sample(setup, sample, threads)
    curve = lcurve_select_alpha(setup, sample, alphas)
    est = curve.estimate
    return LdbResult(est.mean.copy(), curve.alpha, est.normalizer, est.variance.copy(),
                     curve, sample)
