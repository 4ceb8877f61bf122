"""Exact reference values for the estimator and the model fit.

- Closed-form probability that one unit is poor when one or two of its
  indicators are unknown Bernoulli draws of equal weight alpha.
- Exhaustive enumeration of E[H_d] for small domains.
- Adaptive Gauss-Hermite marginal log-likelihood of the random-intercept logit
  model, the target the Laplace approximation is checked against.

The closed forms use the half-open case boundaries of their derivation:
with gap = delta - k the unit is poor outright when gap <= 0.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import logsumexp

from smallarea.data_model import Dataset
from smallarea.errors import EmptyDomain, InvalidConfig, QuadratureUnderflow, TooLargeToEnumerate, WrongArity
from smallarea.glmm import FitConfig, _modes, _problem
from smallarea.indicator import IndicatorSpec, is_poor, observed_score

logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 24


@dataclass(frozen=True)
class UnitPovertyProblem:
    alpha: float
    k: float
    delta: float
    pis: tuple

    def __post_init__(self):
        object.__setattr__(self, "pis", tuple(float(p) for p in self.pis))
        if not self.alpha > 0:
            raise InvalidConfig(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.k <= 1.0:
            raise InvalidConfig(f"k must lie in [0, 1], got {self.k}")
        if not 0.0 < self.delta < 1.0:
            raise InvalidConfig(f"delta must lie in (0, 1), got {self.delta}")
        if any(not 0.0 <= p <= 1.0 for p in self.pis):
            raise InvalidConfig(f"probabilities must lie in [0, 1], got {list(self.pis)}")

    @property
    def gap(self) -> float:
        return self.delta - self.k


def expected_poor_one_missing(p: UnitPovertyProblem) -> float:
    """P(k + alpha * Y >= delta) for Y ~ Bernoulli(pi)."""
    if len(p.pis) != 1:
        raise WrongArity(f"Expected 1 probability, got {len(p.pis)}")
    (pi,) = p.pis
    if p.gap <= 0:
        return 1.0
    if p.gap <= p.alpha:
        return pi
    return 0.0


def expected_poor_two_missing(p: UnitPovertyProblem) -> float:
    """P(k + alpha * (Y1 + Y2) >= delta) for independent Y1, Y2."""
    if len(p.pis) != 2:
        raise WrongArity(f"Expected 2 probabilities, got {len(p.pis)}")
    pi1, pi2 = p.pis
    if p.gap <= 0:
        return 1.0
    if p.gap <= p.alpha:
        return pi2 * (1.0 - pi1) + pi1 * (1.0 - pi2) + pi1 * pi2
    if p.gap <= 2.0 * p.alpha:
        return pi1 * pi2
    return 0.0


def enumerate_expected_headcount(domain_rows: np.ndarray, pihat: np.ndarray, spec: IndicatorSpec) -> float:
    """Exact E[H_d] over every outcome of the missing indicators.

    `domain_rows` is the (n, K) census block of one domain (missing columns
    may hold NaN); `pihat` is (n, m) in `spec.missing` order. Units are poor
    iff q > z, the rule the Monte Carlo estimator uses.
    """
    rows = np.atleast_2d(np.asarray(domain_rows, dtype=float))
    n, m = rows.shape[0], len(spec.missing)
    if n * m > ENUMERATION_LIMIT:
        raise TooLargeToEnumerate(f"{n} units x {m} missing indicators exceeds 2^{ENUMERATION_LIMIT} outcomes")
    if n == 0:
        raise EmptyDomain("An empty domain has no expected headcount")
    pihat = np.asarray(pihat, dtype=float).reshape(n, m)
    base = observed_score(rows, spec)
    w = spec.weight_array[spec.missing]
    prob_poor = np.zeros(n)
    for outcome in itertools.product((0, 1), repeat=m):
        y = np.asarray(outcome, dtype=float)
        p = np.prod(np.where(y == 1, pihat, 1.0 - pihat), axis=1)
        prob_poor += p * is_poor(base + float(np.dot(w, y)), spec.z)
    return float(np.mean(prob_poor))


def gh_marginal_loglik(
    data: Dataset,
    indicator_index: int,
    beta: Sequence[float],
    sigma_u: float,
    nodes: int = 50,
    level: str = "municipality",
    config: Optional[FitConfig] = None,
) -> float:
    """Marginal log-likelihood by adaptive Gauss-Hermite quadrature.

    Each domain integral is centred at the conditional mode of u_d and scaled
    by 1/sqrt(curvature) there; the node sum is taken in log space.
    """
    if int(nodes) < 5:
        raise InvalidConfig(f"Quadrature needs at least 5 nodes, got {nodes}")
    if not sigma_u > 0:
        raise InvalidConfig(f"gh_marginal_loglik needs sigma_u > 0, got {sigma_u}")
    beta = np.asarray(beta, dtype=float)
    prob = _problem(data, indicator_index, level)
    u_hat, curv = _modes(prob, beta, float(sigma_u), config or FitConfig())
    scale = 1.0 / np.sqrt(curv)

    t, wts = hermgauss(int(nodes))
    U = u_hat[:, None] + np.sqrt(2.0) * scale[:, None] * t[None, :]  # (D, nodes)
    eta = (prob.X @ beta)[:, None] + U[prob.groups]
    terms = prob.y[:, None] * eta - np.logaddexp(0.0, eta)
    ll_nodes = np.asarray(prob.G @ terms)  # (D, nodes)
    log_prior = -0.5 * (U / sigma_u) ** 2 - np.log(sigma_u) - 0.5 * np.log(2.0 * np.pi)
    log_terms = np.log(wts)[None, :] + t[None, :] ** 2 + ll_nodes + log_prior
    per_domain = np.log(np.sqrt(2.0) * scale) + logsumexp(log_terms, axis=1)
    total = float(np.sum(per_domain))
    if not np.isfinite(total):
        raise QuadratureUnderflow(f"Quadrature log-likelihood is {total} (sigma_u={sigma_u}, nodes={nodes})")
    return total


__all__ = [
    "UnitPovertyProblem",
    "expected_poor_one_missing",
    "expected_poor_two_missing",
    "enumerate_expected_headcount",
    "gh_marginal_loglik",
]
