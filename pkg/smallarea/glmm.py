"""Unit-level random-intercept logit model fitted by Laplace-approximated ML.

    logit(pi_dj) = x_dj' beta + u_d,   u_d ~ N(0, sigma_u^2)

The marginal likelihood of each domain is the integral over u_d of the
Bernoulli likelihood times the normal density. The Laplace approximation
evaluates the integrand at the conditional mode u_hat_d and corrects by the
curvature c_d there:

    log L_d ~= l_d(u_hat_d) - log(sigma_u) - 0.5 * log(c_d)

where l_d(u) = sum_j [y_j eta_j - log(1 + exp(eta_j))] - u^2 / (2 sigma_u^2).
The outer problem is solved over (beta, theta = log sigma_u), unconstrained,
with the L-BFGS quasi-Newton method.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, sparse
from scipy.special import expit

from smallarea.data_model import Dataset
from smallarea.errors import (
    DimensionMismatch,
    InnerNoConvergence,
    InsufficientDomains,
    InvalidConfig,
    NoConvergence,
    RankDeficientDesign,
    Separation,
    UnknownDomain,
)

logger = logging.getLogger(__name__)

PROB_MIN = np.finfo(float).tiny
PROB_MAX = np.nextafter(1.0, 0.0)


@dataclass
class FitConfig:
    inner_tol: float = 1e-8
    inner_max_iter: int = 100
    outer_tol: float = 1e-6
    outer_max_iter: int = 500
    sigma_init: float = 0.5
    standardize: bool = False
    gradient: str = "analytic"  # or "numeric" (3-point finite differences)
    max_halvings: int = 30
    separation_bound: float = 50.0
    sigma_floor: float = 1e-6

    def __post_init__(self):
        for name in ("inner_tol", "outer_tol", "sigma_init", "separation_bound", "sigma_floor"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"FitConfig.{name} must be > 0, got {getattr(self, name)}")
        for name in ("inner_max_iter", "outer_max_iter"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"FitConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.gradient not in ("analytic", "numeric"):
            raise InvalidConfig(f"FitConfig.gradient must be 'analytic' or 'numeric', got {self.gradient!r}")

    @staticmethod
    def from_dict(data: Optional[Dict[str, Any]]) -> "FitConfig":
        data = dict(data or {})
        known = {k: v for k, v in data.items() if k in FitConfig.__dataclass_fields__}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise InvalidConfig(f"Unknown fit option(s): {unknown}")
        return FitConfig(**known)


@dataclass(frozen=True)
class GlmmFit:
    indicator: str
    beta: Tuple[float, ...]
    sigma_u: float
    u_hat: Dict[str, float]
    loglik: float
    converged: bool
    iterations: int
    level: str = "municipality"
    indicator_index: Optional[int] = None
    beta_se: Optional[Tuple[float, ...]] = None
    covariate_names: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def p(self) -> int:
        return len(self.beta) - 1

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["beta"] = list(self.beta)
        out["beta_se"] = None if self.beta_se is None else list(self.beta_se)
        out["covariate_names"] = list(self.covariate_names)
        return out

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "GlmmFit":
        se = data.get("beta_se")
        return GlmmFit(
            indicator=str(data["indicator"]),
            beta=tuple(float(b) for b in data["beta"]),
            sigma_u=float(data["sigma_u"]),
            u_hat={str(k): float(v) for k, v in data.get("u_hat", {}).items()},
            loglik=float(data["loglik"]),
            converged=bool(data["converged"]),
            iterations=int(data["iterations"]),
            level=str(data.get("level", "municipality")),
            indicator_index=data.get("indicator_index"),
            beta_se=None if se is None else tuple(float(s) for s in se),
            covariate_names=tuple(data.get("covariate_names", ())),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=4, sort_keys=True)
        return path

    @staticmethod
    def load(path: str | Path) -> "GlmmFit":
        with open(path, "r") as f:
            return GlmmFit.from_dict(json.load(f))


class _SigmaAtBoundary(Exception):
    pass


@dataclass
class _Problem:
    X: np.ndarray  # (n, p+1), intercept first
    y: np.ndarray
    groups: np.ndarray
    codes: np.ndarray
    G: sparse.csr_matrix  # (D, n) domain membership

    @property
    def D(self) -> int:
        return len(self.codes)


def _design(covariates: np.ndarray) -> np.ndarray:
    covariates = np.asarray(covariates, dtype=float)
    return np.column_stack([np.ones(covariates.shape[0]), covariates])


def _problem(data: Dataset, indicator_index: int, level: str, X: Optional[np.ndarray] = None) -> _Problem:
    y = np.asarray(data.indicators[:, indicator_index], dtype=float)
    if np.isnan(y).any():
        raise ValueError(f"Indicator {data.indicator_names[indicator_index]!r} has missing values in the fit data")
    codes, groups = data.groups(level)
    n = data.n
    G = sparse.csr_matrix((np.ones(n), (groups, np.arange(n))), shape=(len(codes), n))
    return _Problem(X=_design(data.covariates) if X is None else X, y=y, groups=groups, codes=codes, G=G)


def _cond_logdens(eta_fixed, prob: _Problem, u, prec):
    eta = eta_fixed + u[prob.groups]
    ll = np.bincount(prob.groups, weights=prob.y * eta - np.logaddexp(0.0, eta), minlength=prob.D)
    return ll - 0.5 * prec * u * u


def _modes(prob: _Problem, beta: np.ndarray, sigma: float, config: FitConfig, u0=None):
    """Conditional modes and curvatures for all domains at once (Newton with step-halving)."""
    prec = 1.0 / (sigma * sigma)
    eta_fixed = prob.X @ beta
    u = np.zeros(prob.D) if u0 is None else np.array(u0, dtype=float)
    f = _cond_logdens(eta_fixed, prob, u, prec)
    for it in range(1, config.inner_max_iter + 1):
        pi = expit(eta_fixed + u[prob.groups])
        grad = np.bincount(prob.groups, weights=prob.y - pi, minlength=prob.D) - prec * u
        curv = np.bincount(prob.groups, weights=pi * (1.0 - pi), minlength=prob.D) + prec
        step = grad / curv
        scale = np.ones(prob.D)
        for _ in range(config.max_halvings + 1):
            cand = u + scale * step
            f_cand = _cond_logdens(eta_fixed, prob, cand, prec)
            worse = f_cand < f - 1e-12 * (1.0 + np.abs(f))
            if not worse.any():
                break
            scale[worse] *= 0.5
        u, f = cand, f_cand
        if np.max(np.abs(step)) < config.inner_tol:
            break
    else:
        raise InnerNoConvergence(f"Inner Newton did not converge in {config.inner_max_iter} iterations")
    pi = expit(eta_fixed + u[prob.groups])
    curv = np.bincount(prob.groups, weights=pi * (1.0 - pi), minlength=prob.D) + prec
    return u, curv


def inner_modes(
    beta: Sequence[float],
    sigma_u: float,
    data: Dataset,
    indicator_index: int,
    config: Optional[FitConfig] = None,
    level: str = "municipality",
) -> Dict[str, Tuple[float, float]]:
    """Domain -> (conditional mode of u_d, negative second derivative there)."""
    if not sigma_u > 0:
        raise ValueError(f"inner_modes needs sigma_u > 0, got {sigma_u}")
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (data.p + 1,):
        raise DimensionMismatch(f"beta has length {beta.shape[0]}, expected {data.p + 1}")
    prob = _problem(data, indicator_index, level)
    u, curv = _modes(prob, beta, float(sigma_u), config or FitConfig())
    return {str(c): (float(m), float(h)) for c, m, h in zip(prob.codes, u, curv)}


def _laplace(prob: _Problem, params: np.ndarray, config: FitConfig, u0=None, with_grad: bool = True):
    beta, theta = params[:-1], float(params[-1])
    sigma = np.exp(theta)
    prec = np.exp(-2.0 * theta)
    u, curv = _modes(prob, beta, sigma, config, u0)
    eta = prob.X @ beta + u[prob.groups]
    pi = expit(eta)
    l_d = np.bincount(prob.groups, weights=prob.y * eta - np.logaddexp(0.0, eta), minlength=prob.D) - 0.5 * prec * u * u
    ll = float(np.sum(l_d - theta - 0.5 * np.log(curv)))
    if not with_grad:
        return ll, None, u

    h = pi * (1.0 - pi)
    hp = h * (1.0 - 2.0 * pi)
    Hx = prob.G @ (h[:, None] * prob.X)  # (D, q)
    Hpx = prob.G @ (hp[:, None] * prob.X)
    hp_d = np.asarray(prob.G @ hp).ravel()
    du_dbeta = -Hx / curv[:, None]
    du_dtheta = 2.0 * u * prec / curv
    dc_dbeta = Hpx + hp_d[:, None] * du_dbeta
    dc_dtheta = hp_d * du_dtheta - 2.0 * prec

    g_beta = prob.X.T @ (prob.y - pi) - 0.5 * np.sum(dc_dbeta / curv[:, None], axis=0)
    g_theta = float(np.sum(u * u * prec - 1.0 - 0.5 * dc_dtheta / curv))
    return ll, np.append(g_beta, g_theta), u


def laplace_loglik(
    data: Dataset,
    indicator_index: int,
    beta: Sequence[float],
    sigma_u: float,
    config: Optional[FitConfig] = None,
    level: str = "municipality",
) -> Tuple[float, np.ndarray]:
    """Laplace log-likelihood and its gradient w.r.t. (beta, log sigma_u)."""
    prob = _problem(data, indicator_index, level)
    params = np.append(np.asarray(beta, dtype=float), np.log(sigma_u))
    ll, grad, _ = _laplace(prob, params, config or FitConfig())
    return ll, grad


def _logistic_loglik(X, y, beta) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_fit(X: np.ndarray, y: np.ndarray, bound: float = 50.0, tol: float = 1e-10, max_iter: int = 200):
    """Plain logistic regression by Newton-Raphson. Returns (beta, loglik, iterations)."""
    beta = np.zeros(X.shape[1])
    ll = _logistic_loglik(X, y, beta)
    for it in range(1, max_iter + 1):
        pi = expit(X @ beta)
        grad = X.T @ (y - pi)
        H = X.T @ (X * (pi * (1.0 - pi))[:, None])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise Separation("Logistic information matrix became singular (perfect separation)")
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            ll_cand = _logistic_loglik(X, y, cand)
            if ll_cand >= ll - 1e-12 * (1.0 + abs(ll)):
                break
            t *= 0.5
        beta, ll = cand, ll_cand
        if np.max(np.abs(beta)) > bound:
            j = int(np.argmax(np.abs(beta)))
            raise Separation(f"Coefficient {j} diverged (|beta| > {bound:g}); the data are separated")
        if np.max(np.abs(t * step)) < tol:
            return beta, ll, it
    logger.warning(f"Logistic start did not converge in {max_iter} iterations")
    return beta, ll, max_iter


def _standardizer(covariates: np.ndarray):
    center = covariates.mean(axis=0)
    scale = covariates.std(axis=0)
    scale[scale == 0] = 1.0
    # beta_original = A @ beta_standardized
    q = covariates.shape[1] + 1
    A = np.eye(q)
    A[1:, 1:] = np.diag(1.0 / scale)
    A[0, 1:] = -center / scale
    return (covariates - center) / scale, A


def _observed_information(prob: _Problem, params: np.ndarray, config: FitConfig, u0) -> np.ndarray:
    h = 1e-5
    q = params.shape[0]
    H = np.empty((q, q))
    for i in range(q):
        e = np.zeros(q)
        e[i] = h
        _, g_plus, _ = _laplace(prob, params + e, config, u0)
        _, g_minus, _ = _laplace(prob, params - e, config, u0)
        H[:, i] = (g_plus - g_minus) / (2.0 * h)
    return -0.5 * (H + H.T)


def _beta_se(prob: _Problem, params: np.ndarray, config: FitConfig, u0, A: Optional[np.ndarray]):
    try:
        info = _observed_information(prob, params, config, u0)
        cov = np.linalg.inv(info)[:-1, :-1]
    except (np.linalg.LinAlgError, ArithmeticError):
        return None
    if A is not None:
        cov = A @ cov @ A.T
    var = np.diag(cov)
    if not np.all(np.isfinite(var)) or np.any(var <= 0):
        return None
    return tuple(float(s) for s in np.sqrt(var))


def fit(
    data: Dataset,
    indicator_index: int,
    config: Optional[FitConfig] = None,
    level: str = "municipality",
    strict: bool = False,
) -> GlmmFit:
    """Fit the random-intercept logit model for one indicator.

    With `strict=True` a non-converged outer optimisation raises NoConvergence
    instead of returning the best iterate with `converged=False`.
    """
    config = config or FitConfig()
    name = data.indicator_names[indicator_index]
    X = _design(data.covariates)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientDesign(f"{name}: design matrix with intercept has rank < {X.shape[1]}")
    A = None
    if config.standardize:
        Xs, A = _standardizer(data.covariates)
        X = _design(Xs)
    prob = _problem(data, indicator_index, level, X=X)

    try:
        beta0, ll0, _ = logistic_fit(X, prob.y, bound=config.separation_bound)
    except Separation as e:
        raise Separation(f"{name}: {e}") from None
    if prob.D < 2:
        raise InsufficientDomains(f"{name}: the random intercept needs at least 2 domains, got {prob.D}")

    state: Dict[str, Any] = {"u": None, "best": (-np.inf, None, None), "nit": 0}
    log_floor = np.log(config.sigma_floor)

    def objective(x):
        ll, grad, u = _laplace(prob, x, config, state["u"], with_grad=config.gradient == "analytic")
        if np.isfinite(ll):
            state["u"] = u
            if ll > state["best"][0]:
                state["best"] = (ll, np.array(x), u)
        if grad is None:
            return -ll
        return -ll, -grad

    def callback(xk, *args):
        state["nit"] += 1
        big = np.abs(xk[:-1]) > config.separation_bound
        if big.any():
            raise Separation(
                f"{name}: coefficient {int(np.argmax(big))} diverged (|beta| > {config.separation_bound:g})"
            )
        if xk[-1] < log_floor:
            raise _SigmaAtBoundary()

    x0 = np.append(beta0, np.log(config.sigma_init))
    gtol = config.outer_tol * max(1.0, abs(ll0))
    jac = True if config.gradient == "analytic" else "3-point"
    try:
        res = optimize.minimize(
            objective,
            x0,
            jac=jac,
            method="L-BFGS-B",
            callback=callback,
            options={"gtol": gtol, "ftol": 1e-15, "maxiter": config.outer_max_iter},
        )
        x_final = res.x
        if x_final[-1] < log_floor:
            raise _SigmaAtBoundary()
    except _SigmaAtBoundary:
        return _boundary_fit(data, indicator_index, name, X, prob, A, config, level, state["nit"])

    ll_final, grad_final, u_final = _laplace(prob, x_final, config, state["u"])
    converged = bool(np.max(np.abs(grad_final)) <= gtol)
    if not converged and state["best"][1] is not None and state["best"][0] > ll_final:
        ll_final, x_final, u_final = state["best"]
        _, grad_final, u_final = _laplace(prob, x_final, config, u_final)
    if not converged:
        msg = f"{name}: outer optimisation stopped after {res.nit} iterations (|grad| = {np.max(np.abs(grad_final)):.3g} > {gtol:.3g})"
        if strict:
            raise NoConvergence(msg)
        logger.warning(msg)

    beta = x_final[:-1] if A is None else A @ x_final[:-1]
    sigma = float(np.exp(x_final[-1]))
    se = _beta_se(prob, x_final, config, u_final, A)
    out = GlmmFit(
        indicator=name,
        beta=tuple(float(b) for b in beta),
        sigma_u=sigma,
        u_hat={str(c): float(v) for c, v in zip(prob.codes, u_final)},
        loglik=float(ll_final),
        converged=converged,
        iterations=int(res.nit),
        level=level,
        indicator_index=int(indicator_index),
        beta_se=se,
        covariate_names=tuple(data.covariate_names),
    )
    logger.info(
        f"Fitted {name}: beta={np.round(beta, 4).tolist()} sigma_u={sigma:.4f} "
        f"loglik={ll_final:.3f} iterations={res.nit} converged={converged}"
    )
    return out


def _boundary_fit(data, indicator_index, name, X, prob, A, config, level, nit) -> GlmmFit:
    logger.info(f"{name}: sigma_u reached the boundary (< {config.sigma_floor:g}); refitting as plain logistic")
    beta, ll, it = logistic_fit(X, prob.y, bound=config.separation_bound)
    se = None
    try:
        pi = expit(X @ beta)
        cov = np.linalg.inv(X.T @ (X * (pi * (1.0 - pi))[:, None]))
        if A is not None:
            cov = A @ cov @ A.T
        se = tuple(float(s) for s in np.sqrt(np.diag(cov)))
    except np.linalg.LinAlgError:
        pass
    if A is not None:
        beta = A @ beta
    return GlmmFit(
        indicator=name,
        beta=tuple(float(b) for b in beta),
        sigma_u=0.0,
        u_hat={str(c): 0.0 for c in prob.codes},
        loglik=float(ll),
        converged=True,
        iterations=int(nit + it),
        level=level,
        indicator_index=int(indicator_index),
        beta_se=se,
        covariate_names=tuple(data.covariate_names),
    )


def linear_predictor(fit: GlmmFit, covariates: np.ndarray, codes: Sequence[str]) -> np.ndarray:
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    if covariates.shape[1] != fit.p:
        raise DimensionMismatch(f"{fit.indicator}: got {covariates.shape[1]} covariates, model has {fit.p}")
    beta = np.asarray(fit.beta)
    u = np.array([fit.u_hat.get(str(c), 0.0) for c in codes], dtype=float)
    return beta[0] + covariates @ beta[1:] + u


def clip_probability(p):
    return np.clip(p, PROB_MIN, PROB_MAX)


def predict_proba(fit: GlmmFit, covariates: np.ndarray, codes: Sequence[str]) -> np.ndarray:
    """Plug-in probabilities for many units; unknown domains use u_d = 0."""
    return clip_probability(expit(linear_predictor(fit, covariates, codes)))


def predict_plugin(fit: GlmmFit, covariates: Sequence[float], domain: str) -> float:
    x = np.asarray(covariates, dtype=float)
    if x.ndim != 1 or x.shape[0] != fit.p:
        raise DimensionMismatch(f"{fit.indicator}: expected {fit.p} covariates, got shape {x.shape}")
    return float(predict_proba(fit, x[None, :], [domain])[0])


def plugin_proportion(fit: GlmmFit, census: Dataset, survey: Dataset, indicator_index: int) -> Dict[str, float]:
    """Per-domain (sum of sampled y + sum of predicted pi over non-sampled units) / N_d."""
    level = fit.level
    codes, g_c = census.groups(level)
    N_d = np.bincount(g_c, minlength=len(codes)).astype(float)
    if (N_d == 0).any():
        raise UnknownDomain(f"Census domain {codes[int(np.argmax(N_d == 0))]!r} has no units")
    pihat = predict_proba(fit, census.covariates, census.codes(level))
    y_s = survey.indicators[:, indicator_index]
    if np.isnan(y_s).any():
        raise ValueError(f"{fit.indicator}: survey values must be fully observed")
    position = {str(c): i for i, c in enumerate(codes)}
    s_group = np.array([position.get(str(c), -1) for c in survey.codes(level)], dtype=np.int64)
    keep = s_group >= 0
    sum_y = np.bincount(s_group[keep], weights=y_s[keep], minlength=len(codes))

    if survey.source_rows is not None and (survey.source_rows < census.n).all():
        sampled = np.zeros(census.n, dtype=bool)
        sampled[survey.source_rows] = True
        r_sum = np.bincount(g_c, weights=np.where(sampled, 0.0, pihat), minlength=len(codes))
        prop = (sum_y + r_sum) / N_d
    else:
        n_d = np.bincount(s_group[keep], minlength=len(codes)).astype(float)
        mean_pi = np.bincount(g_c, weights=pihat, minlength=len(codes)) / N_d
        r_count = np.maximum(N_d - n_d, 0.0)
        prop = (sum_y + r_count * mean_pi) / np.maximum(N_d, n_d)
    return {str(c): float(v) for c, v in zip(codes, np.clip(prop, 0.0, 1.0))}


__all__ = [
    "FitConfig",
    "GlmmFit",
    "fit",
    "inner_modes",
    "laplace_loglik",
    "logistic_fit",
    "linear_predictor",
    "predict_proba",
    "predict_plugin",
    "plugin_proportion",
    "clip_probability",
]
