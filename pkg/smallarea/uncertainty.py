"""Parametric-bootstrap MSE of the headcount estimator and CV reporting.

Each bootstrap replicate b regenerates the census-missing indicators of every
census unit from the fitted models (fresh domain effects u*), takes the true
headcount of that superpopulation, re-estimates it from the bootstrap sample
and records the squared error. MSE is the mean over replicates.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from smallarea.data_model import LEVELS, Dataset
from smallarea.errors import (
    BootstrapFitFailure,
    InsufficientSample,
    InvalidConfig,
    SAEError,
    ZeroEstimate,
)
from smallarea.estimator import DomainAggregator, HeadcountEstimate, check_fits, estimate_headcount
from smallarea.glmm import FitConfig, GlmmFit, fit, inner_modes
from smallarea.indicator import IndicatorSpec, is_poor, observed_score
from smallarea.rng import derive_seed, stream

logger = logging.getLogger(__name__)


@dataclass
class BootstrapConfig:
    B: int = 200
    L_inner: Optional[int] = None  # None: the estimator's L
    refit: bool = True
    seed: int = 0
    max_retries: int = 3

    def __post_init__(self):
        if int(self.B) < 2:
            raise InvalidConfig(f"Bootstrap needs B >= 2, got {self.B}")
        if self.L_inner is not None and int(self.L_inner) < 1:
            raise InvalidConfig(f"L_inner must be >= 1, got {self.L_inner}")
        if int(self.max_retries) < 0:
            raise InvalidConfig(f"max_retries must be >= 0, got {self.max_retries}")
        self.B = int(self.B)

    @staticmethod
    def from_dict(data: Optional[Dict[str, Any]], seed: int = 0) -> "BootstrapConfig":
        data = dict(data or {})
        unknown = sorted(set(data) - set(BootstrapConfig.__dataclass_fields__))
        if unknown:
            raise InvalidConfig(f"Unknown bootstrap option(s): {unknown}")
        data.setdefault("seed", seed)
        return BootstrapConfig(**data)


def cv(h_hat: float, mse: float) -> float:
    """Coefficient of variation in percent: 100 * sqrt(mse) / h_hat."""
    if not np.isfinite(mse) or mse < 0:
        raise ValueError(f"mse must be finite and >= 0, got {mse}")
    if h_hat <= 0:
        raise ZeroEstimate(f"CV is undefined for h_hat = {h_hat}")
    return float(100.0 * np.sqrt(mse) / h_hat)


def _check_survey(survey: Dataset, fits: Mapping[int, GlmmFit]) -> None:
    for k, model in fits.items():
        n_domains = len(survey.groups(model.level)[0])
        if survey.n < model.p + 2 or n_domains < 2:
            raise InsufficientSample(
                f"{model.indicator}: {survey.n} survey units in {n_domains} domains cannot support a refit "
                f"with {model.p + 1} coefficients and a random intercept"
            )
        if not survey.fully_observed(k):
            raise InsufficientSample(f"{model.indicator}: survey values must be fully observed")


def _domain_effects(rng: np.random.Generator, sigma: float, codes: np.ndarray) -> Dict[str, float]:
    draws = rng.normal(0.0, sigma, size=len(codes)) if sigma > 0 else np.zeros(len(codes))
    return {str(c): float(v) for c, v in zip(codes, draws)}


def _eta(model: GlmmFit, covariates: np.ndarray, codes: np.ndarray, effects: Dict[str, float]) -> np.ndarray:
    beta = np.asarray(model.beta)
    u = np.array([effects[str(c)] for c in codes], dtype=float)
    return beta[0] + covariates @ beta[1:] + u


def _linked(survey: Dataset, census: Dataset) -> bool:
    rows = survey.source_rows
    return rows is not None and rows.shape[0] == survey.n and bool((rows < census.n).all())


def _refresh_modes(model: GlmmFit, data: Dataset, k: int, fit_config: FitConfig) -> GlmmFit:
    """Keep beta and sigma_u; recompute the conditional modes on `data`."""
    if model.sigma_u > 0:
        modes = inner_modes(model.beta, model.sigma_u, data, k, fit_config, model.level)
        u_hat = {c: m for c, (m, _) in modes.items()}
    else:
        u_hat = {str(c): 0.0 for c in data.groups(model.level)[0]}
    return replace(model, u_hat=u_hat)


def bootstrap_replicate(
    b: int,
    census: Dataset,
    survey: Dataset,
    fits: Mapping[int, GlmmFit],
    spec: IndicatorSpec,
    config: BootstrapConfig,
    fit_config: FitConfig,
    L_inner: int,
    agg: DomainAggregator,
    q_obs: np.ndarray,
) -> Dict[str, np.ndarray]:
    """Squared errors (H^(b) - H_hat^(b))^2 per level, in `agg.codes` order."""
    w = spec.weight_array
    linked = _linked(survey, census)
    last_error: Optional[Exception] = None
    for attempt in range(config.max_retries + 1):
        rng = stream(config.seed, "bootstrap", b, attempt)
        q_star = q_obs.copy()
        Y_s = np.array(survey.indicators, dtype=float)
        for k in spec.missing:
            model = fits[k]
            census_codes = census.codes(model.level)
            survey_codes = survey.codes(model.level)
            domains = np.union1d(census.groups(model.level)[0], survey.groups(model.level)[0])
            effects = _domain_effects(rng, model.sigma_u, domains)
            pi_star = expit(_eta(model, census.covariates, census_codes, effects))
            y_star = (rng.random(census.n) < pi_star).astype(float)
            q_star += w[k] * y_star
            if linked:
                Y_s[:, k] = y_star[survey.source_rows]
            else:
                pi_s = expit(_eta(model, survey.covariates, survey_codes, effects))
                Y_s[:, k] = (rng.random(survey.n) < pi_s).astype(float)

        truth = agg.means(is_poor(q_star, spec.z)[None, :])
        sample = survey.with_indicators(Y_s)
        try:
            if config.refit:
                fits_b = {k: fit(sample, k, fit_config, level=fits[k].level, strict=True) for k in spec.missing}
            else:
                fits_b = {k: _refresh_modes(fits[k], sample, k, fit_config) for k in spec.missing}
        except SAEError as e:
            last_error = e
            logger.warning(f"Bootstrap replicate {b} attempt {attempt + 1}: {type(e).__name__}: {e}; redrawing")
            continue

        estimates = estimate_headcount(
            census,
            fits_b,
            spec,
            L=L_inner,
            seed=derive_seed(config.seed, "bootstrap-estimate", b),
            workers=1,
            levels=agg.levels,
        )
        h_hat = {(e.level, e.domain): e.h_hat for e in estimates}
        out = {}
        for level in agg.levels:
            est = np.array([h_hat[(level, str(c))] for c in agg.codes[level]])
            out[level] = (truth[level][0] - est) ** 2
        return out
    raise BootstrapFitFailure(
        f"Bootstrap replicate {b} failed {config.max_retries + 1} times; last error: {type(last_error).__name__}: {last_error}"
    )


def bootstrap_mse(
    census: Dataset,
    survey: Dataset,
    fits: Mapping[int, GlmmFit],
    spec: IndicatorSpec,
    config: Optional[BootstrapConfig] = None,
    fit_config: Optional[FitConfig] = None,
    L: int = 100,
    workers: int = 1,
    levels: Sequence[str] = LEVELS,
) -> Dict[str, Dict[str, float]]:
    """Bootstrap MSE of H_hat, {level: {domain: mse}}; deterministic given config.seed."""
    config = config or BootstrapConfig()
    fit_config = fit_config or FitConfig()
    check_fits(fits, spec, census)
    _check_survey(survey, fits)
    L_inner = int(config.L_inner or L)
    agg = DomainAggregator(census, levels)
    q_obs = observed_score(census.indicators, spec)
    mode = "refit" if config.refit else "fixed parameters"
    logger.info(f"Bootstrap: B={config.B}, L_inner={L_inner}, {mode}, seed={config.seed}")

    def run(b):
        return bootstrap_replicate(b, census, survey, fits, spec, config, fit_config, L_inner, agg, q_obs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(config.B)))
    else:
        results = [run(b) for b in range(config.B)]

    mse: Dict[str, Dict[str, float]] = {}
    for level in agg.levels:
        total = np.zeros(len(agg.codes[level]))
        for res in results:
            total = total + res[level]
        mse[level] = {str(c): float(v) for c, v in zip(agg.codes[level], total / config.B)}
    return mse


def attach_mse(estimates: Sequence[HeadcountEstimate], mse: Mapping[str, Mapping[str, float]]) -> List[HeadcountEstimate]:
    """Copies of `estimates` with mse and cv_percent filled (cv None where h_hat = 0)."""
    out = []
    for e in estimates:
        m = float(mse[e.level][e.domain])
        try:
            c = cv(e.h_hat, m)
        except ZeroEstimate:
            logger.warning(f"{e.level} {e.domain}: h_hat = 0, CV undefined")
            c = None
        out.append(replace(e, mse=m, cv_percent=c))
    return out


def write_mse(estimates: Sequence[HeadcountEstimate], path: str | Path, B: int, refit: bool) -> Path:
    rows = [
        {
            "domain": e.domain,
            "level": e.level,
            "h_hat": e.h_hat,
            "mse": e.mse,
            "rmse": None if e.mse is None else float(np.sqrt(e.mse)),
            "cv_percent": e.cv_percent,
            "B": B,
            "refit": str(bool(refit)).lower(),
        }
        for e in estimates
    ]
    path = Path(path)
    columns = ["domain", "level", "h_hat", "mse", "rmse", "cv_percent", "B", "refit"]
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.12g")
    return path


__all__ = [
    "BootstrapConfig",
    "cv",
    "bootstrap_replicate",
    "bootstrap_mse",
    "attach_mse",
    "write_mse",
]
