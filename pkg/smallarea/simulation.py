"""Synthetic populations and the design-based evaluation of the estimator.

A population is generated once from the random-intercept logit model and kept
fixed. Each replicate t draws a sample with the chosen design, fits the models
on it, estimates H for every domain from the census view of the population
(census-missing indicators hidden) and compares with the true H.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from smallarea.data_model import LEVELS, Dataset
from smallarea.direct import describe, direct_headcount, pearson
from smallarea.errors import InvalidConfig, SAEError, SampleTooLarge, SimulationFailure
from smallarea.estimator import DomainAggregator, estimate_headcount
from smallarea.glmm import FitConfig, fit
from smallarea.indicator import IndicatorSpec, default_spec, is_poor, scores, spec_from_config
from smallarea.rng import derive_seed, stream

logger = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.10
COVARIATE_DISTS = ("normal", "uniform", "bernoulli")


def _default_beta(p: int, k: int) -> List[float]:
    slopes = [0.6 if (j + k) % 2 == 0 else -0.4 for j in range(p)]
    return [-0.5 - 0.1 * (k % 3)] + slopes


@dataclass
class PopulationConfig:
    """Generator settings.

    `domain_sizes` fixes N_d per domain; otherwise sizes are drawn uniformly
    from `size_range`. `covariate_model` has one entry per covariate:
    {"dist": "normal", "mean", "sd", "domain_sd"}, {"dist": "uniform", "low",
    "high"} or {"dist": "bernoulli", "p"}. `true_beta` / `true_sigma_u` are
    keyed by indicator column name (y_1 .. y_K); absent entries get defaults.
    """

    D: int = 100
    domain_sizes: Optional[List[int]] = None
    size_range: tuple = (200, 5000)
    n_departments: int = 10
    p: int = 2
    covariate_model: List[Dict[str, Any]] = field(default_factory=list)
    true_beta: Dict[str, List[float]] = field(default_factory=dict)
    true_sigma_u: Dict[str, float] = field(default_factory=dict)
    spec: IndicatorSpec = field(default_factory=default_spec)
    seed: int = 0

    def __post_init__(self):
        self.validate()
        names = self.indicator_names
        self.covariate_model = list(self.covariate_model) or [
            {"dist": "normal", "mean": 0.0, "sd": 1.0, "domain_sd": 0.5} for _ in range(self.p)
        ]
        self.true_beta = {n: [float(b) for b in self.true_beta.get(n, _default_beta(self.p, k))] for k, n in enumerate(names)}
        self.true_sigma_u = {n: float(self.true_sigma_u.get(n, 0.7)) for n in names}
        self._check_models()

    @property
    def indicator_names(self) -> List[str]:
        return [f"y_{k + 1}" for k in range(self.spec.K)]

    @property
    def covariate_names(self) -> List[str]:
        return [f"x_{j + 1}" for j in range(self.p)]

    def validate(self) -> None:
        if int(self.D) < 2:
            raise InvalidConfig(f"A population needs D >= 2 domains, got {self.D}")
        if int(self.p) < 0:
            raise InvalidConfig(f"p must be >= 0, got {self.p}")
        if not 1 <= int(self.n_departments) <= int(self.D):
            raise InvalidConfig(f"n_departments must lie in [1, D={self.D}], got {self.n_departments}")
        if self.domain_sizes is not None:
            if len(self.domain_sizes) != self.D:
                raise InvalidConfig(f"domain_sizes has {len(self.domain_sizes)} entries for D={self.D}")
            if min(self.domain_sizes) < 1:
                raise InvalidConfig("Every domain needs at least 1 unit")
        else:
            lo, hi = self.size_range
            if not 1 <= lo <= hi:
                raise InvalidConfig(f"size_range must satisfy 1 <= min <= max, got {tuple(self.size_range)}")

    def _check_models(self) -> None:
        if len(self.covariate_model) != self.p:
            raise InvalidConfig(f"covariate_model has {len(self.covariate_model)} entries for p={self.p}")
        for j, model in enumerate(self.covariate_model):
            if model.get("dist", "normal") not in COVARIATE_DISTS:
                raise InvalidConfig(f"Covariate {j + 1}: unknown distribution {model.get('dist')!r}")
        for name, beta in self.true_beta.items():
            if len(beta) != self.p + 1:
                raise InvalidConfig(f"true_beta[{name!r}] has {len(beta)} coefficients, expected p+1 = {self.p + 1}")
            if not np.all(np.isfinite(beta)):
                raise InvalidConfig(f"true_beta[{name!r}] is not finite")
        for name, sigma in self.true_sigma_u.items():
            if not sigma >= 0:
                raise InvalidConfig(f"true_sigma_u[{name!r}] must be >= 0, got {sigma}")

    @staticmethod
    def from_dict(data: Dict[str, Any], seed: Optional[int] = None) -> "PopulationConfig":
        data = dict(data)
        spec = spec_from_config(data.pop("spec", None))
        known = set(PopulationConfig.__dataclass_fields__) - {"spec"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidConfig(f"Unknown population option(s): {unknown}")
        if "size_range" in data:
            data["size_range"] = tuple(data["size_range"])
        if seed is not None and "seed" not in data:
            data["seed"] = seed
        return PopulationConfig(spec=spec, **data)


@dataclass(frozen=True, eq=False)
class Population:
    dataset: Dataset
    truth: Dict[str, Dict[str, float]]
    config: PopulationConfig

    @property
    def N(self) -> int:
        return self.dataset.n


def _domain_codes(config: PopulationConfig):
    width = max(3, len(str(config.D)))
    dept_of = [d % config.n_departments for d in range(config.D)]
    dept = [f"{h + 1:02d}" for h in dept_of]
    muni = [f"{dept[d]}{d + 1:0{width}d}" for d in range(config.D)]
    return np.array(muni, dtype=object), np.array(dept, dtype=object)


def _covariate(model: Dict[str, Any], rng: np.random.Generator, groups: np.ndarray, D: int) -> np.ndarray:
    n = groups.shape[0]
    dist = model.get("dist", "normal")
    if dist == "normal":
        shift = rng.normal(0.0, float(model.get("domain_sd", 0.0)), size=D) if model.get("domain_sd", 0.0) else np.zeros(D)
        return float(model.get("mean", 0.0)) + shift[groups] + rng.normal(0.0, float(model.get("sd", 1.0)), size=n)
    if dist == "uniform":
        return rng.uniform(float(model.get("low", 0.0)), float(model.get("high", 1.0)), size=n)
    return (rng.random(n) < float(model.get("p", 0.5))).astype(float)


def true_headcounts(data: Dataset, spec: IndicatorSpec, levels: Sequence[str] = LEVELS) -> Dict[str, Dict[str, float]]:
    flags = is_poor(scores(data.indicators, spec), spec.z)
    agg = DomainAggregator(data, levels)
    means = agg.means(flags[None, :])
    return {level: {str(c): float(v) for c, v in zip(agg.codes[level], means[level][0])} for level in agg.levels}


def generate_population(config: PopulationConfig) -> Population:
    """Fully observed synthetic population with its true H per domain."""
    muni_codes, dept_codes = _domain_codes(config)
    if config.domain_sizes is not None:
        sizes = np.asarray(config.domain_sizes, dtype=np.int64)
    else:
        lo, hi = config.size_range
        sizes = stream(config.seed, "population-sizes").integers(int(lo), int(hi) + 1, size=config.D)
    groups = np.repeat(np.arange(config.D), sizes)
    N = int(groups.shape[0])

    X = np.empty((N, config.p))
    for j, model in enumerate(config.covariate_model):
        X[:, j] = _covariate(model, stream(config.seed, "population-covariates", j), groups, config.D)

    Y = np.empty((N, config.spec.K))
    for k, name in enumerate(config.indicator_names):
        rng = stream(config.seed, "population-indicators", k)
        beta = np.asarray(config.true_beta[name])
        sigma = config.true_sigma_u[name]
        u = rng.normal(0.0, sigma, size=config.D) if sigma > 0 else np.zeros(config.D)
        pi = expit(beta[0] + X @ beta[1:] + u[groups])
        Y[:, k] = (rng.random(N) < pi).astype(float)

    data = Dataset(
        role="census",
        muni=muni_codes[groups],
        dept=dept_codes[groups],
        covariates=X,
        indicators=Y,
        weights=np.ones(N),
        covariate_names=tuple(config.covariate_names),
        indicator_names=tuple(config.indicator_names),
    )
    truth = true_headcounts(data, config.spec)
    logger.info(f"Generated population: N={N}, D={config.D}, {config.n_departments} departments, seed={config.seed}")
    return Population(dataset=data, truth=truth, config=config)


@dataclass(frozen=True)
class SRS:
    """Simple random sampling without replacement of n units."""

    n: int

    @property
    def name(self) -> str:
        return f"srs{self.n}"


@dataclass(frozen=True)
class StratifiedTwoStage:
    """Strata = departments; SRS of municipalities, then SRS of units in each.

    Requests larger than a stratum or municipality take all of it.
    """

    munis_per_stratum: int
    units_per_muni: int

    @property
    def name(self) -> str:
        return f"strat{self.munis_per_stratum}x{self.units_per_muni}"


Design = Union[SRS, StratifiedTwoStage]


def design_from_dict(data: Dict[str, Any]) -> Design:
    kind = str(data.get("type", "srs")).lower()
    if kind == "srs":
        if "n" not in data or int(data["n"]) < 1:
            raise InvalidConfig(f"SRS design needs n >= 1, got {data.get('n')}")
        return SRS(int(data["n"]))
    if kind in ("stratified_two_stage", "stratified"):
        m, u = int(data.get("munis_per_stratum", 0)), int(data.get("units_per_muni", 0))
        if m < 1 or u < 1:
            raise InvalidConfig(f"Stratified design needs munis_per_stratum and units_per_muni >= 1, got {m}, {u}")
        return StratifiedTwoStage(m, u)
    raise InvalidConfig(f"Unknown design type {kind!r}")


def draw_sample(population: Dataset, design: Design, seed: int, replicate: int = 0) -> Dataset:
    """Survey sample with inverse-inclusion-probability weights; rows stay in population order."""
    rng = stream(seed, "sample", replicate)
    N = population.n
    if isinstance(design, SRS):
        if design.n > N:
            raise SampleTooLarge(f"SRS of n={design.n} from a population of N={N}")
        rows = np.sort(rng.choice(N, size=design.n, replace=False))
        return population.subset(rows, role="survey", weights=np.full(design.n, N / design.n))

    munis = population.index("municipality")
    dept_of = population.department_of()
    strata: Dict[str, List[str]] = {}
    for code in sorted(munis):
        strata.setdefault(dept_of[code], []).append(code)
    rows_parts, weight_parts = [], []
    for stratum in sorted(strata):
        members = strata[stratum]
        M_h = len(members)
        m_h = min(design.munis_per_stratum, M_h)
        chosen = rng.choice(M_h, size=m_h, replace=False)
        for i in np.sort(chosen):
            units = munis[members[i]]
            N_i = units.shape[0]
            n_i = min(design.units_per_muni, N_i)
            picked = units[rng.choice(N_i, size=n_i, replace=False)]
            rows_parts.append(picked)
            weight_parts.append(np.full(n_i, (M_h / m_h) * (N_i / n_i)))
    rows = np.concatenate(rows_parts)
    weights = np.concatenate(weight_parts)
    order = np.argsort(rows)
    return population.subset(rows[order], role="survey", weights=weights[order])


@dataclass
class EstimatorConfig:
    L: int = 100
    fit: FitConfig = field(default_factory=FitConfig)
    level: str = "municipality"
    weighted_direct: bool = True


@dataclass
class DomainMetrics:
    domains: List[str]
    truth: np.ndarray
    mean_estimate: np.ndarray
    bias: np.ndarray
    rmse: np.ndarray
    cv: np.ndarray  # 100 * rmse / mean estimate, nan where the mean is 0

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"domain": self.domains, "bias": self.bias, "rmse": self.rmse, "cv": self.cv})


@dataclass
class SimulationReport:
    design: str
    T: int
    failures: int
    levels: Dict[str, DomainMetrics]
    correlation: Dict[str, float]

    def summary(self, scenario: Optional[str] = None) -> pd.DataFrame:
        """Descriptive rows of |bias|, bias, rmse and cv over domains, per level."""
        scenario = scenario or self.design
        rows = []
        for level, m in self.levels.items():
            for stat, values in (("abs_bias", np.abs(m.bias)), ("bias", m.bias), ("rmse", m.rmse), ("cv", m.cv)):
                rows.append({"scenario": f"{scenario}/{level}", "stat": stat, **describe(values)})
        return pd.DataFrame(rows, columns=["scenario", "stat", "min", "q1", "median", "mean", "q3", "max"])


def _metrics(estimates: np.ndarray, truth: np.ndarray, domains: List[str]) -> DomainMetrics:
    errors = estimates - truth[None, :]
    bias = errors.mean(axis=0)
    sd = np.sqrt(np.mean((errors - bias[None, :]) ** 2, axis=0))
    rmse = np.hypot(bias, sd)
    mean_est = estimates.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = np.where(mean_est > 0, 100.0 * rmse / mean_est, np.nan)
    return DomainMetrics(domains, truth, mean_est, bias, rmse, cv)


def _replicate(t, population, census, design, spec, cfg, seed, agg):
    sample = draw_sample(population.dataset, design, seed, t)
    fits = {k: fit(sample, k, cfg.fit, level=cfg.level) for k in spec.missing}
    estimates = estimate_headcount(census, fits, spec, L=cfg.L, seed=derive_seed(seed, "simulate-estimate", t), levels=agg.levels)
    h_hat = {(e.level, e.domain): e.h_hat for e in estimates}
    out, corr = {}, {}
    for level in agg.levels:
        out[level] = np.array([h_hat[(level, str(c))] for c in agg.codes[level]])
        direct = direct_headcount(sample, spec, level=level, weighted=cfg.weighted_direct)
        if len(direct) >= 2:
            corr[level] = pearson([h_hat[(level, d.domain)] for d in direct], [d.estimate for d in direct])
        else:
            corr[level] = float("nan")
    return out, corr


def run_design_simulation(
    population: Population,
    design: Design,
    spec: IndicatorSpec,
    T: int = 100,
    estimator_config: Optional[EstimatorConfig] = None,
    seed: int = 0,
    workers: int = 1,
) -> SimulationReport:
    """Bias, RMSE and CV of H_hat over T samples of the fixed population."""
    if int(T) < 2:
        raise InvalidConfig(f"A design-based simulation needs T >= 2, got {T}")
    cfg = estimator_config or EstimatorConfig()
    census = population.dataset.hide(spec.missing)
    agg = DomainAggregator(census)

    def run(t):
        try:
            return _replicate(t, population, census, design, spec, cfg, seed, agg)
        except SAEError as e:
            logger.warning(f"{design.name} replicate {t}: {type(e).__name__}: {e}; excluded")
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(T)))
    else:
        results = [run(t) for t in range(T)]

    ok = [r for r in results if r is not None]
    failures = T - len(ok)
    if failures > MAX_FAILURE_SHARE * T or len(ok) == 0:
        raise SimulationFailure(f"{design.name}: {failures} of {T} replicates failed")

    levels = {}
    correlation = {}
    for level in agg.levels:
        domains = [str(c) for c in agg.codes[level]]
        truth = np.array([population.truth[level][d] for d in domains])
        levels[level] = _metrics(np.vstack([r[0][level] for r in ok]), truth, domains)
        corr = np.array([r[1][level] for r in ok])
        correlation[level] = float(np.nanmean(corr)) if np.isfinite(corr).any() else float("nan")
    report = SimulationReport(design=design.name, T=T, failures=failures, levels=levels, correlation=correlation)
    m = levels["municipality"]
    logger.info(
        f"{design.name}: T={T} ({failures} failed), median |bias|={np.median(np.abs(m.bias)):.4g}, "
        f"median rmse={np.median(m.rmse):.4g}, mean r(direct, model)={correlation['municipality']:.3f}"
    )
    return report


@dataclass
class Scenario:
    """A population plus the designs to evaluate on it."""

    population: PopulationConfig
    designs: Dict[str, Design]
    T: int = 100
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)

    @staticmethod
    def from_dict(data: Dict[str, Any], seed: int = 0) -> "Scenario":
        population = PopulationConfig.from_dict(data.get("population", {}), seed=seed)
        designs_raw = data.get("designs") or [{"type": "srs", "n": 500}]
        designs: Dict[str, Design] = {}
        for item in designs_raw:
            design = design_from_dict(item)
            designs[str(item.get("name", design.name))] = design
        estimator = EstimatorConfig(
            L=int(data.get("L", 100)),
            fit=FitConfig.from_dict(data.get("fit")),
            level=str(data.get("level", "municipality")),
            weighted_direct=bool(data.get("weighted_direct", True)),
        )
        if estimator.level not in LEVELS:
            raise InvalidConfig(f"level must be one of {LEVELS}, got {estimator.level!r}")
        return Scenario(population=population, designs=designs, T=int(data.get("T", 100)), estimator=estimator)

    @staticmethod
    def load(path: str | Path, seed: int = 0) -> "Scenario":
        with open(path, "r") as f:
            data = json.load(f)
        return Scenario.from_dict(data.get("simulation", data), seed=seed)


def write_reports(reports: Dict[str, SimulationReport], out_dir: str | Path) -> List[Path]:
    """One per-domain CSV per scenario and level plus a combined summary CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    summaries = []
    for scenario, report in reports.items():
        for level, metrics in report.levels.items():
            path = out_dir / f"simulation_{scenario}_{level}.csv"
            metrics.frame().to_csv(path, index=False, float_format="%.12g")
            written.append(path)
        summaries.append(report.summary(scenario))
    path = out_dir / "simulation_summary.csv"
    pd.concat(summaries, ignore_index=True).to_csv(path, index=False, float_format="%.12g")
    written.append(path)
    return written


__all__ = [
    "PopulationConfig",
    "Population",
    "generate_population",
    "true_headcounts",
    "SRS",
    "StratifiedTwoStage",
    "design_from_dict",
    "draw_sample",
    "EstimatorConfig",
    "DomainMetrics",
    "SimulationReport",
    "run_design_simulation",
    "Scenario",
    "write_reports",
]
