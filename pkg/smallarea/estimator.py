"""Monte Carlo point estimator of the headcount H for every census domain.

For each census unit the plug-in probabilities of the census-missing
indicators are computed once. Each replicate l draws the missing indicators
independently from those probabilities, combines them with the observed
census indicators and evaluates H per domain; H_hat is the replicate mean.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import sparse

from smallarea.data_model import LEVELS, Dataset
from smallarea.errors import FitMissing, IncompatibleSpec, InvalidConfig, MissingIndicatorValue
from smallarea.glmm import GlmmFit, predict_proba
from smallarea.indicator import IndicatorSpec, is_poor, observed_score
from smallarea.rng import stream

logger = logging.getLogger(__name__)

# Cells per replicate block; the block layout depends on the census size only.
BLOCK_CELLS = 1 << 21
MAX_BLOCK = 1024


@dataclass
class HeadcountEstimate:
    domain: str
    level: str
    h_hat: float
    replicates: int
    mc_stderr: float
    n_units: int
    mse: Optional[float] = None
    cv_percent: Optional[float] = None

    def __post_init__(self):
        if self.cv_percent is not None and self.mse is None:
            raise ValueError("cv_percent needs an mse")


class DomainAggregator:
    """Unit-level 0/1 flags -> per-domain means, at both hierarchy levels."""

    def __init__(self, census: Dataset, levels: Sequence[str] = LEVELS):
        self.levels = tuple(levels)
        self.codes: Dict[str, np.ndarray] = {}
        self.sizes: Dict[str, np.ndarray] = {}
        self._means: Dict[str, sparse.csc_matrix] = {}
        n = census.n
        for level in self.levels:
            codes, groups = census.groups(level)
            sizes = np.bincount(groups, minlength=len(codes))
            M = sparse.csr_matrix((1.0 / sizes[groups], (np.arange(n), groups)), shape=(n, len(codes)))
            self.codes[level] = codes
            self.sizes[level] = sizes
            self._means[level] = M.T.tocsr()

    def means(self, flags: np.ndarray) -> Dict[str, np.ndarray]:
        """flags (B, N) -> {level: (B, D_level)}."""
        flags = np.atleast_2d(flags).astype(float)
        return {level: np.asarray(self._means[level] @ flags.T).T for level in self.levels}


def check_fits(fits: Mapping[int, GlmmFit], spec: IndicatorSpec, census: Dataset) -> None:
    if census.K != spec.K:
        raise IncompatibleSpec(f"Census has {census.K} indicators, the index defines {spec.K}")
    absent = [spec.names[k] for k in spec.missing if k not in fits]
    if absent:
        raise FitMissing(f"No fitted model for census-missing indicator(s) {absent}")
    extra = sorted(set(fits) - set(spec.census_missing))
    if extra:
        raise IncompatibleSpec(f"Fits given for indicators the census observes: {[spec.names[k] for k in extra]}")


def compute_pihat(census: Dataset, fits: Mapping[int, GlmmFit], spec: IndicatorSpec) -> np.ndarray:
    """(N, m) plug-in probabilities, columns in `spec.missing` order."""
    check_fits(fits, spec, census)
    cols = [predict_proba(fits[k], census.covariates, census.codes(fits[k].level)) for k in spec.missing]
    if not cols:
        return np.zeros((census.n, 0))
    return np.column_stack(cols)


def _pihat_matrix(pihat, spec: IndicatorSpec, n: int) -> np.ndarray:
    if isinstance(pihat, Mapping):
        cols = [np.asarray(pihat[k], dtype=float) for k in spec.missing]
        pihat = np.column_stack(cols) if cols else np.zeros((n, 0))
    pihat = np.asarray(pihat, dtype=float).reshape(n, len(spec.missing))
    if ((pihat < 0) | (pihat > 1) | np.isnan(pihat)).any():
        raise IncompatibleSpec("Probabilities must lie in [0, 1]")
    return pihat


def _observed_part(census: Dataset, spec: IndicatorSpec) -> np.ndarray:
    try:
        return observed_score(census.indicators, spec)
    except MissingIndicatorValue as e:
        raise IncompatibleSpec(str(e)) from None


def single_mc_replicate(
    census: Dataset,
    pihat,
    spec: IndicatorSpec,
    rng: np.random.Generator,
    level: str = "municipality",
) -> Dict[str, float]:
    """One replicate H^(l) per domain.

    `pihat` is an (N, m) array in `spec.missing` order or a mapping
    indicator index -> (N,) probabilities. Missing indicators are drawn in
    ascending index order from `rng`.
    """
    pihat = _pihat_matrix(pihat, spec, census.n)
    q = _observed_part(census, spec).copy()
    w = spec.weight_array
    for i, k in enumerate(spec.missing):
        q += w[k] * (rng.random(census.n) < pihat[:, i])
    agg = DomainAggregator(census, levels=(level,))
    h = agg.means(is_poor(q, spec.z)[None, :])[level][0]
    return {str(c): float(v) for c, v in zip(agg.codes[level], h)}


def block_layout(n_units: int, L: int) -> List[tuple]:
    size = max(1, min(MAX_BLOCK, BLOCK_CELLS // max(n_units, 1)))
    return [(b, start, min(start + size, L)) for b, start in enumerate(range(0, L, size))]


def replicate_headcounts(
    q_obs: np.ndarray,
    pihat: np.ndarray,
    spec: IndicatorSpec,
    agg: DomainAggregator,
    L: int,
    seed: int,
    workers: int = 1,
    label: str = "estimate",
) -> Dict[str, tuple]:
    """Run L replicates; returns {level: (sum over l of H^(l), sum of squares)}."""
    n = q_obs.shape[0]
    w = spec.weight_array
    missing = spec.missing

    def run_block(layout):
        b, start, stop = layout
        q = np.tile(q_obs, (stop - start, 1))
        for i, k in enumerate(missing):
            draws = stream(seed, label, b, k).random((stop - start, n))
            q += w[k] * (draws < pihat[:, i])
        h = agg.means(is_poor(q, spec.z))
        return {level: (h[level].sum(axis=0), (h[level] ** 2).sum(axis=0)) for level in agg.levels}

    layout = block_layout(n, L)
    totals = {level: (np.zeros(len(agg.codes[level])), np.zeros(len(agg.codes[level]))) for level in agg.levels}
    if workers > 1 and len(layout) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_block, layout))
    else:
        results = [run_block(item) for item in layout]
    # fixed block order keeps the sums bit-identical for any worker count
    for res in results:
        for level in agg.levels:
            s, ss = totals[level]
            totals[level] = (s + res[level][0], ss + res[level][1])
    return totals


def estimate_headcount(
    census: Dataset,
    fits: Mapping[int, GlmmFit],
    spec: IndicatorSpec,
    L: int = 100,
    seed: int = 0,
    workers: int = 1,
    pihat: Optional[np.ndarray] = None,
    levels: Sequence[str] = LEVELS,
) -> List[HeadcountEstimate]:
    """H_hat per domain (both levels by default), deterministic given seed."""
    if int(L) < 1:
        raise InvalidConfig(f"L must be >= 1, got {L}")
    L = int(L)
    if pihat is None:
        pihat = compute_pihat(census, fits, spec)
    else:
        if census.K != spec.K:
            raise IncompatibleSpec(f"Census has {census.K} indicators, the index defines {spec.K}")
        pihat = _pihat_matrix(pihat, spec, census.n)
    q_obs = _observed_part(census, spec)
    agg = DomainAggregator(census, levels)
    totals = replicate_headcounts(q_obs, pihat, spec, agg, L, seed, workers)

    out: List[HeadcountEstimate] = []
    for level in agg.levels:
        s, ss = totals[level]
        mean = s / L
        if L > 1:
            var = np.maximum(ss - s * s / L, 0.0) / (L - 1)
            stderr = np.sqrt(var / L)
        else:
            stderr = np.zeros_like(mean)
        for code, h, se, size in zip(agg.codes[level], mean, stderr, agg.sizes[level]):
            out.append(
                HeadcountEstimate(
                    domain=str(code),
                    level=level,
                    h_hat=float(np.clip(h, 0.0, 1.0)),
                    replicates=L,
                    mc_stderr=float(se),
                    n_units=int(size),
                )
            )
    logger.info(f"Estimated H for {len(out)} domains from {census.n} census units with L={L} (seed={seed})")
    return out


def estimates_frame(estimates: Sequence[HeadcountEstimate]) -> pd.DataFrame:
    return pd.DataFrame([asdict(e) for e in estimates])


def write_estimates(estimates: Sequence[HeadcountEstimate], path: str | Path, seed: int) -> Path:
    rows = [
        {"domain": e.domain, "level": e.level, "h_hat": e.h_hat, "mc_stderr": e.mc_stderr, "L": e.replicates, "seed": seed}
        for e in estimates
    ]
    path = Path(path)
    pd.DataFrame(rows, columns=["domain", "level", "h_hat", "mc_stderr", "L", "seed"]).to_csv(
        path, index=False, float_format="%.12g"
    )
    return path


__all__ = [
    "HeadcountEstimate",
    "DomainAggregator",
    "check_fits",
    "compute_pihat",
    "single_mc_replicate",
    "block_layout",
    "replicate_headcounts",
    "estimate_headcount",
    "estimates_frame",
    "write_estimates",
]
