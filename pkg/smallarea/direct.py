"""Design-based direct estimators from the survey alone.

A domain proportion is the Hajek ratio sum(w * I) / sum(w) with the
with-replacement linearisation variance sum(w^2 (I - est)^2) / sum(w)^2.
With unit weights this reduces to est * (1 - est) / n.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from smallarea.data_model import Dataset
from smallarea.errors import MissingIndicatorValue
from smallarea.indicator import IndicatorSpec, is_poor, scores

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DirectEstimate:
    domain: str
    level: str
    estimate: float
    variance: float
    cv_percent: Optional[float]
    n: int


def _hajek(flags: np.ndarray, survey: Dataset, level: str, weighted: bool) -> List[DirectEstimate]:
    codes, groups = survey.groups(level)
    w = np.asarray(survey.weights, dtype=float) if weighted else np.ones(survey.n)
    sw = np.bincount(groups, weights=w, minlength=len(codes))
    est = np.bincount(groups, weights=w * flags, minlength=len(codes)) / sw
    resid = flags - est[groups]
    var = np.bincount(groups, weights=(w * resid) ** 2, minlength=len(codes)) / sw**2
    n = np.bincount(groups, minlength=len(codes))
    out = []
    for code, e, v, size in zip(codes, est, var, n):
        cv = float(100.0 * np.sqrt(v) / e) if e > 0 else None
        out.append(DirectEstimate(str(code), level, float(e), float(v), cv, int(size)))
    return out


def direct_headcount(
    survey: Dataset, spec: IndicatorSpec, level: str = "municipality", weighted: bool = True
) -> List[DirectEstimate]:
    """Direct H per survey domain; every indicator must be observed."""
    q = scores(survey.indicators, spec)
    return _hajek(is_poor(q, spec.z).astype(float), survey, level, weighted)


def direct_proportion(
    survey: Dataset, indicator_index: int, level: str = "municipality", weighted: bool = True
) -> List[DirectEstimate]:
    y = np.asarray(survey.indicators[:, indicator_index], dtype=float)
    if np.isnan(y).any():
        raise MissingIndicatorValue(f"{survey.indicator_names[indicator_index]!r} has missing survey values")
    return _hajek(y, survey, level, weighted)


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson r of paired values; nan when either side is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"pearson needs two equal-length vectors, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise ValueError("pearson needs at least 2 pairs")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(stats.pearsonr(a, b)[0])


def describe(values: Sequence[float]) -> Dict[str, float]:
    """min, quartiles, mean and max of the finite values."""
    s = pd.Series(np.asarray(values, dtype=float))
    s = s[np.isfinite(s)]
    if s.empty:
        return {key: float("nan") for key in ("min", "q1", "median", "mean", "q3", "max")}
    d = s.describe()
    return {
        "min": float(d["min"]),
        "q1": float(d["25%"]),
        "median": float(d["50%"]),
        "mean": float(d["mean"]),
        "q3": float(d["75%"]),
        "max": float(d["max"]),
    }


__all__ = ["DirectEstimate", "direct_headcount", "direct_proportion", "pearson", "describe"]
