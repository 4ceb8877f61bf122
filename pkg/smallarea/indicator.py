import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from smallarea.errors import EmptyDomain, InvalidSpec, MissingIndicatorValue

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12
# Scores are sums of decimal weights; q = z must stay non-poor after rounding.
SCORE_TOL = 1e-12


@dataclass(frozen=True)
class IndicatorSpec:
    """Composite index definition.

    `census_missing` holds 0-based indicator indices; the JSON form uses
    1-based indices (see `from_dict` / `to_dict`).
    """

    weights: tuple
    z: float = 0.4
    census_missing: frozenset = field(default_factory=frozenset)
    names: tuple = ()

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "census_missing", frozenset(int(k) for k in self.census_missing))
        names = tuple(self.names) if self.names else tuple(f"y_{k + 1}" for k in range(len(weights)))
        object.__setattr__(self, "names", names)
        self.validate()

    def validate(self) -> None:
        if len(self.weights) == 0:
            raise InvalidSpec("An index needs at least one indicator.")
        if any((not np.isfinite(w)) or w < 0 for w in self.weights):
            raise InvalidSpec(f"Weights must be finite and non-negative, got {list(self.weights)}")
        total = float(np.sum(self.weights))
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidSpec(f"Weights must sum to 1 (got {total!r}); they are not renormalised.")
        if not (0.0 < self.z < 1.0):
            raise InvalidSpec(f"Threshold z must lie in (0, 1), got {self.z}")
        if len(self.names) != self.K:
            raise InvalidSpec(f"{len(self.names)} names for {self.K} indicators")
        bad = [k for k in self.census_missing if not 0 <= k < self.K]
        if bad:
            raise InvalidSpec(f"census_missing indices out of range: {[k + 1 for k in bad]}")

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def missing(self) -> List[int]:
        """Census-missing indices in ascending order."""
        return sorted(self.census_missing)

    @property
    def observed(self) -> List[int]:
        return [k for k in range(self.K) if k not in self.census_missing]

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    def with_missing(self, census_missing) -> "IndicatorSpec":
        return IndicatorSpec(self.weights, self.z, frozenset(census_missing), self.names)

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "IndicatorSpec":
        missing = data.get("census_missing", [])
        return IndicatorSpec(
            weights=tuple(data["weights"]),
            z=float(data.get("z", 0.4)),
            census_missing=frozenset(int(k) - 1 for k in missing),
            names=tuple(data.get("names", ())),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weights": list(self.weights),
            "z": self.z,
            "census_missing": [k + 1 for k in self.missing],
            "names": list(self.names),
        }

    @staticmethod
    def load(path: str | Path) -> "IndicatorSpec":
        with open(path, "r") as f:
            data = json.load(f)
        return IndicatorSpec.from_dict(data.get("spec", data))


def default_spec() -> IndicatorSpec:
    """Eight-indicator index: six at 1/10, education and employment at 2/10, z = 0.4.

    The last two (education, employment) are the ones a census does not observe.
    """
    return IndicatorSpec(
        weights=(0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2, 0.2),
        z=0.4,
        census_missing=frozenset({6, 7}),
        names=(
            "housing_materials",
            "overcrowding",
            "drinking_water",
            "sanitation",
            "internet",
            "electricity",
            "education",
            "employment",
        ),
    )


def deprivation_score(y: Sequence[float], spec: IndicatorSpec) -> float:
    """q = sum_k w_k y_k for one unit with all K indicators present."""
    values = np.asarray(y, dtype=float)
    if values.shape != (spec.K,):
        raise MissingIndicatorValue(f"Expected {spec.K} indicator values, got {values.shape}")
    if np.isnan(values).any():
        raise MissingIndicatorValue(f"Indicator values missing at {np.flatnonzero(np.isnan(values)).tolist()}")
    return float(np.dot(spec.weight_array, values))


def scores(Y: np.ndarray, spec: IndicatorSpec) -> np.ndarray:
    """Row-wise deprivation scores of an (N, K) 0/1 matrix."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[1] != spec.K:
        raise MissingIndicatorValue(f"Expected an (N, {spec.K}) indicator matrix, got {Y.shape}")
    if np.isnan(Y).any():
        raise MissingIndicatorValue("Indicator matrix has missing cells.")
    return Y @ spec.weight_array


def is_poor(q, z: float):
    """1 iff q > z strictly. Works elementwise on arrays.

    Scores at most SCORE_TOL (1e-12) above z count as q = z and are not poor;
    summed decimal weights such as 0.1 + 0.2 + 0.1 give 0.4000000000000001.
    """
    flag = np.asarray(q, dtype=float) - z > SCORE_TOL
    if flag.ndim == 0:
        return int(flag)
    return flag.astype(np.int8)


def headcount(domain_indicators: np.ndarray, spec: IndicatorSpec) -> float:
    """H = (1/N_d) sum_j I(q_j > z) over the rows of one domain."""
    Y = np.asarray(domain_indicators, dtype=float)
    if Y.ndim != 2 or Y.shape[0] == 0:
        raise EmptyDomain("Headcount of an empty domain is undefined.")
    return float(np.mean(is_poor(scores(Y, spec), spec.z)))


def observed_score(Y: np.ndarray, spec: IndicatorSpec) -> np.ndarray:
    """Partial scores from the census-observed indicators only."""
    Y = np.asarray(Y, dtype=float)
    cols = spec.observed
    if not cols:
        return np.zeros(Y.shape[0])
    part = Y[:, cols]
    if np.isnan(part).any():
        raise MissingIndicatorValue("Census-observed indicators have missing cells.")
    return part @ spec.weight_array[cols]


def spec_from_config(data: Optional[Dict[str, Any]]) -> IndicatorSpec:
    if not data:
        return default_spec()
    base = default_spec().to_dict()
    base.update(data)
    if "weights" in data and "names" not in data:
        base.pop("names")
    return IndicatorSpec.from_dict(base)


__all__ = [
    "IndicatorSpec",
    "default_spec",
    "deprivation_score",
    "scores",
    "is_poor",
    "headcount",
    "observed_score",
    "spec_from_config",
]
