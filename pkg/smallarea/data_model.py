"""Survey and census microdata: typed loading, validation and alignment."""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from smallarea.errors import (
    CovariateMismatch,
    DomainHierarchyError,
    EmptyDataset,
    InvalidWeight,
    MissingColumn,
    NonBinaryIndicator,
    NonFiniteCovariate,
    SpecInconsistent,
)
from smallarea.indicator import IndicatorSpec

logger = logging.getLogger(__name__)

MISSING_TOKENS = ("", "NA")
ROLES = ("survey", "census")
LEVELS = ("municipality", "department")


@dataclass(frozen=True)
class UnitRecord:
    domain: str
    department: str
    covariates: Tuple[float, ...]
    indicators: Tuple[Optional[int], ...]
    design_weight: float = 1.0


@dataclass
class Schema:
    """Column mapping of a survey/census CSV.

    Empty `covariates` / `indicators` lists mean "every column starting with
    x_ / y_, in header order". A census file may omit the indicator columns it
    does not observe. Without a department column the department code is the
    first `dept_prefix_len` characters of the municipality code.
    """

    muni: str = "domain_muni"
    dept: Optional[str] = "domain_dept"
    weight: Optional[str] = "weight"
    covariates: List[str] = field(default_factory=list)
    indicators: List[str] = field(default_factory=list)
    dept_prefix_len: int = 2

    @staticmethod
    def from_dict(data: Optional[Dict[str, Any]]) -> "Schema":
        data = dict(data or {})
        known = {k: data[k] for k in ("muni", "dept", "weight", "covariates", "indicators", "dept_prefix_len") if k in data}
        return Schema(**known)

    def resolve(self, header: Sequence[str]) -> "Schema":
        covariates = list(self.covariates) or [c for c in header if c.startswith("x_")]
        indicators = list(self.indicators) or [c for c in header if c.startswith("y_")]
        return replace(self, covariates=covariates, indicators=indicators)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column-store of unit records.

    `indicators` is an (N, K) float array with NaN for missing cells.
    `source_rows`, when set, are the positions of these units in the
    population they were sampled from.
    """

    role: str
    muni: np.ndarray
    dept: np.ndarray
    covariates: np.ndarray
    indicators: np.ndarray
    weights: np.ndarray
    covariate_names: Tuple[str, ...]
    indicator_names: Tuple[str, ...]
    source_rows: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("muni", "dept", "covariates", "indicators", "weights", "source_rows"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, copy=True)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return int(self.muni.shape[0])

    @property
    def p(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def K(self) -> int:
        return int(self.indicators.shape[1])

    def codes(self, level: str = "municipality") -> np.ndarray:
        if level == "municipality":
            return self.muni
        if level == "department":
            return self.dept
        raise ValueError(f"Unknown domain level {level!r}; expected one of {LEVELS}")

    def groups(self, level: str = "municipality") -> Tuple[np.ndarray, np.ndarray]:
        """(sorted unique domain codes, per-record group number)."""
        return self._groups[level]

    @cached_property
    def _groups(self) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        out = {}
        for level in LEVELS:
            uniq, inverse = np.unique(self.codes(level), return_inverse=True)
            out[level] = (uniq, inverse.reshape(-1))
        return out

    def index(self, level: str = "municipality") -> Dict[str, np.ndarray]:
        """Domain code -> record positions (file order). Partitions the records."""
        uniq, inverse = self.groups(level)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
        return {str(code): order[bounds[i]:bounds[i + 1]] for i, code in enumerate(uniq)}

    @property
    def domain_index(self) -> Dict[str, np.ndarray]:
        return self.index("municipality")

    def department_of(self) -> Dict[str, str]:
        return dict(zip(self.muni.tolist(), self.dept.tolist()))

    @property
    def records(self) -> List[UnitRecord]:
        out = []
        for i in range(self.n):
            ind = tuple(None if np.isnan(v) else int(v) for v in self.indicators[i])
            out.append(
                UnitRecord(
                    domain=str(self.muni[i]),
                    department=str(self.dept[i]),
                    covariates=tuple(float(v) for v in self.covariates[i]),
                    indicators=ind,
                    design_weight=float(self.weights[i]),
                )
            )
        return out

    def indicator_column(self, k: int) -> np.ndarray:
        return self.indicators[:, k]

    def fully_observed(self, k: int) -> bool:
        return not bool(np.isnan(self.indicators[:, k]).any())

    def with_indicators(self, indicators: np.ndarray, role: Optional[str] = None) -> "Dataset":
        return replace(self, indicators=np.asarray(indicators, dtype=float), role=role or self.role)

    def hide(self, columns: Sequence[int]) -> "Dataset":
        """Census view: the given indicator columns set to missing."""
        Y = np.array(self.indicators, dtype=float)
        Y[:, list(columns)] = np.nan
        return replace(self, indicators=Y, role="census")

    def subset(self, rows: np.ndarray, role: Optional[str] = None, weights: Optional[np.ndarray] = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            role=role or self.role,
            muni=self.muni[rows],
            dept=self.dept[rows],
            covariates=self.covariates[rows],
            indicators=self.indicators[rows],
            weights=self.weights[rows] if weights is None else weights,
            covariate_names=self.covariate_names,
            indicator_names=self.indicator_names,
            source_rows=rows,
        )


def _parse_indicator(col: pd.Series, name: str) -> np.ndarray:
    raw = col.str.strip()
    missing = raw.isin(MISSING_TOKENS)
    values = pd.to_numeric(raw.where(~missing), errors="coerce")
    bad = (~missing) & ~values.isin([0, 1])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise NonBinaryIndicator(f"Column {name!r} row {row + 1}: value {col.iloc[row]!r} is not 0, 1 or NA")
    return values.to_numpy(dtype=float)


def _parse_real(col: pd.Series, name: str, exc) -> np.ndarray:
    raw = col.str.strip()
    try:
        # correctly rounded, unlike pd.to_numeric
        values = raw.astype(float).to_numpy()
    except ValueError:
        values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise exc(f"Column {name!r} row {row + 1}: value {col.iloc[row]!r} is not a finite number")
    return values


def department_codes(muni: np.ndarray, dept: Optional[np.ndarray], prefix_len: int) -> np.ndarray:
    if dept is None:
        dept = np.array([m[:prefix_len] for m in muni.tolist()], dtype=object)
    pairs = pd.DataFrame({"muni": muni, "dept": dept}).drop_duplicates()
    dup = pairs["muni"].duplicated(keep=False)
    if dup.any():
        code = pairs.loc[dup, "muni"].iloc[0]
        depts = sorted(pairs.loc[pairs["muni"] == code, "dept"].tolist())
        raise DomainHierarchyError(f"Municipality {code!r} maps to several departments: {depts}")
    return np.asarray(dept, dtype=object)


def load_dataset(path: str | Path, role: str, schema: Optional[Schema] = None) -> Dataset:
    """Read a survey or census CSV into a validated Dataset (file order kept)."""
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    schema = schema or Schema()
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    header = list(frame.columns)
    schema = schema.resolve(header)

    required = [schema.muni, *schema.covariates]
    if role == "survey":
        required += schema.indicators
    absent = [c for c in required if c not in header]
    if absent:
        raise MissingColumn(f"{Path(path).name}: missing column(s) {absent}")
    if not schema.indicators:
        raise MissingColumn(f"{Path(path).name}: no indicator columns declared or found")
    if frame.shape[0] == 0:
        raise EmptyDataset(f"{Path(path).name} has a header but no records")

    muni = frame[schema.muni].str.strip().to_numpy(dtype=object)
    if (muni == "").any():
        raise DomainHierarchyError(f"{Path(path).name}: empty domain code at row {int(np.flatnonzero(muni == '')[0]) + 1}")
    dept = None
    if schema.dept and schema.dept in header:
        dept = frame[schema.dept].str.strip().to_numpy(dtype=object)
    dept = department_codes(muni, dept, schema.dept_prefix_len)

    X = np.empty((frame.shape[0], len(schema.covariates)), dtype=float)
    for j, name in enumerate(schema.covariates):
        X[:, j] = _parse_real(frame[name], name, NonFiniteCovariate)

    Y = np.full((frame.shape[0], len(schema.indicators)), np.nan)
    for k, name in enumerate(schema.indicators):
        if name in header:
            Y[:, k] = _parse_indicator(frame[name], name)

    if schema.weight and schema.weight in header:
        w = _parse_real(frame[schema.weight], schema.weight, InvalidWeight)
        if (w <= 0).any():
            raise InvalidWeight(f"{Path(path).name}: design weights must be positive")
    else:
        w = np.ones(frame.shape[0])

    data = Dataset(
        role=role,
        muni=muni,
        dept=dept,
        covariates=X,
        indicators=Y,
        weights=w,
        covariate_names=tuple(schema.covariates),
        indicator_names=tuple(schema.indicators),
    )
    logger.info(
        f"Loaded {role} {Path(path).name}: {data.n} records, p={data.p}, K={data.K}, "
        f"{len(data.groups('municipality')[0])} municipalities in {len(data.groups('department')[0])} departments"
    )
    return data


def save_dataset(data: Dataset, path: str | Path, schema: Optional[Schema] = None) -> Path:
    """Write `data` in the CSV layout `load_dataset` reads."""
    schema = schema or Schema()
    dept_col = schema.dept or "domain_dept"
    weight_col = schema.weight or "weight"
    columns: Dict[str, Any] = {
        dept_col: data.dept,
        schema.muni: data.muni,
        weight_col: data.weights,
    }
    for j, name in enumerate(data.covariate_names):
        columns[name] = data.covariates[:, j]
    for k, name in enumerate(data.indicator_names):
        col = data.indicators[:, k]
        columns[name] = np.where(np.isnan(col), "NA", np.nan_to_num(col).astype(np.int64).astype(str))
    path = Path(path)
    pd.DataFrame(columns).to_csv(path, index=False, float_format="%.17g")
    return path


@dataclass
class AlignmentReport:
    covariate_names: Tuple[str, ...]
    covariates_match: bool
    level: str
    in_sample: List[str]
    out_of_sample: List[str]
    survey_only: List[str]
    census_missing: List[str]
    census_observed: List[str]

    def summary(self) -> Dict[str, Any]:
        return {
            "level": self.level,
            "covariates": list(self.covariate_names),
            "in_sample": len(self.in_sample),
            "out_of_sample": len(self.out_of_sample),
            "survey_only": len(self.survey_only),
            "census_missing": self.census_missing,
        }


def check_alignment(survey: Dataset, census: Dataset, spec: IndicatorSpec, level: str = "municipality") -> AlignmentReport:
    """Check that a survey and a census can be combined under `spec`."""
    if tuple(survey.covariate_names) != tuple(census.covariate_names):
        raise CovariateMismatch(
            f"Covariates differ (names or order): survey {list(survey.covariate_names)} "
            f"vs census {list(census.covariate_names)}"
        )
    for data in (survey, census):
        if data.K != spec.K:
            raise SpecInconsistent(f"{data.role} has {data.K} indicators, the index defines {spec.K}")

    for k in range(spec.K):
        census_col = census.indicators[:, k]
        name = spec.names[k]
        if k in spec.census_missing:
            if not np.isnan(census_col).all():
                raise SpecInconsistent(f"Census observes {name!r}, which the index marks census-missing")
            if not survey.fully_observed(k):
                raise SpecInconsistent(f"Survey has missing values for model indicator {name!r}")
        elif np.isnan(census_col).any():
            raise SpecInconsistent(f"Census indicator {name!r} is not fully observed")

    census_domains = set(census.groups(level)[0].tolist())
    survey_domains = set(survey.groups(level)[0].tolist())
    report = AlignmentReport(
        covariate_names=tuple(census.covariate_names),
        covariates_match=True,
        level=level,
        in_sample=sorted(census_domains & survey_domains),
        out_of_sample=sorted(census_domains - survey_domains),
        survey_only=sorted(survey_domains - census_domains),
        census_missing=[spec.names[k] for k in spec.missing],
        census_observed=[spec.names[k] for k in spec.observed],
    )
    if report.survey_only:
        logger.warning(f"{len(report.survey_only)} survey {level} domain(s) have no census units; they get no estimate")
    logger.info(f"Alignment ({level}): {len(report.in_sample)} in-sample, {len(report.out_of_sample)} out-of-sample domains")
    return report


__all__ = [
    "UnitRecord",
    "Schema",
    "Dataset",
    "load_dataset",
    "save_dataset",
    "department_codes",
    "AlignmentReport",
    "check_alignment",
]
