from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from smallarea.data_model import Schema, check_alignment, load_dataset, save_dataset
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

MINIMAL = Schema(muni="domain", dept=None, weight=None, covariates=["x1"], indicators=["y1"])


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadDataset:
    def test_minimal_file(self, tmp_path):
        path = _write(tmp_path, "domain,x1,y1\n05001,0.5,1\n05001,1.5,0\n08001,2.5,1\n")
        data = load_dataset(path, "survey", MINIMAL)
        assert (data.n, data.p, data.K) == (3, 1, 1)
        assert data.muni.tolist() == ["05001", "05001", "08001"]
        assert data.dept.tolist() == ["05", "05", "08"]
        assert data.covariates[:, 0].tolist() == [0.5, 1.5, 2.5]
        assert data.weights.tolist() == [1.0, 1.0, 1.0]

    def test_missing_tokens(self, tmp_path):
        path = _write(tmp_path, "domain,x1,y1\n05001,0.5,NA\n05001,1.5,\n08001,2.5,1\n")
        data = load_dataset(path, "survey", MINIMAL)
        assert np.isnan(data.indicators[:2, 0]).all()
        assert not data.fully_observed(0)

    def test_non_binary_indicator(self, tmp_path):
        path = _write(tmp_path, "domain,x1,y1\n05001,0.5,1\n05001,1.5,2\n")
        with pytest.raises(NonBinaryIndicator, match="row 2"):
            load_dataset(path, "survey", MINIMAL)

    @pytest.mark.parametrize("value", ["inf", "abc", "nan"])
    def test_non_finite_covariate(self, tmp_path, value):
        path = _write(tmp_path, f"domain,x1,y1\n05001,{value},1\n")
        with pytest.raises(NonFiniteCovariate):
            load_dataset(path, "survey", MINIMAL)

    def test_missing_column(self, tmp_path):
        path = _write(tmp_path, "domain,x1\n05001,0.5\n")
        with pytest.raises(MissingColumn):
            load_dataset(path, "survey", MINIMAL)

    def test_census_may_omit_indicator_columns(self, tmp_path):
        path = _write(tmp_path, "domain,x1\n05001,0.5\n")
        data = load_dataset(path, "census", MINIMAL)
        assert data.K == 1 and np.isnan(data.indicators).all()

    def test_empty_dataset(self, tmp_path):
        path = _write(tmp_path, "domain,x1,y1\n")
        with pytest.raises(EmptyDataset):
            load_dataset(path, "survey", MINIMAL)

    def test_non_positive_weight(self, tmp_path):
        path = _write(tmp_path, "domain_muni,weight,x_1,y_1\n05001,0,0.5,1\n")
        with pytest.raises(InvalidWeight):
            load_dataset(path, "survey")

    def test_municipality_in_two_departments(self, tmp_path):
        path = _write(tmp_path, "domain_dept,domain_muni,x_1,y_1\n05,05001,0.5,1\n08,05001,0.1,0\n")
        with pytest.raises(DomainHierarchyError):
            load_dataset(path, "survey")

    def test_prefix_columns_detected(self, tmp_path):
        path = _write(tmp_path, "domain_dept,domain_muni,weight,x_1,x_2,y_1,y_2\n05,05001,2.5,1,2,0,1\n")
        data = load_dataset(path, "survey")
        assert data.covariate_names == ("x_1", "x_2")
        assert data.indicator_names == ("y_1", "y_2")
        assert data.weights.tolist() == [2.5]

    def test_438_municipalities_under_24_departments(self, tmp_path):
        lines = ["domain_dept,domain_muni,x_1,y_1"]
        codes = [(f"{h:02d}", f"{h:02d}{i:03d}") for h in range(1, 25) for i in range(1, 19)] + [
            (f"{h:02d}", f"{h:02d}{100:03d}") for h in range(1, 7)
        ]
        assert len(codes) == 438
        for j, (dept, muni) in enumerate(codes):
            lines.append(f"{dept},{muni},{j * 0.01},{j % 2}")
            lines.append(f"{dept},{muni},{j * 0.02},{(j + 1) % 2}")
        data = load_dataset(_write(tmp_path, "\n".join(lines) + "\n"), "survey")
        assert len(data.domain_index) == 438
        assert len(data.index("department")) == 24

    def test_domain_index_partitions_records(self, tmp_path, make_dataset):
        rng = np.random.default_rng(4)
        muni = rng.choice(["05001", "05002", "08001", "11001"], size=200)
        data = make_dataset(muni, rng.normal(size=200), rng.integers(0, 2, size=200))
        for level in ("municipality", "department"):
            rows = np.concatenate(list(data.index(level).values()))
            assert np.sort(rows).tolist() == list(range(200))
            for code, idx in data.index(level).items():
                assert set(data.codes(level)[idx].tolist()) == {code}


class TestRoundTrip:
    def test_save_then_load_is_identity(self, tmp_path, make_dataset):
        rng = np.random.default_rng(5)
        n = 50
        Y = rng.integers(0, 2, size=(n, 3)).astype(float)
        Y[rng.random((n, 3)) < 0.1] = np.nan
        data = make_dataset(
            rng.choice(["05001", "05002", "08001"], size=n),
            rng.normal(size=(n, 2)) * 1e3,
            Y,
            weights=rng.uniform(0.5, 40.0, size=n),
        )
        path = save_dataset(data, tmp_path / "out.csv")
        back = load_dataset(path, "survey")
        np.testing.assert_array_equal(back.muni, data.muni)
        np.testing.assert_array_equal(back.dept, data.dept)
        np.testing.assert_array_equal(back.covariates, data.covariates)
        np.testing.assert_array_equal(back.indicators, data.indicators)
        np.testing.assert_array_equal(back.weights, data.weights)
        assert back.records == data.records

    def test_reals_parse_to_the_nearest_double(self, tmp_path, make_dataset):
        data = make_dataset(["05001", "05001"], [110.68190031254177, 0.1 + 0.2], [0, 1], weights=[17.299999999999997, 1.0])
        path = save_dataset(data, tmp_path / "out.csv")
        assert "110.68190031254177" in path.read_text()
        back = load_dataset(path, "survey")
        assert back.covariates[:, 0].tolist() == [110.68190031254177, 0.1 + 0.2]
        assert back.weights.tolist() == [17.299999999999997, 1.0]

    def test_codes_keep_leading_zeros(self, tmp_path, make_dataset):
        data = make_dataset(["05001", "05001"], [1.0, 2.0], [0, 1])
        path = save_dataset(data, tmp_path / "out.csv")
        assert pd.read_csv(path, dtype=str)["domain_muni"].tolist() == ["05001", "05001"]


def _pair(make_dataset, survey_domains, census_domains, spec):
    survey = make_dataset(survey_domains, np.arange(len(survey_domains)), np.zeros((len(survey_domains), spec.K)))
    Y = np.zeros((len(census_domains), spec.K))
    Y[:, spec.missing] = np.nan
    census = make_dataset(census_domains, np.arange(len(census_domains)), Y, role="census")
    return survey, census


class TestAlignment:
    spec = IndicatorSpec((0.5, 0.5), z=0.4, census_missing=frozenset({1}))

    def test_out_of_sample_count(self, make_dataset):
        census_domains = [f"{h:02d}{i:03d}" for h in range(1, 34) for i in range(34)]
        assert len(census_domains) == 1122
        survey_domains = census_domains[:438]
        survey, census = _pair(make_dataset, survey_domains, census_domains, self.spec)
        report = check_alignment(survey, census, self.spec)
        assert len(report.out_of_sample) == 684
        assert len(report.in_sample) == 438
        assert report.survey_only == []
        assert report.summary()["out_of_sample"] == 684

    def test_same_domains(self, make_dataset):
        domains = ["05001", "05002", "08001"]
        survey, census = _pair(make_dataset, domains, domains, self.spec)
        assert check_alignment(survey, census, self.spec).out_of_sample == []

    def test_covariate_order_matters(self, make_dataset):
        survey = make_dataset(["05001"], [[1.0, 2.0]], [[0.0, 1.0]])
        census = replace(
            make_dataset(["05001"], [[2.0, 1.0]], [[0.0, np.nan]], role="census"), covariate_names=("x_2", "x_1")
        )
        with pytest.raises(CovariateMismatch):
            check_alignment(survey, census, self.spec)
        with pytest.raises(CovariateMismatch):
            check_alignment(census, survey, self.spec)

    def test_census_observing_missing_indicator(self, make_dataset):
        survey, _ = _pair(make_dataset, ["05001"], ["05001"], self.spec)
        census = make_dataset(["05001"], [0.0], [[0.0, 1.0]], role="census")
        with pytest.raises(SpecInconsistent):
            check_alignment(survey, census, self.spec)

    def test_deterministic(self, make_dataset):
        survey, census = _pair(make_dataset, ["05001", "08001"], ["05001", "08001", "11001"], self.spec)
        a = check_alignment(survey, census, self.spec)
        b = check_alignment(survey, census, self.spec)
        assert a == b
