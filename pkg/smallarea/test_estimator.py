import numpy as np
import pytest

from smallarea.errors import FitMissing, IncompatibleSpec, InvalidConfig
from smallarea.estimator import (
    HeadcountEstimate,
    block_layout,
    compute_pihat,
    estimate_headcount,
    single_mc_replicate,
    write_estimates,
)
from smallarea.glmm import GlmmFit
from smallarea.indicator import IndicatorSpec, is_poor, observed_score

SPEC = IndicatorSpec((0.3, 0.5, 0.2), z=0.4, census_missing={2})


def _fit(beta, k=2, u_hat=None):
    return GlmmFit(
        indicator=f"y_{k + 1}",
        beta=tuple(beta),
        sigma_u=0.5,
        u_hat=dict(u_hat or {}),
        loglik=0.0,
        converged=True,
        iterations=0,
        indicator_index=k,
    )


def _census(make_dataset, rng, n, n_domains=6, p=1, spec=SPEC):
    muni = [f"{d % 3 + 5:02d}{d:03d}" for d in rng.integers(0, n_domains, size=n)]
    Y = rng.integers(0, 2, size=(n, spec.K)).astype(float)
    Y[:, spec.missing] = np.nan
    return make_dataset(muni, rng.normal(size=(n, p)), Y, role="census")


def _by_domain(estimates, level="municipality"):
    return {e.domain: e for e in estimates if e.level == level}


class TestEstimateHeadcount:
    def test_zero_probability_leaves_nobody_poor(self, make_dataset):
        census = make_dataset(["05001"] * 5, np.zeros(5), [[0, 0, np.nan]] * 5, role="census")
        out = estimate_headcount(census, {}, SPEC, L=50, pihat=np.zeros((5, 1)))
        assert all(e.h_hat == 0.0 and e.mc_stderr == 0.0 for e in out)

    def test_certain_probability(self, make_dataset):
        rows = [[1, 0, np.nan], [0, 0, np.nan], [0, 1, np.nan], [1, 1, np.nan]]
        census = make_dataset(["05001"] * 4, np.zeros(4), rows, role="census")
        q = observed_score(census.indicators, SPEC)
        for value in (0.0, 1.0):
            out = _by_domain(estimate_headcount(census, {}, SPEC, L=40, pihat=np.full((4, 1), value)))
            expected = float(np.mean(is_poor(q + 0.2 * value, SPEC.z)))
            assert out["05001"].h_hat == pytest.approx(expected, abs=1e-12)
            assert out["05001"].mc_stderr < 1e-6

    def test_single_unit_matches_probability(self, make_dataset):
        census = make_dataset(["05001"], [0.0], [[1, 0, np.nan]], role="census")
        out = _by_domain(estimate_headcount(census, {}, SPEC, L=100000, seed=3, pihat=[[0.6]]))
        est = out["05001"]
        se = np.sqrt(0.6 * 0.4 / 100000)
        assert abs(est.h_hat - 0.6) <= 4 * se
        assert est.mc_stderr == pytest.approx(se, rel=0.05)
        assert est.replicates == 100000 and est.n_units == 1

    def test_deterministic_across_worker_counts(self, make_dataset):
        rng = np.random.default_rng(20)
        census = _census(make_dataset, rng, 20000, n_domains=40)
        fits = {2: _fit([-0.2, 0.8], u_hat={"05000": 0.4})}
        one = estimate_headcount(census, fits, SPEC, L=300, seed=7, workers=1)
        four = estimate_headcount(census, fits, SPEC, L=300, seed=7, workers=4)
        assert [(e.domain, e.level, e.h_hat, e.mc_stderr) for e in one] == [
            (e.domain, e.level, e.h_hat, e.mc_stderr) for e in four
        ]
        other = estimate_headcount(census, fits, SPEC, L=300, seed=8, workers=1)
        assert [e.h_hat for e in other] != [e.h_hat for e in one]

    def test_larger_probabilities_never_lower_the_estimate(self, make_dataset):
        rng = np.random.default_rng(21)
        for _ in range(20):
            census = _census(make_dataset, rng, 200)
            low = rng.uniform(0.0, 0.8, size=(200, 1))
            high = np.minimum(low + rng.uniform(0.0, 0.2, size=(200, 1)), 1.0)
            seed = int(rng.integers(1000))
            a = estimate_headcount(census, {}, SPEC, L=30, seed=seed, pihat=low)
            b = estimate_headcount(census, {}, SPEC, L=30, seed=seed, pihat=high)
            assert all(y.h_hat >= x.h_hat for x, y in zip(a, b))

    def test_department_is_size_weighted_mean_of_municipalities(self, make_dataset):
        rng = np.random.default_rng(22)
        census = _census(make_dataset, rng, 3000, n_domains=12)
        out = estimate_headcount(census, {2: _fit([0.1, 0.5])}, SPEC, L=25, seed=1)
        munis = _by_domain(out)
        for dept, est in _by_domain(out, "department").items():
            members = [m for m in munis.values() if m.domain.startswith(dept)]
            sizes = np.array([m.n_units for m in members])
            weighted = np.sum(sizes * np.array([m.h_hat for m in members])) / sizes.sum()
            assert est.h_hat == pytest.approx(weighted, abs=1e-12)
            assert est.n_units == sizes.sum()

    def test_estimates_within_unit_interval(self, make_dataset):
        rng = np.random.default_rng(23)
        census = _census(make_dataset, rng, 500)
        for e in estimate_headcount(census, {2: _fit([0.0, 2.0])}, SPEC, L=20):
            assert 0.0 <= e.h_hat <= 1.0

    def test_missing_fit(self, make_dataset):
        census = _census(make_dataset, np.random.default_rng(24), 20)
        with pytest.raises(FitMissing):
            estimate_headcount(census, {}, SPEC, L=5)

    def test_fit_for_observed_indicator(self, make_dataset):
        census = _census(make_dataset, np.random.default_rng(25), 20)
        with pytest.raises(IncompatibleSpec):
            compute_pihat(census, {2: _fit([0.0, 0.0]), 0: _fit([0.0, 0.0], k=0)}, SPEC)

    def test_indicator_count_mismatch(self, make_dataset):
        census = make_dataset(["05001"], [0.0], [[1, np.nan]], role="census")
        with pytest.raises(IncompatibleSpec):
            estimate_headcount(census, {}, SPEC, L=5, pihat=[[0.5]])

    def test_census_missing_an_observed_indicator(self, make_dataset):
        census = make_dataset(["05001"], [0.0], [[np.nan, 0, np.nan]], role="census")
        with pytest.raises(IncompatibleSpec):
            estimate_headcount(census, {}, SPEC, L=5, pihat=[[0.5]])

    def test_replicate_count(self, make_dataset):
        census = make_dataset(["05001"], [0.0], [[1, 0, np.nan]], role="census")
        with pytest.raises(InvalidConfig):
            estimate_headcount(census, {}, SPEC, L=0, pihat=[[0.5]])

    def test_write_estimates_is_reproducible(self, tmp_path, make_dataset):
        census = _census(make_dataset, np.random.default_rng(26), 400)
        fits = {2: _fit([0.3, -0.4])}
        a = write_estimates(estimate_headcount(census, fits, SPEC, L=30, seed=5), tmp_path / "a.csv", seed=5)
        b = write_estimates(estimate_headcount(census, fits, SPEC, L=30, seed=5), tmp_path / "b.csv", seed=5)
        assert a.read_bytes() == b.read_bytes()
        assert a.read_text().splitlines()[0] == "domain,level,h_hat,mc_stderr,L,seed"


class TestSingleReplicate:
    def test_mapping_and_array_agree(self, make_dataset):
        rng = np.random.default_rng(27)
        census = _census(make_dataset, rng, 100)
        pi = rng.random(100)
        a = single_mc_replicate(census, {2: pi}, SPEC, np.random.default_rng(1))
        b = single_mc_replicate(census, pi[:, None], SPEC, np.random.default_rng(1))
        assert a == b

    def test_draws_are_bernoulli(self, make_dataset):
        census = make_dataset(["05001"] * 2, np.zeros(2), [[1, 0, np.nan], [0, 0, np.nan]], role="census")
        values = {
            single_mc_replicate(census, [[0.5], [0.5]], SPEC, np.random.default_rng(s))["05001"] for s in range(40)
        }
        assert values <= {0.0, 0.5}
        assert values == {0.0, 0.5}

    def test_probability_out_of_range(self, make_dataset):
        census = make_dataset(["05001"], [0.0], [[1, 0, np.nan]], role="census")
        with pytest.raises(IncompatibleSpec):
            single_mc_replicate(census, [[1.5]], SPEC, np.random.default_rng(0))


class TestBlockLayout:
    @pytest.mark.parametrize("n_units, L", [(1, 5000), (20000, 300), (3_000_000, 7), (2048, 1)])
    def test_blocks_cover_replicates(self, n_units, L):
        layout = block_layout(n_units, L)
        covered = [l for _, start, stop in layout for l in range(start, stop)]
        assert covered == list(range(L))
        assert [b for b, _, _ in layout] == list(range(len(layout)))
        assert all(stop - start <= 1024 for _, start, stop in layout)


def test_cv_needs_mse():
    with pytest.raises(ValueError):
        HeadcountEstimate("05001", "municipality", 0.5, 10, 0.01, 3, cv_percent=4.0)
