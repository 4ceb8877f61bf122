import json

import pandas as pd
import pytest
from click.testing import CliRunner

from smallarea.cli import RunConfig, cli
from smallarea.errors import InvalidConfig
from smallarea.glmm import GlmmFit

SIMULATION = {
    "population": {"D": 12, "size_range": [60, 120], "n_departments": 3, "p": 1},
    "designs": [{"type": "srs", "n": 400}],
    "T": 2,
    "L": 5,
}


@pytest.fixture
def workspace(tmp_path):
    out = tmp_path / "out"
    config = {
        "paths": {
            "survey": str(out / "survey.csv"),
            "census": str(out / "census.csv"),
            "output_dir": str(out),
            "fits_dir": str(out),
        },
        "seed": 11,
        "L": 20,
        "bootstrap": {"B": 2, "refit": False},
        "simulation": SIMULATION,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return tmp_path, path


def _invoke(*args):
    return CliRunner().invoke(cli, [str(a) for a in args])


def _generate(config):
    result = _invoke("--config", config, "generate")
    assert result.exit_code == 0, result.output
    return result


def _fit(config):
    result = _invoke("--config", config, "fit")
    assert result.exit_code in (0, 2), result.output
    return result


class TestGenerate:
    def test_writes_inputs(self, workspace):
        root, config = workspace
        _generate(config)
        out = root / "out"
        for name in ("population.csv", "census.csv", "survey.csv", "truth.csv", "manifest.json"):
            assert (out / name).exists()
        census = pd.read_csv(out / "census.csv", dtype=str)
        assert "y_7" not in census.columns and "y_8" not in census.columns
        assert pd.read_csv(out / "survey.csv").shape[0] == 400
        truth = pd.read_csv(out / "truth.csv", dtype={"domain": str})
        assert set(truth["level"]) == {"municipality", "department"}
        assert (truth["level"] == "municipality").sum() == 12

    def test_needs_a_seed(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"paths": {"output_dir": str(tmp_path / "out")}, "simulation": SIMULATION}))
        result = _invoke("--config", path, "generate")
        assert result.exit_code == 1
        assert "ERROR: InvalidConfig" in result.output


class TestFitAndEstimate:
    def test_fit_writes_one_file_per_missing_indicator(self, workspace):
        root, config = workspace
        _generate(config)
        _fit(config)
        assert sorted(p.name for p in (root / "out").glob("fit_*.json")) == ["fit_y_7.json", "fit_y_8.json"]

    def test_estimate_is_reproducible(self, workspace):
        root, config = workspace
        _generate(config)
        _fit(config)
        runs = []
        for name, threads in (("a", 1), ("b", 4), ("c", 1)):
            result = _invoke("--config", config, "--threads", threads, "--out", root / name, "estimate")
            assert result.exit_code in (0, 2), result.output
            runs.append((root / name / "estimates.csv").read_bytes())
        assert runs[0] == runs[1] == runs[2]
        header = runs[0].decode().splitlines()[0]
        assert header == "domain,level,h_hat,mc_stderr,L,seed"
        for name in ("indicators.csv", "comparison.json"):
            assert (root / "a" / name).exists()
        sha = [json.loads((root / n / "manifest.json").read_text())["estimate"]["config_sha256"] for n in ("a", "b")]
        assert sha[0] != "" and len(sha[0]) == 64

    def test_estimate_without_fits(self, workspace):
        _, config = workspace
        _generate(config)
        result = _invoke("--config", config, "estimate")
        assert result.exit_code == 1
        assert "ERROR: FitMissing" in result.output

    def test_collinear_covariates(self, workspace):
        root, config = workspace
        _generate(config)
        for name in ("survey.csv", "census.csv"):
            frame = pd.read_csv(root / "out" / name, dtype=str, keep_default_na=False)
            frame["x_2"] = frame["x_1"]
            frame.to_csv(root / "out" / name, index=False)
        result = _invoke("--config", config, "fit")
        assert result.exit_code == 1
        assert "ERROR: RankDeficientDesign" in result.output

    def test_separated_indicator(self, workspace):
        root, config = workspace
        _generate(config)
        frame = pd.read_csv(root / "out" / "survey.csv", dtype=str, keep_default_na=False)
        frame["y_7"] = "0"
        frame.to_csv(root / "out" / "survey.csv", index=False)
        result = _invoke("--config", config, "fit")
        assert result.exit_code == 1
        assert "ERROR: Separation" in result.output
        assert "y_7" in result.output

    def test_mse(self, workspace):
        root, config = workspace
        _generate(config)
        _fit(config)
        result = _invoke("--config", config, "mse", "--L-inner", 10)
        assert result.exit_code in (0, 2), result.output
        frame = pd.read_csv(root / "out" / "mse.csv", dtype={"domain": str})
        assert frame.columns.tolist() == ["domain", "level", "h_hat", "mse", "rmse", "cv_percent", "B", "refit"]
        assert (frame["B"] == 2).all()
        assert (frame["mse"] >= 0).all()


# Toy census with sigma_u = 0 and y_2 = 1 exactly when x_1 > 0. Domain sizes
# are powers of two, so every H is a dyadic fraction. 05002 has H = 0.
TOY = [
    ("05001", 1.0, 0), ("05001", -1.0, 1), ("05001", -1.0, 0), ("05001", -1.0, 0),
    ("05002", -1.0, 0), ("05002", -1.0, 0), ("05002", -1.0, 0), ("05002", -1.0, 0),
    ("08001", 1.0, 0), ("08001", 1.0, 0), ("08001", 1.0, 0), ("08001", -1.0, 0),
]


@pytest.fixture
def toy_workspace(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    census = pd.DataFrame(TOY, columns=["domain_muni", "x_1", "y_1"])
    census.to_csv(out / "census.csv", index=False)
    survey = census.assign(y_2=(census["x_1"] > 0).astype(int))
    survey.to_csv(out / "survey.csv", index=False)
    GlmmFit(
        indicator="y_2",
        beta=(0.0, 40.0),
        sigma_u=0.0,
        u_hat={},
        loglik=0.0,
        converged=True,
        iterations=0,
        indicator_index=1,
        covariate_names=("x_1",),
    ).save(out / "fit_y_2.json")
    config = {
        "paths": {"survey": str(out / "survey.csv"), "census": str(out / "census.csv"), "output_dir": str(out)},
        "spec": {"weights": [0.5, 0.5], "z": 0.4, "census_missing": [2]},
        "seed": 5,
        "L": 20,
        "bootstrap": {"B": 3, "refit": False},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return out, path


class TestMse:
    def test_degenerate_model_has_zero_mse(self, toy_workspace):
        out, config = toy_workspace
        result = _invoke("--config", config, "mse", "--no-refit")
        assert result.exit_code == 2, result.output
        frame = pd.read_csv(out / "mse.csv", dtype={"domain": str})
        h = dict(zip(zip(frame["level"], frame["domain"]), frame["h_hat"]))
        assert h == {
            ("municipality", "05001"): 0.5,
            ("municipality", "05002"): 0.0,
            ("municipality", "08001"): 0.75,
            ("department", "05"): 0.25,
            ("department", "08"): 0.75,
        }
        assert (frame["mse"] == 0.0).all()

    def test_zero_estimate_leaves_cv_empty(self, toy_workspace):
        out, config = toy_workspace
        result = _invoke("--config", config, "mse", "--no-refit")
        assert result.exit_code == 2
        assert "CV undefined for 1 domain(s)" in result.output
        rows = {line.split(",")[0]: line.split(",") for line in (out / "mse.csv").read_text().splitlines()[1:]}
        assert rows["05002"][5] == ""
        assert rows["05001"][5] == "0"

    def test_reproducible_across_threads(self, workspace):
        root, config = workspace
        _generate(config)
        _fit(config)
        runs = []
        for name, threads in (("a", 1), ("b", 4), ("c", 8), ("d", 1)):
            result = _invoke("--config", config, "--threads", threads, "--out", root / name, "mse", "--B", 3, "--L-inner", 10)
            assert result.exit_code in (0, 2), result.output
            runs.append((root / name / "mse.csv").read_bytes())
        assert runs[0] == runs[1] == runs[2] == runs[3]


class TestSimulate:
    def test_runs_scenario_from_config(self, workspace):
        root, config = workspace
        result = _invoke("--config", config, "simulate", "--T", 2)
        assert result.exit_code in (0, 2), result.output
        out = root / "out"
        for name in ("simulation_srs400_municipality.csv", "simulation_summary.csv", "simulation_correlation.csv"):
            assert (out / name).exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["simulate"]["seed"] == 11
        assert manifest["simulate"]["config_sha256"] == RunConfig.load(config).with_overrides().sha256()

    def test_single_domain_scenario(self, workspace):
        root, config = workspace
        scenario = root / "scenario.json"
        scenario.write_text(json.dumps({**SIMULATION, "population": {"D": 1, "n_departments": 1}}))
        result = _invoke("--config", config, "simulate", "--scenario", scenario)
        assert result.exit_code == 1
        assert "ERROR: InvalidConfig" in result.output


class TestOracle:
    @pytest.fixture(autouse=True)
    def _cwd(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)

    @pytest.mark.parametrize(
        "args, expected",
        [
            (["--alpha", 0.2, "--k", 0.1, "--delta", 0.4, "--pi", 0.5, "--pi2", 0.6], "0.3"),
            (["--alpha", 0.2, "--k", 0.3, "--delta", 0.4, "--pi", 0.5, "--pi2", 0.5], "0.75"),
            (["--alpha", 0.2, "--k", 0.3, "--delta", 0.4, "--pi", 0.6], "0.6"),
        ],
    )
    def test_values(self, args, expected):
        result = _invoke("oracle", *args)
        assert result.exit_code == 0
        assert expected in result.output.splitlines()

    def test_writes_manifest(self, tmp_path):
        result = _invoke("--out", tmp_path / "o", "oracle", "--alpha", 0.2, "--k", 0.1, "--delta", 0.4, "--pi", 0.5)
        assert result.exit_code == 0
        entry = json.loads((tmp_path / "o" / "manifest.json").read_text())["oracle"]
        assert entry["exit_code"] == 0
        assert entry["config_sha256"] == RunConfig().with_overrides(out=str(tmp_path / "o")).sha256()

    def test_invalid_problem(self):
        result = _invoke("oracle", "--alpha", 0, "--k", 0.3, "--delta", 0.4, "--pi", 0.5)
        assert result.exit_code == 1
        assert "ERROR: InvalidConfig" in result.output


class TestRunConfig:
    def test_unknown_key(self):
        with pytest.raises(InvalidConfig):
            RunConfig.from_dict({"seed": 1, "iterations": 4})

    def test_hash_ignores_threads(self):
        cfg = RunConfig.from_dict({"seed": 3})
        assert cfg.with_overrides(threads=1).sha256() == cfg.with_overrides(threads=8).sha256()
        assert cfg.with_overrides(seed=4).sha256() != cfg.sha256()

    def test_seed_flag_reaches_bootstrap(self):
        cfg = RunConfig.from_dict({"seed": 3}).with_overrides(seed=9)
        assert cfg.seed == 9 and cfg.bootstrap.seed == 9
