#!/usr/bin/env python3
"""smallarea command line: fit, estimate, mse, simulate, generate, oracle.

    python3 smallarea/cli.py --config config.json --seed 7 fit
    python3 smallarea/cli.py --config config.json estimate --L 200
    python3 smallarea/cli.py --config config.json --threads 4 mse --B 200

Exit codes: 0 success, 1 error (an `ERROR: <Name>: <message>` line on
stderr), 2 success with warnings.
"""
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
import colorama
import numpy as np
import pandas as pd

if __package__ is None:
    sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from smallarea import __version__
from smallarea.data_model import LEVELS, Dataset, Schema, check_alignment, load_dataset, save_dataset
from smallarea.direct import describe, direct_headcount, direct_proportion, pearson
from smallarea.errors import FitMissing, InvalidConfig, SAEError
from smallarea.estimator import estimate_headcount, write_estimates
from smallarea.glmm import FitConfig, GlmmFit, fit, plugin_proportion
from smallarea.indicator import IndicatorSpec, spec_from_config
from smallarea.oracle import UnitPovertyProblem, expected_poor_one_missing, expected_poor_two_missing
from smallarea.simulation import (
    Scenario,
    draw_sample,
    generate_population,
    run_design_simulation,
    write_reports,
)
from smallarea.uncertainty import BootstrapConfig, attach_mse, bootstrap_mse, write_mse

logger = logging.getLogger("smallarea")

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2


class ColorFormatter(logging.Formatter):
    COLORS = {
        logging.DEBUG: colorama.Style.DIM,
        logging.WARNING: colorama.Fore.YELLOW,
        logging.ERROR: colorama.Fore.RED,
        logging.CRITICAL: colorama.Fore.RED + colorama.Style.BRIGHT,
    }

    def format(self, record):
        msg = super().format(record)
        color = self.COLORS.get(record.levelno)
        return f"{color}{msg}{colorama.Style.RESET_ALL}" if color else msg


def setup_logging(verbose: bool = False) -> None:
    colorama.just_fix_windows_console()
    handler = logging.StreamHandler(sys.stderr)
    colored = hasattr(sys.stderr, "isatty") and sys.stderr.isatty()
    handler.setFormatter(ColorFormatter(LOG_FORMAT) if colored else logging.Formatter(LOG_FORMAT))
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, handlers=[handler], force=True)


@dataclass
class Paths:
    survey: Optional[str] = None
    census: Optional[str] = None
    output_dir: str = "out"
    fits_dir: Optional[str] = None  # defaults to output_dir

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def fits(self) -> Path:
        return Path(self.fits_dir) if self.fits_dir else self.out


@dataclass
class RunConfig:
    """Everything a run depends on, from one JSON document.

    Precedence: command-line flags > config file > these defaults.
    """

    paths: Paths = field(default_factory=Paths)
    schema: Schema = field(default_factory=Schema)
    spec: IndicatorSpec = field(default_factory=lambda: spec_from_config(None))
    fit: FitConfig = field(default_factory=FitConfig)
    domain_level: str = "municipality"
    L: int = 100
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    seed: Optional[int] = None
    threads: int = 0
    weighted_direct: bool = True
    simulation: Optional[Dict[str, Any]] = None

    KEYS = (
        "paths", "schema", "spec", "fit", "domain_level", "L", "bootstrap",
        "seed", "threads", "weighted_direct", "simulation",
    )

    def __post_init__(self):
        if self.domain_level not in LEVELS:
            raise InvalidConfig(f"domain_level must be one of {LEVELS}, got {self.domain_level!r}")
        if int(self.L) < 1:
            raise InvalidConfig(f"L must be >= 1, got {self.L}")
        if int(self.threads) < 0:
            raise InvalidConfig(f"threads must be >= 0 (0 = auto), got {self.threads}")
        if self.seed is not None and int(self.seed) < 0:
            raise InvalidConfig(f"seed must be a non-negative integer, got {self.seed}")

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "RunConfig":
        unknown = sorted(set(data) - set(RunConfig.KEYS))
        if unknown:
            raise InvalidConfig(f"Unknown config key(s): {unknown}")
        paths = dict(data.get("paths") or {})
        bad = sorted(set(paths) - set(Paths.__dataclass_fields__))
        if bad:
            raise InvalidConfig(f"Unknown paths key(s): {bad}")
        seed = data.get("seed")
        return RunConfig(
            paths=Paths(**paths),
            schema=Schema.from_dict(data.get("schema")),
            spec=spec_from_config(data.get("spec")),
            fit=FitConfig.from_dict(data.get("fit")),
            domain_level=str(data.get("domain_level", "municipality")),
            L=int(data.get("L", 100)),
            bootstrap=BootstrapConfig.from_dict(data.get("bootstrap"), seed=int(seed or 0)),
            seed=None if seed is None else int(seed),
            threads=int(data.get("threads", 0)),
            weighted_direct=bool(data.get("weighted_direct", True)),
            simulation=data.get("simulation"),
        )

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        with open(path, "r") as f:
            return RunConfig.from_dict(json.load(f))

    def with_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None, out: Optional[str] = None) -> "RunConfig":
        cfg = replace(self)
        if seed is not None:
            cfg.seed = int(seed)
        if threads is not None:
            cfg.threads = int(threads)
        if out is not None:
            cfg.paths = replace(cfg.paths, output_dir=str(out))
        if cfg.seed is not None:
            cfg.bootstrap = replace(cfg.bootstrap, seed=cfg.seed)
        return cfg

    @property
    def workers(self) -> int:
        return self.threads or (os.cpu_count() or 1)

    def require_seed(self) -> int:
        if self.seed is None:
            raise InvalidConfig("A seed is required (config 'seed' or --seed)")
        return int(self.seed)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "paths": asdict(self.paths),
            "schema": asdict(self.schema),
            "spec": self.spec.to_dict(),
            "fit": asdict(self.fit),
            "domain_level": self.domain_level,
            "L": self.L,
            "bootstrap": asdict(self.bootstrap),
            "seed": self.seed,
            "threads": self.threads,
            "weighted_direct": self.weighted_direct,
            "simulation": self.simulation,
        }

    def sha256(self) -> str:
        # threads never changes results, so it stays out of the hash
        data = self.to_dict()
        data.pop("threads")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()


def _versions() -> Dict[str, str]:
    out = {"python": platform.python_version(), "smallarea": __version__}
    for pkg in ("numpy", "scipy", "pandas", "click", "colorama"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def write_manifest(cfg: RunConfig, command: str, outputs: List[Path], runtime: float, status: int) -> Path:
    """manifest.json in the output dir, one entry per command."""
    path = cfg.paths.out / "manifest.json"
    manifest: Dict[str, Any] = {}
    if path.exists():
        try:
            with open(path, "r") as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError):
            logger.warning(f"Ignoring unreadable {path}")
    manifest[command] = {
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "threads": cfg.workers,
        "versions": _versions(),
        "runtime_seconds": round(runtime, 3),
        "exit_code": status,
        "outputs": [str(p) for p in outputs],
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=4, sort_keys=True)
    return path


def _run(ctx: click.Context, command: str, body: Callable[[RunConfig], Tuple[int, List[Path]]]) -> None:
    start = time.monotonic()
    try:
        cfg = _config(ctx)
        status, outputs = body(cfg)
        cfg.paths.out.mkdir(parents=True, exist_ok=True)
        write_manifest(cfg, command, outputs, time.monotonic() - start, status)
    except (SAEError, OSError, ValueError) as e:
        click.echo(f"ERROR: {type(e).__name__}: {e}", err=True)
        ctx.exit(EXIT_ERROR)
    logger.info(f"{command} finished in {time.monotonic() - start:.1f} s (exit {status})")
    ctx.exit(status)


def _config(ctx: click.Context) -> RunConfig:
    opts = ctx.obj
    cfg = RunConfig.load(opts["config"]) if opts["config"] else RunConfig()
    return cfg.with_overrides(seed=opts["seed"], threads=opts["threads"], out=opts["out"])


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise InvalidConfig(f"No {what} path configured (paths.{what})")
    p = Path(path)
    if not p.exists():
        raise InvalidConfig(f"{what} file {p} does not exist")
    return p


def load_inputs(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    """Survey and census, loaded with one column mapping and aligned."""
    survey = load_dataset(_require(cfg.paths.survey, "survey"), "survey", cfg.schema)
    census_schema = replace(
        cfg.schema, covariates=list(survey.covariate_names), indicators=list(survey.indicator_names)
    )
    census = load_dataset(_require(cfg.paths.census, "census"), "census", census_schema)
    check_alignment(survey, census, cfg.spec, cfg.domain_level)
    return survey, census


def fit_path(cfg: RunConfig, name: str) -> Path:
    return cfg.paths.fits / f"fit_{name}.json"


def load_fits(cfg: RunConfig, survey: Dataset) -> Dict[int, GlmmFit]:
    fits = {}
    for k in cfg.spec.missing:
        path = fit_path(cfg, survey.indicator_names[k])
        if not path.exists():
            raise FitMissing(f"No fit file {path} for indicator {survey.indicator_names[k]!r}; run `fit` first")
        fits[k] = GlmmFit.load(path)
    return fits


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Run configuration JSON.")
@click.option("--seed", type=int, default=None, help="Master seed (overrides the config).")
@click.option("--threads", type=int, default=None, help="Worker threads, 0 = all cores.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
@click.version_option(__version__, prog_name="smallarea")
@click.pass_context
def cli(ctx, config_path, seed, threads, out, verbose):
    """Small area estimation of a composite deprivation headcount."""
    setup_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj.update(config=config_path, seed=seed, threads=threads, out=out)


@cli.command("fit")
@click.pass_context
def cmd_fit(ctx):
    """Fit one random-intercept logit model per census-missing indicator."""

    def body(cfg: RunConfig):
        survey, census = load_inputs(cfg)
        cfg.paths.fits.mkdir(parents=True, exist_ok=True)
        outputs, status = [], EXIT_OK
        for k in cfg.spec.missing:
            model = fit(survey, k, cfg.fit, level=cfg.domain_level)
            outputs.append(model.save(fit_path(cfg, model.indicator)))
            if not model.converged:
                status = EXIT_WARN
        logger.info(f"Wrote {len(outputs)} fit file(s) to {cfg.paths.fits}")
        return status, outputs

    _run(ctx, "fit", body)


def _indicator_table(cfg: RunConfig, survey: Dataset, census: Dataset, fits: Dict[int, GlmmFit]) -> pd.DataFrame:
    rows = []
    level = cfg.domain_level
    census_codes = census.groups(level)[0]
    for k, model in fits.items():
        direct = {d.domain: d for d in direct_proportion(survey, k, level, cfg.weighted_direct)}
        plugin = plugin_proportion(model, census, survey, k)
        for code in census_codes:
            d = direct.get(str(code))
            rows.append(
                {
                    "domain": str(code),
                    "level": level,
                    "indicator": survey.indicator_names[k],
                    "n_sample": 0 if d is None else d.n,
                    "direct": None if d is None else d.estimate,
                    "direct_cv": None if d is None else d.cv_percent,
                    "plugin": plugin[str(code)],
                }
            )
    columns = ["domain", "level", "indicator", "n_sample", "direct", "direct_cv", "plugin"]
    return pd.DataFrame(rows, columns=columns)


def _comparison(cfg: RunConfig, survey: Dataset, census: Dataset, estimates) -> Dict[str, Any]:
    out: Dict[str, Any] = {"pearson": {}, "survey_sizes": {}, "census_sizes": {}, "direct_cv": {}}
    model = {(e.level, e.domain): e.h_hat for e in estimates}
    complete = not np.isnan(survey.indicators).any()
    for level in LEVELS:
        out["survey_sizes"][level] = describe(np.bincount(survey.groups(level)[1]))
        out["census_sizes"][level] = describe(np.bincount(census.groups(level)[1]))
        if not complete:
            continue
        direct = [d for d in direct_headcount(survey, cfg.spec, level, cfg.weighted_direct) if (level, d.domain) in model]
        out["direct_cv"][level] = describe([np.nan if d.cv_percent is None else d.cv_percent for d in direct])
        if len(direct) >= 2:
            r = pearson([model[(level, d.domain)] for d in direct], [d.estimate for d in direct])
            out["pearson"][level] = None if np.isnan(r) else r
    if not complete:
        logger.warning("Survey has missing indicator values; direct H comparison skipped")
    return out


@cli.command("estimate")
@click.option("--L", "L", type=int, default=None, help="Monte Carlo replicates (overrides the config).")
@click.pass_context
def cmd_estimate(ctx, L):
    """Monte Carlo H_hat for every census domain at both levels."""

    def body(cfg: RunConfig):
        seed = cfg.require_seed()
        survey, census = load_inputs(cfg)
        fits = load_fits(cfg, survey)
        n_rep = cfg.L if L is None else L
        estimates = estimate_headcount(census, fits, cfg.spec, L=n_rep, seed=seed, workers=cfg.workers)
        cfg.paths.out.mkdir(parents=True, exist_ok=True)
        outputs = [write_estimates(estimates, cfg.paths.out / "estimates.csv", seed)]

        path = cfg.paths.out / "indicators.csv"
        _indicator_table(cfg, survey, census, fits).to_csv(path, index=False, float_format="%.12g")
        outputs.append(path)
        path = cfg.paths.out / "comparison.json"
        with open(path, "w") as f:
            json.dump(_comparison(cfg, survey, census, estimates), f, indent=4, sort_keys=True)
        outputs.append(path)
        status = EXIT_OK if all(m.converged for m in fits.values()) else EXIT_WARN
        return status, outputs

    _run(ctx, "estimate", body)


@cli.command("mse")
@click.option("--L", "L", type=int, default=None, help="Monte Carlo replicates of the point estimate.")
@click.option("--B", "B", type=int, default=None, help="Bootstrap replicates.")
@click.option("--L-inner", "L_inner", type=int, default=None, help="Monte Carlo replicates inside each bootstrap.")
@click.option("--refit/--no-refit", default=None, help="Refit the models in every bootstrap replicate.")
@click.pass_context
def cmd_mse(ctx, L, B, L_inner, refit):
    """Point estimates with parametric-bootstrap MSE and CV."""

    def body(cfg: RunConfig):
        seed = cfg.require_seed()
        boot = cfg.bootstrap
        overrides = {k: v for k, v in (("B", B), ("L_inner", L_inner), ("refit", refit)) if v is not None}
        if overrides:
            boot = BootstrapConfig(**{**asdict(boot), **overrides})
        survey, census = load_inputs(cfg)
        fits = load_fits(cfg, survey)
        n_rep = cfg.L if L is None else L
        estimates = estimate_headcount(census, fits, cfg.spec, L=n_rep, seed=seed, workers=cfg.workers)
        mse = bootstrap_mse(census, survey, fits, cfg.spec, boot, cfg.fit, L=n_rep, workers=cfg.workers)
        estimates = attach_mse(estimates, mse)
        cfg.paths.out.mkdir(parents=True, exist_ok=True)
        path = write_mse(estimates, cfg.paths.out / "mse.csv", boot.B, boot.refit)
        undefined = sum(e.cv_percent is None for e in estimates)
        if undefined:
            logger.warning(f"CV undefined for {undefined} domain(s) with h_hat = 0")
        converged = all(m.converged for m in fits.values())
        return (EXIT_WARN if undefined or not converged else EXIT_OK), [path]

    _run(ctx, "mse", body)


def _scenario(cfg: RunConfig, scenario_path: Optional[str]) -> Scenario:
    seed = cfg.require_seed()
    if scenario_path:
        return Scenario.load(scenario_path, seed=seed)
    if cfg.simulation is None:
        raise InvalidConfig("No simulation scenario: pass --scenario or add a 'simulation' section to the config")
    return Scenario.from_dict(cfg.simulation, seed=seed)


@cli.command("simulate")
@click.option("--scenario", "scenario_path", type=click.Path(dir_okay=False), default=None, help="Scenario JSON.")
@click.option("--T", "T", type=int, default=None, help="Replicates per design (overrides the scenario).")
@click.pass_context
def cmd_simulate(ctx, scenario_path, T):
    """Design-based simulation: Bias, RMSE and CV per domain for each design."""

    def body(cfg: RunConfig):
        scenario = _scenario(cfg, scenario_path)
        population = generate_population(scenario.population)
        reports = {}
        for name, design in scenario.designs.items():
            reports[name] = run_design_simulation(
                population,
                design,
                scenario.population.spec,
                T=scenario.T if T is None else T,
                estimator_config=scenario.estimator,
                seed=cfg.seed,
                workers=cfg.workers,
            )
        outputs = write_reports(reports, cfg.paths.out)
        rows = [
            {"scenario": name, "level": level, "pearson": r, "T": rep.T, "failures": rep.failures}
            for name, rep in reports.items()
            for level, r in rep.correlation.items()
        ]
        path = cfg.paths.out / "simulation_correlation.csv"
        pd.DataFrame(rows, columns=["scenario", "level", "pearson", "T", "failures"]).to_csv(
            path, index=False, float_format="%.12g"
        )
        outputs.append(path)
        status = EXIT_WARN if any(rep.failures for rep in reports.values()) else EXIT_OK
        return status, outputs

    _run(ctx, "simulate", body)


@cli.command("generate")
@click.option("--scenario", "scenario_path", type=click.Path(dir_okay=False), default=None, help="Scenario JSON.")
@click.option("--design", "design_name", type=str, default=None, help="Design used for survey.csv (default: first).")
@click.pass_context
def cmd_generate(ctx, scenario_path, design_name):
    """Write a synthetic population, its census view, one survey sample and the true H."""

    def body(cfg: RunConfig):
        scenario = _scenario(cfg, scenario_path)
        name = design_name or next(iter(scenario.designs))
        if name not in scenario.designs:
            raise InvalidConfig(f"Unknown design {name!r}; scenario has {list(scenario.designs)}")
        population = generate_population(scenario.population)
        data = population.dataset
        spec = scenario.population.spec
        out = cfg.paths.out
        out.mkdir(parents=True, exist_ok=True)

        observed = spec.observed
        census = replace(
            data,
            indicators=data.indicators[:, observed],
            indicator_names=tuple(data.indicator_names[k] for k in observed),
        )
        survey = draw_sample(data, scenario.designs[name], cfg.seed, 0)
        outputs = [
            save_dataset(data, out / "population.csv", cfg.schema),
            save_dataset(census, out / "census.csv", cfg.schema),
            save_dataset(survey, out / "survey.csv", cfg.schema),
        ]
        truth = [
            {"domain": domain, "level": level, "h": h}
            for level in LEVELS
            for domain, h in population.truth[level].items()
        ]
        path = out / "truth.csv"
        pd.DataFrame(truth, columns=["domain", "level", "h"]).to_csv(path, index=False, float_format="%.12g")
        outputs.append(path)
        logger.info(f"Wrote population (N={data.n}), census and {name} survey (n={survey.n}) to {out}")
        return EXIT_OK, outputs

    _run(ctx, "generate", body)


@cli.command("oracle")
@click.option("--alpha", type=float, required=True, help="Weight of each missing indicator.")
@click.option("--k", "k", type=float, required=True, help="Score from the observed indicators.")
@click.option("--delta", type=float, required=True, help="Poverty threshold.")
@click.option("--pi", "pi", type=float, required=True, help="Probability of the first missing indicator.")
@click.option("--pi2", type=float, default=None, help="Probability of the second missing indicator.")
@click.pass_context
def cmd_oracle(ctx, alpha, k, delta, pi, pi2):
    """Closed-form probability that one unit is poor."""

    def body(cfg: RunConfig):
        if pi2 is None:
            value = expected_poor_one_missing(UnitPovertyProblem(alpha, k, delta, (pi,)))
        else:
            value = expected_poor_two_missing(UnitPovertyProblem(alpha, k, delta, (pi, pi2)))
        click.echo(f"{value:.12g}")
        return EXIT_OK, []

    _run(ctx, "oracle", body)


def main():
    cli(prog_name="smallarea")


if __name__ == "__main__":
    main()
