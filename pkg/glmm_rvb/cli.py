"""Command-line front end: load data, fit, and write result files."""

from __future__ import annotations

import argparse
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
import json
import logging
from pathlib import Path
import re
import sys
from time import perf_counter
from typing import Any

import numpy as np
import pandas as pd
import voluptuous as vol

from . import __version__
from .const import (
    CONF_ALLOW_INTERNAL,
    CONF_DATA,
    CONF_DRAWS,
    CONF_ESTIMATOR,
    CONF_FAMILY,
    CONF_FIXED,
    CONF_GROUP_COL,
    CONF_INTERCEPT,
    CONF_MAX_ITER,
    CONF_METHOD,
    CONF_OUT,
    CONF_PRESET,
    CONF_PRIOR,
    CONF_PRIOR_FILE,
    CONF_RANDOM,
    CONF_RESPONSE,
    CONF_SAMPLES,
    CONF_SEED,
    CONF_SHARDS,
    CONF_TRIALS_COL,
    DEFAULT_MAX_ITER,
    DEFAULT_POSTERIOR_DRAWS,
    DEFAULT_SAMPLES,
    DEFAULT_SIGMA_BETA2,
    DIAGNOSTICS_FILE,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_OK,
    LOGGER,
    STATE_FILE,
    SUBJECTS_FILE,
    SUMMARY_FILE,
    TIMING_FILE,
    TRACE_FILE,
)
from .datasets import PRESETS, ColumnMap, Intercept, dataset_from_frame, load_preset
from .diagnostics import fit_diagnostics
from .engine import Estimator, FitConfig, FitResult, fit
from .exceptions import ConfigError, DataError, NumericalError, ParseError, PriorConfigError, error_text
from .family import Family, FamilyKind
from .model import Dataset, GlobalPrior, NormalPrior, Priors, default_prior
from .posterior import PosteriorSummary, compare_metrics, summarize_factor, summarize_posterior
from .recombine import GaussianFactor, ShardedResult, combine, fit_sharded
from .reparam import TransformMethod
from .results import (
    read_state,
    read_subjects,
    summary_fields,
    write_state,
    write_subjects,
    write_summary,
    write_timing,
    write_trace,
)
from .simulate import Scenario, SimulationSpec, simulate_dataset, to_frame

PRIOR_DEFAULT = "default"
PRIOR_NORMAL_OMEGA = "normal-omega"
PRIOR_FILE = "file"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
COMMANDS = ("fit", "simulate", "combine", "compare")


def _columns(value: str | Sequence[str] | None) -> list[str]:
    """Comma-separated column list or an explicit sequence of names."""
    if value is None:
        return []
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return [str(part) for part in value]


RUN_SCHEMA = vol.Schema(
    {
        vol.Exclusive(CONF_DATA, "source"): str,
        vol.Exclusive(CONF_PRESET, "source"): vol.In(sorted(PRESETS)),
        vol.Optional(CONF_FAMILY): vol.In([kind.value for kind in FamilyKind]),
        vol.Optional(CONF_RESPONSE, default="y"): str,
        vol.Optional(CONF_TRIALS_COL): vol.Any(None, str),
        vol.Optional(CONF_GROUP_COL, default="subject"): str,
        vol.Optional(CONF_FIXED, default=[]): _columns,
        vol.Optional(CONF_RANDOM, default=[]): _columns,
        vol.Optional(CONF_INTERCEPT, default=Intercept.BOTH.value): vol.In([i.value for i in Intercept]),
        vol.Optional(CONF_METHOD, default=TransformMethod.APPROACH2.value): vol.In([m.value for m in TransformMethod]),
        vol.Optional(CONF_PRIOR, default=PRIOR_DEFAULT): vol.In([PRIOR_DEFAULT, PRIOR_NORMAL_OMEGA, PRIOR_FILE]),
        vol.Optional(CONF_PRIOR_FILE): vol.Any(None, str),
        vol.Optional(CONF_SEED, default=0): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional(CONF_SHARDS, default=1): vol.All(vol.Coerce(int), vol.Range(min=1)),
        vol.Optional(CONF_MAX_ITER, default=DEFAULT_MAX_ITER): vol.All(vol.Coerce(int), vol.Range(min=1)),
        vol.Required(CONF_OUT): str,
        vol.Optional(CONF_DRAWS, default=DEFAULT_POSTERIOR_DRAWS): vol.All(vol.Coerce(int), vol.Range(min=1)),
        vol.Optional(CONF_ESTIMATOR, default=Estimator.L2.value): vol.In([e.value for e in Estimator]),
        vol.Optional(CONF_SAMPLES, default=DEFAULT_SAMPLES): vol.All(vol.Coerce(int), vol.Range(min=1)),
        vol.Optional(CONF_ALLOW_INTERNAL, default=False): bool,
    }
)

_POSITIVE = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))

WISHART_PRIOR_SCHEMA = vol.Schema(
    {
        vol.Required("kind"): "wishart",
        vol.Required("nu"): _POSITIVE,
        vol.Required("scale"): [[vol.Coerce(float)]],
        vol.Optional("sigma_beta2", default=DEFAULT_SIGMA_BETA2): _POSITIVE,
    }
)

NORMAL_PRIOR_SCHEMA = vol.Schema(
    {
        vol.Required("kind"): "normal",
        vol.Required("mean"): [vol.Coerce(float)],
        vol.Required("sd"): [_POSITIVE],
    }
)

PRIOR_FILE_SCHEMA = vol.Any(WISHART_PRIOR_SCHEMA, NORMAL_PRIOR_SCHEMA)


@dataclass(frozen=True)
class RunConfig:
    """Validated settings of one `fit` run."""

    out: Path
    data: Path | None = None
    preset: str | None = None
    family: str | None = None
    columns: ColumnMap = ColumnMap()
    method: TransformMethod = TransformMethod.APPROACH2
    prior: str = PRIOR_DEFAULT
    prior_file: Path | None = None
    seed: int = 0
    shards: int = 1
    max_iter: int = DEFAULT_MAX_ITER
    draws: int = DEFAULT_POSTERIOR_DRAWS
    estimator: Estimator = Estimator.L2
    samples: int = DEFAULT_SAMPLES
    allow_internal: bool = False

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> RunConfig:
        """Validate a raw mapping against RUN_SCHEMA and the cross-field rules."""
        conf = RUN_SCHEMA(dict(raw))
        if CONF_DATA not in conf and CONF_PRESET not in conf:
            raise ConfigError("either --data or --preset is required")
        if CONF_DATA in conf and CONF_FAMILY not in conf:
            raise ConfigError("--family is required with --data")
        if conf.get(CONF_FAMILY) == FamilyKind.GAUSSIAN_UNIT and not conf[CONF_ALLOW_INTERNAL]:
            raise ConfigError("the gaussian_unit family is internal; pass --allow-internal to use it")
        if conf[CONF_PRIOR] == PRIOR_FILE and not conf.get(CONF_PRIOR_FILE):
            raise ConfigError("--prior file needs --prior-file")
        if conf[CONF_PRIOR] == PRIOR_DEFAULT and conf[CONF_SHARDS] > 1:
            raise ConfigError("sharded fits need a normal prior: use --prior normal-omega or a normal prior file")
        return cls(
            out=Path(conf[CONF_OUT]),
            data=Path(conf[CONF_DATA]) if CONF_DATA in conf else None,
            preset=conf.get(CONF_PRESET),
            family=conf.get(CONF_FAMILY),
            columns=ColumnMap(
                response=conf[CONF_RESPONSE],
                group=conf[CONF_GROUP_COL],
                fixed=tuple(conf[CONF_FIXED]),
                random=tuple(conf[CONF_RANDOM]),
                trials=conf.get(CONF_TRIALS_COL),
                intercept=Intercept(conf[CONF_INTERCEPT]),
            ),
            method=TransformMethod(conf[CONF_METHOD]),
            prior=conf[CONF_PRIOR],
            prior_file=Path(conf[CONF_PRIOR_FILE]) if conf.get(CONF_PRIOR_FILE) else None,
            seed=conf[CONF_SEED],
            shards=conf[CONF_SHARDS],
            max_iter=conf[CONF_MAX_ITER],
            draws=conf[CONF_DRAWS],
            estimator=Estimator(conf[CONF_ESTIMATOR]),
            samples=conf[CONF_SAMPLES],
            allow_internal=conf[CONF_ALLOW_INTERNAL],
        )

    def fit_config(self) -> FitConfig:
        return FitConfig(
            method=self.method,
            seed=self.seed,
            max_iter=self.max_iter,
            estimator=self.estimator,
            n_samples=self.samples,
        )


_LINE_PATTERN = re.compile(r"line (\d+)")


def load_csv(path: Path, config: RunConfig) -> Dataset:
    """Read a long-format CSV and build a validated dataset."""
    if config.family is None:
        raise ConfigError("--family is required with --data")
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError as err:
        raise DataError(f"cannot read {path}: no such file") from err
    except UnicodeDecodeError as err:
        raise ParseError(f"{path} is not valid UTF-8") from err
    except pd.errors.EmptyDataError as err:
        raise ParseError(f"{path} is empty", 1) from err
    except pd.errors.ParserError as err:
        match = _LINE_PATTERN.search(str(err))
        raise ParseError(f"malformed CSV in {path}", int(match.group(1)) if match else None) from err
    data = dataset_from_frame(frame, Family.from_name(config.family), config.columns)
    LOGGER.info("Loaded %d subjects (%d observations) from %s", data.n, sum(data.sizes), path)
    return data


def load_prior_file(path: Path) -> Priors | NormalPrior:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise PriorConfigError(f"cannot read prior file {path}: {error_text(err)}") from err
    conf = PRIOR_FILE_SCHEMA(raw)
    if conf["kind"] == "wishart":
        return Priors(nu=conf["nu"], scale=np.asarray(conf["scale"], dtype=np.float64), sigma_beta2=conf["sigma_beta2"])
    if len(conf["mean"]) != len(conf["sd"]):
        raise PriorConfigError("normal prior mean and sd differ in length")
    return NormalPrior.diagonal(conf["mean"], conf["sd"])


def build_prior(config: RunConfig, data: Dataset) -> GlobalPrior:
    """Prior selected by the run configuration, checked against the dataset's dimensions."""
    if config.prior == PRIOR_DEFAULT:
        prior = default_prior(data)
        LOGGER.info("Default prior: Wishart(%.4g, S) with S = %s", prior.nu, np.array2string(prior.scale, precision=4))
        return prior
    if config.prior == PRIOR_NORMAL_OMEGA:
        return NormalPrior.default(data.p, data.r)
    assert config.prior_file is not None
    loaded = load_prior_file(config.prior_file)
    if isinstance(loaded, Priors):
        if config.shards > 1:
            raise ConfigError("sharded fits need a normal prior file")
        if loaded.r != data.r:
            raise PriorConfigError(f"Wishart prior has order {loaded.r}, model has {data.r} random effects")
    elif loaded.g != data.g:
        raise PriorConfigError(f"normal prior has dimension {loaded.g}, model needs {data.g}")
    return loaded


def load_data(config: RunConfig) -> Dataset:
    if config.preset is not None:
        return load_preset(config.preset)
    assert config.data is not None
    return load_csv(config.data, config)


def _base_fields(data: Dataset, config: RunConfig) -> dict[str, object]:
    return {"family": data.family.name, "n": data.n, "p": data.p, "r": data.r, "prior": config.prior}


def _write_json(path: Path, payload: Mapping[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    LOGGER.info("Wrote %s", path)


def _run_single(config: RunConfig, data: Dataset, prior: GlobalPrior) -> dict[str, float]:
    result = fit(data, prior, config.fit_config())
    start = perf_counter()
    summary = summarize_posterior(data, result, config.draws)
    posterior_time = perf_counter() - start
    out = config.out
    write_summary(out / SUMMARY_FILE, summary, summary_fields(result, summary, _base_fields(data, config)))
    write_trace(out / TRACE_FILE, result.trace, result.config.window)
    write_state(
        out / STATE_FILE,
        result,
        p=data.p,
        family=data.family.name,
        method=result.method.value,
        fixed_names=data.fixed_names,
        random_names=data.random_names,
    )
    write_subjects(out / SUBJECTS_FILE, [(summary, data.subject_ids)], data.random_names)
    _write_json(out / DIAGNOSTICS_FILE, fit_diagnostics(data, result.config, result, (summary,)))
    return {"fit": result.wall_time, "posterior": posterior_time}


def _run_sharded(config: RunConfig, data: Dataset, prior: NormalPrior) -> dict[str, float]:
    fit_config = config.fit_config()
    start = perf_counter()
    sharded: ShardedResult = fit_sharded(data, prior, fit_config, config.shards)
    fit_time = perf_counter() - start
    start = perf_counter()
    combined = summarize_factor(
        sharded.combined.mean, sharded.combined.cov, data.fixed_names, data.r, config.draws, seed=config.seed
    )
    summaries: list[tuple[PosteriorSummary, tuple[str, ...]]] = []
    timings = {"fit": fit_time}
    out = config.out
    for shard in sharded.shards:
        assert shard.result is not None
        result: FitResult = shard.result
        timings[f"shard{shard.index}_fit"] = result.wall_time
        summaries.append((summarize_posterior(shard.data, result, config.draws), shard.data.subject_ids))
        write_trace(out / f"shard{shard.index}_{TRACE_FILE}", result.trace, result.config.window)
        write_state(
            out / f"shard{shard.index}_{STATE_FILE}",
            result,
            p=data.p,
            family=data.family.name,
            method=result.method.value,
            fixed_names=data.fixed_names,
            random_names=data.random_names,
            extra={"shard": shard.index, "shards": config.shards, "seed": result.config.seed},
        )
    timings["posterior"] = perf_counter() - start
    fields = _base_fields(data, config) | {
        "method": config.method.value,
        "estimator": config.estimator.value,
        "seed": config.seed,
        "shards": config.shards,
        "shard_iterations": tuple(s.result.iterations for s in sharded.shards if s.result is not None),
        "shard_elbos": tuple(f"{elbo:.9g}" for elbo in sharded.shard_elbos),
        "posterior_draws": config.draws,
    }
    write_summary(out / SUMMARY_FILE, combined, fields)
    write_subjects(out / SUBJECTS_FILE, summaries, data.random_names)
    _write_json(
        out / DIAGNOSTICS_FILE, fit_diagnostics(data, fit_config, sharded, tuple(summary for summary, _ in summaries))
    )
    return timings


def _guarded(action: Callable[[], None]) -> int:
    """Run an action and map failures to exit codes."""
    try:
        action()
    except (ConfigError, vol.Invalid) as err:
        LOGGER.error("Configuration error: %s", error_text(err))
        return EXIT_CONFIG
    except DataError as err:
        LOGGER.error("Data error: %s", error_text(err))
        return EXIT_DATA
    except NumericalError as err:
        LOGGER.error("Numerical failure: %s", error_text(err))
        return EXIT_NUMERICAL
    return EXIT_OK


def run(config: RunConfig | Mapping[str, Any]) -> int:
    """Fit the configured model and write the result files; returns an exit code."""

    def _action() -> None:
        conf = config if isinstance(config, RunConfig) else RunConfig.from_mapping(config)
        total = perf_counter()
        data = load_data(conf)
        prior = build_prior(conf, data)
        conf.out.mkdir(parents=True, exist_ok=True)
        if conf.shards > 1:
            assert isinstance(prior, NormalPrior)
            timings = _run_sharded(conf, data, prior)
        else:
            timings = _run_single(conf, data, prior)
        timings["total"] = perf_counter() - total
        write_timing(conf.out / TIMING_FILE, timings)

    return _guarded(_action)


def run_simulate(scenario: str, seed: int, out: Path, n: int | None = None) -> int:
    """Write a simulated dataset as data.csv plus truth.json."""

    def _action() -> None:
        try:
            spec = SimulationSpec.from_scenario(scenario, n=n)
        except ValueError as err:
            raise ConfigError(f"unknown scenario {scenario!r}") from err
        data, truth = simulate_dataset(spec, seed)
        out.mkdir(parents=True, exist_ok=True)
        to_frame(data).to_csv(out / "data.csv", index=False, float_format="%.17g", lineterminator="\n")
        header = {"scenario": scenario, "seed": seed, "family": data.family.name}
        _write_json(out / "truth.json", header | truth.as_dict())

    return _guarded(_action)


def run_combine(states: Sequence[Path], out: Path, prior_file: Path | None, draws: int, seed: int) -> int:
    """Combine the global blocks of shard state files written by separate fits."""

    def _action() -> None:
        loaded = [read_state(path) for path in states]
        if not loaded:
            raise ConfigError("no state files given")
        first = loaded[0]
        for other in loaded[1:]:
            if (other.p, other.state.r, other.fixed_names) != (first.p, first.state.r, first.fixed_names):
                raise DataError("state files describe different models")
        if prior_file is None:
            prior = NormalPrior.default(first.p, first.state.r)
        else:
            normal = load_prior_file(prior_file)
            if not isinstance(normal, NormalPrior):
                raise ConfigError("combining shards needs a normal prior file")
            prior = normal
        if prior.g != first.state.g:
            raise PriorConfigError(f"normal prior has dimension {prior.g}, states have {first.state.g}")
        factors = [GaussianFactor(mean=s.state.global_mean().copy(), cov=s.state.global_cov()) for s in loaded]
        combined = combine(factors, GaussianFactor.from_prior(prior))
        summary = summarize_factor(combined.mean, combined.cov, first.fixed_names, first.state.r, draws, seed=seed)
        out.mkdir(parents=True, exist_ok=True)
        write_summary(out / SUMMARY_FILE, summary, {"kind": "combined", "shards": len(loaded), "family": first.family})

    return _guarded(_action)


def run_compare(va_path: Path, reference_path: Path, out: Path) -> int:
    """Per-subject r₁ = (mean_va − mean_ref)/sd_va and r₂ = sd_ref/sd_va."""

    def _action() -> None:
        try:
            merged = read_subjects(va_path).merge(
                read_subjects(reference_path), on=["subject", "component"], suffixes=("_va", "_ref"), validate="1:1"
            )
        except pd.errors.MergeError as err:
            raise DataError(f"duplicate subject rows: {err}") from err
        if merged.empty:
            raise DataError("the two subject files share no subjects")
        va_mean, va_sd = merged["b_mean_va"].to_numpy(), merged["b_sd_va"].to_numpy()
        r1, r2 = compare_metrics(va_mean, va_sd, merged["b_mean_ref"].to_numpy(), merged["b_sd_ref"].to_numpy())
        frame = pd.DataFrame({"subject": merged["subject"], "component": merged["component"], "r1": r1, "r2": r2})
        out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out, index=False, float_format="%.9g", lineterminator="\n")
        LOGGER.info("Wrote %s", out)

    return _guarded(_action)


def _fit_mapping(args: argparse.Namespace) -> dict[str, Any]:
    keys = (
        CONF_DATA, CONF_PRESET, CONF_FAMILY, CONF_RESPONSE, CONF_TRIALS_COL, CONF_GROUP_COL, CONF_FIXED,
        CONF_RANDOM, CONF_INTERCEPT, CONF_METHOD, CONF_PRIOR, CONF_PRIOR_FILE, CONF_SEED, CONF_SHARDS,
        CONF_MAX_ITER, CONF_OUT, CONF_DRAWS, CONF_ESTIMATOR, CONF_SAMPLES, CONF_ALLOW_INTERNAL,
    )  # fmt: skip
    return {key: getattr(args, key) for key in keys if getattr(args, key) is not None}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="INFO", choices=LOG_LEVELS)
    parser = argparse.ArgumentParser(prog="glmm-rvb", description="Reparametrized variational Bayes for GLMMs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    fit_parser = commands.add_parser("fit", parents=[common], help="fit a model and write result files")
    fit_parser.add_argument("--data")
    fit_parser.add_argument("--preset", choices=sorted(PRESETS))
    fit_parser.add_argument("--family", choices=[kind.value for kind in FamilyKind])
    fit_parser.add_argument("--response")
    fit_parser.add_argument("--trials-col", dest=CONF_TRIALS_COL)
    fit_parser.add_argument("--group-col", dest=CONF_GROUP_COL)
    fit_parser.add_argument("--fixed", help="comma-separated fixed-effect columns")
    fit_parser.add_argument("--random", help="comma-separated random-effect columns")
    fit_parser.add_argument("--intercept", choices=[i.value for i in Intercept])
    fit_parser.add_argument("--method", choices=[m.value for m in TransformMethod])
    fit_parser.add_argument("--prior", choices=[PRIOR_DEFAULT, PRIOR_NORMAL_OMEGA, PRIOR_FILE])
    fit_parser.add_argument("--prior-file", dest=CONF_PRIOR_FILE)
    fit_parser.add_argument("--seed", type=int)
    fit_parser.add_argument("--shards", type=int)
    fit_parser.add_argument("--max-iter", dest=CONF_MAX_ITER, type=int)
    fit_parser.add_argument("--out", required=True)
    fit_parser.add_argument("--draws", type=int, help="posterior simulation draws")
    fit_parser.add_argument("--estimator", choices=[e.value for e in Estimator])
    fit_parser.add_argument("--samples", type=int, help="Monte Carlo samples per iteration")
    fit_parser.add_argument("--allow-internal", dest=CONF_ALLOW_INTERNAL, action="store_true", default=None)

    sim_parser = commands.add_parser("simulate", parents=[common], help="write a simulated dataset")
    sim_parser.add_argument("--scenario", required=True, choices=[s.value for s in Scenario])
    sim_parser.add_argument("--seed", type=int, default=0)
    sim_parser.add_argument("--subjects", type=int)
    sim_parser.add_argument("--out", required=True)

    combine_parser = commands.add_parser("combine", parents=[common], help="combine shard state files")
    combine_parser.add_argument("states", nargs="+")
    combine_parser.add_argument("--prior-file")
    combine_parser.add_argument("--draws", type=int, default=DEFAULT_POSTERIOR_DRAWS)
    combine_parser.add_argument("--seed", type=int, default=0)
    combine_parser.add_argument("--out", required=True)

    compare_parser = commands.add_parser(
        "compare", parents=[common], help="compare per-subject summaries with a reference"
    )
    compare_parser.add_argument("va")
    compare_parser.add_argument("reference")
    compare_parser.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if args and args[0] not in COMMANDS and args[0] not in {"-h", "--help", "--version"}:
        args = ["fit", *args]
    namespace = build_parser().parse_args(args)
    logging.basicConfig(level=namespace.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    match namespace.command:
        case "simulate":
            return run_simulate(namespace.scenario, namespace.seed, Path(namespace.out), namespace.subjects)
        case "combine":
            prior_file = Path(namespace.prior_file) if namespace.prior_file else None
            return run_combine(
                [Path(p) for p in namespace.states], Path(namespace.out), prior_file, namespace.draws, namespace.seed
            )
        case "compare":
            return run_compare(Path(namespace.va), Path(namespace.reference), Path(namespace.out))
    return run(_fit_mapping(namespace))
