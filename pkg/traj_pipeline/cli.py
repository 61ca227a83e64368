"""
Command-line entry point.

    trajpipe simulate --n 95 --schedule 1.5,2,4,5 --clusters 3 --seed 7 -o cohort.csv
    trajpipe eval --model lcmm --classes 3 --cov nc --input cohort.csv --trials 50 -o report.json

Every command resolves its options as defaults < ``--config`` JSON < explicit
flags, validates them into a pydantic run config, and writes that resolved
config next to its output as ``<output>.config.json``.
"""
import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from traj_pipeline.config import (
    load_grid_file,
    load_json_object,
    parse_cov_kinds,
    parse_int_list,
    parse_schedule,
)
from traj_pipeline.core.config import settings
from traj_pipeline.core.errors import InvalidConfig, TrajectoryError
from traj_pipeline.core.seeding import derive_rng
from traj_pipeline.evaluation.compare import compare_models, write_figure_csv
from traj_pipeline.evaluation.trials import DpgpModel, LcmmModel, OracleModel, TrialReport, run_trials
from traj_pipeline.ingestion.cohort_io import labels_path_for, load_csv, load_labels, save_csv, save_labels
from traj_pipeline.ingestion.schemas import IndividualWiggle, SimulationConfig
from traj_pipeline.ingestion.simulator import simulate_cohort
from traj_pipeline.models.dpgp import DpgpHyperParams, GridSearchConfig, fit_dpgp, grid_search
from traj_pipeline.models.lcmm import CovKind, EmSettings, LcmmSpec, em_fit, select_model
from traj_pipeline.transformation.zscore import ZScoreMode, zscore_per_timepoint

logger = logging.getLogger(__name__)

PROG = "trajpipe"

# Field name -> flag, where they differ from ``--field-name``
_FLAG_OVERRIDES = {"n_subjects": "--n"}


class UsageError(Exception):
    """Bad command line or config file; reported with exit code 1."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{message}\n{self.format_usage()}")


def flag_for(field: str) -> str:
    return _FLAG_OVERRIDES.get(field, "--" + field.replace("_", "-"))


# ---------------------------------------------------------------------------
# Run configs
# ---------------------------------------------------------------------------

class RunConfig(BaseModel):
    """Fully resolved options of one command invocation."""

    model_config = ConfigDict(extra="forbid")

    command: str
    output: str = Field(..., min_length=1, description="Primary output path")


class _EmFlags(BaseModel):
    n_starts: int = Field(default_factory=lambda: settings.EM_N_STARTS, ge=1, description="EM random restarts")
    tol: float = Field(default_factory=lambda: settings.EM_TOL, gt=0, description="EM log-likelihood tolerance")
    max_iters: int = Field(default_factory=lambda: settings.EM_MAX_ITERS, ge=1, description="EM iteration cap")

    def em(self) -> EmSettings:
        return EmSettings(n_starts=self.n_starts, tol=self.tol, max_iters=self.max_iters)


class _LcmmFlags(_EmFlags):
    classes: int = Field(3, ge=1, description="Number of latent classes")
    cov: CovKind = Field(CovKind.NC, description="Within-subject covariance structure")

    def spec(self) -> LcmmSpec:
        return LcmmSpec(n_classes=self.classes, cov_kind=self.cov)


class _SamplerFlags(BaseModel):
    sweeps: int = Field(default_factory=lambda: settings.DPGP_SWEEPS, ge=1)
    burnin: int = Field(default_factory=lambda: settings.DPGP_BURNIN, ge=0)
    thin: int = Field(default_factory=lambda: settings.DPGP_THIN, ge=1)

    @model_validator(mode="after")
    def _sweeps_exceed_burnin(self):
        if self.sweeps <= self.burnin:
            raise ValueError(f"--sweeps ({self.sweeps}) must exceed --burnin ({self.burnin})")
        return self


class _DpgpFlags(_SamplerFlags):
    latent_variance: float = Field(default_factory=lambda: settings.DPGP_LATENT_VARIANCE, ge=0)
    latent_lengthscale: float = Field(default_factory=lambda: settings.DPGP_LATENT_LENGTHSCALE, gt=0)
    indiv_variance: float = Field(default_factory=lambda: settings.DPGP_INDIV_VARIANCE, ge=0)
    indiv_lengthscale: float = Field(default_factory=lambda: settings.DPGP_INDIV_LENGTHSCALE, gt=0)
    nugget: float = Field(default_factory=lambda: settings.DPGP_NUGGET, ge=0)
    alpha: float = Field(default_factory=lambda: settings.DPGP_ALPHA, gt=0)

    def hyper(self) -> DpgpHyperParams:
        return DpgpHyperParams.from_flat(
            latent_variance=self.latent_variance,
            latent_lengthscale=self.latent_lengthscale,
            indiv_variance=self.indiv_variance,
            indiv_lengthscale=self.indiv_lengthscale,
            nugget=self.nugget,
            alpha=self.alpha,
        )


class SimulateConfig(RunConfig):
    command: Literal["simulate"] = "simulate"
    n_subjects: int = Field(95, ge=1)
    schedule: list[float] = Field(default_factory=lambda: [1.5, 2.0, 4.0, 5.0], min_length=1)
    clusters: int = Field(3, ge=1)
    noise_sd: float = Field(0.25, ge=0)
    wiggle_amplitude: float = Field(0.2, ge=0)
    wiggle_lengthscale: float = Field(2.0, gt=0)
    missing_rate: float = Field(0.0, ge=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def _simulation_valid(self):
        try:
            self.simulation()
        except ValidationError as e:
            raise ValueError(e.errors()[0]["msg"]) from None
        return self

    def simulation(self) -> SimulationConfig:
        return SimulationConfig(
            n_subjects=self.n_subjects,
            schedule=self.schedule,
            n_clusters=self.clusters,
            individual_noise_sd=self.noise_sd,
            individual_wiggle=IndividualWiggle(amplitude=self.wiggle_amplitude, lengthscale=self.wiggle_lengthscale),
            missing_rate=self.missing_rate,
            seed=self.seed,
        )


class ZScoreConfig(RunConfig):
    command: Literal["zscore"] = "zscore"
    input: str
    mode: ZScoreMode = ZScoreMode.STANDARDIZE
    schedule: Optional[list[float]] = None


class FitDpgpConfig(RunConfig, _DpgpFlags):
    command: Literal["fit-dpgp"] = "fit-dpgp"
    input: str
    seed: int = 0


class FitLcmmConfig(RunConfig, _LcmmFlags):
    command: Literal["fit-lcmm"] = "fit-lcmm"
    input: str
    seed: int = 0


class SelectLcmmConfig(RunConfig, _EmFlags):
    command: Literal["select-lcmm"] = "select-lcmm"
    input: str
    classes: list[int] = Field(default_factory=lambda: [1, 2, 3, 4], min_length=1)
    covs: list[CovKind] = Field(default_factory=lambda: list(CovKind), min_length=1)
    seed: int = 0
    jobs: int = Field(default_factory=lambda: settings.JOBS, ge=1)


class EvalConfig(RunConfig, _DpgpFlags, _LcmmFlags):
    command: Literal["eval"] = "eval"
    input: str
    model: Literal["dpgp", "lcmm", "oracle"] = "lcmm"
    holdout: float = Field(0.3, gt=0, lt=1, description="Share of subjects whose final point is hidden")
    trials: int = Field(50, ge=1)
    seed: int = 0
    jobs: int = Field(default_factory=lambda: settings.JOBS, ge=1)
    labels: Optional[str] = Field(None, description="Oracle only: labels file (default <input stem>.labels.csv)")
    simulation: Optional[str] = Field(None, description="Oracle only: simulate sidecar (default <input>.config.json)")


class CompareConfig(RunConfig):
    command: Literal["compare"] = "compare"
    reports: list[str] = Field(..., min_length=2)
    figure: Optional[str] = Field(None, description="Figure-data CSV (default <output stem>.figure.csv)")


class GridSearchRunConfig(RunConfig, _SamplerFlags):
    command: Literal["grid-search"] = "grid-search"
    input: str
    grid: str
    holdout: float = Field(0.3, gt=0, lt=1)
    trials: int = Field(1, ge=1)
    seed: int = 0
    jobs: int = Field(default_factory=lambda: settings.JOBS, ge=1)


CONFIG_MODELS: dict[str, type[RunConfig]] = {
    "simulate": SimulateConfig,
    "zscore": ZScoreConfig,
    "fit-dpgp": FitDpgpConfig,
    "fit-lcmm": FitLcmmConfig,
    "select-lcmm": SelectLcmmConfig,
    "eval": EvalConfig,
    "compare": CompareConfig,
    "grid-search": GridSearchRunConfig,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _typed(fn: Callable[[str], Any]) -> Callable[[str], Any]:
    def convert(text: str):
        try:
            return fn(text)
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from None
    convert.__name__ = fn.__name__
    return convert


def _add_common(p: argparse.ArgumentParser, *, has_input: bool = True) -> None:
    p.add_argument("--config", help="JSON run config; explicit flags override it")
    p.add_argument("--log-level", dest="log_level", type=str.upper,
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("-o", "--output", help="Primary output path")
    if has_input:
        p.add_argument("-i", "--input", help="Cohort CSV")


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)


def _add_jobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--jobs", type=int, help="Worker processes (1 keeps timings honest)")


def _add_em(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-starts", dest="n_starts", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)


def _add_sampler(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sweeps", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)


def _add_dpgp(p: argparse.ArgumentParser) -> None:
    for name in ("latent_variance", "latent_lengthscale", "indiv_variance", "indiv_lengthscale", "nugget", "alpha"):
        p.add_argument(flag_for(name), dest=name, type=float)
    _add_sampler(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog=PROG, description="Cluster and forecast sparse longitudinal trajectories.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help_text, prog=f"{PROG} {name}", argument_default=argparse.SUPPRESS)

    p = add("simulate", "Draw a synthetic cohort with planted clusters")
    _add_common(p, has_input=False)
    p.add_argument("--n", dest="n_subjects", type=int)
    p.add_argument("--schedule", type=_typed(parse_schedule))
    p.add_argument("--clusters", type=int)
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.add_argument("--wiggle-amplitude", dest="wiggle_amplitude", type=float)
    p.add_argument("--wiggle-lengthscale", dest="wiggle_lengthscale", type=float)
    p.add_argument("--missing-rate", dest="missing_rate", type=float)
    _add_seed(p)

    p = add("zscore", "Z-score values per time point")
    _add_common(p)
    p.add_argument("--mode", choices=[m.value for m in ZScoreMode])
    p.add_argument("--schedule", type=_typed(parse_schedule))

    p = add("fit-dpgp", "Fit the DP-GP mixture by collapsed Gibbs sampling")
    _add_common(p)
    _add_dpgp(p)
    _add_seed(p)

    p = add("fit-lcmm", "Fit one latent class mixed model by EM")
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--cov", type=str.lower, choices=[k.value for k in CovKind])
    _add_em(p)
    _add_seed(p)

    p = add("select-lcmm", "Fit LCMM candidates and select by BIC")
    _add_common(p)
    p.add_argument("--classes", type=_typed(parse_int_list), help="e.g. 1-4 or 2,3")
    p.add_argument("--covs", type=_typed(parse_cov_kinds), help="e.g. nc,ar,bm")
    _add_em(p)
    _add_seed(p)
    _add_jobs(p)

    p = add("eval", "Repeated final-time-point hold-out evaluation")
    _add_common(p)
    p.add_argument("--model", choices=["dpgp", "lcmm", "oracle"])
    p.add_argument("--holdout", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--cov", type=str.lower, choices=[k.value for k in CovKind])
    _add_em(p)
    _add_dpgp(p)
    p.add_argument("--labels")
    p.add_argument("--simulation")
    _add_seed(p)
    _add_jobs(p)

    p = add("compare", "Compare trial reports side by side")
    _add_common(p, has_input=False)
    p.add_argument("--reports", nargs="+")
    p.add_argument("--figure")

    p = add("grid-search", "Choose DP-GP hyperparameters by hold-out RMSE")
    _add_common(p)
    p.add_argument("--grid", help="JSON array of hyperparameter points")
    p.add_argument("--holdout", type=float)
    p.add_argument("--trials", type=int)
    _add_sampler(p)
    _add_seed(p)
    _add_jobs(p)

    for name, subparser in sub.choices.items():
        subparser.set_defaults(usage=subparser.format_usage())
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """
    Merge defaults, the optional ``--config`` file and explicit flags into a run config.

    Raises:
        UsageError: Unreadable config file, mismatched command or an invalid value;
            the message names the offending flag and carries the command grammar
    """
    model_cls = CONFIG_MODELS[args.command]
    usage = getattr(args, "usage", "")
    values: dict[str, Any] = {}

    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            payload = load_json_object(config_path)
        except (InvalidConfig, OSError) as e:
            raise UsageError(f"--config: {e}\n{usage}") from e
        command = payload.pop("command", args.command)
        if command != args.command:
            raise UsageError(f"--config: file is for '{command}', not '{args.command}'\n{usage}")
        values.update(payload)

    explicit = {k: v for k, v in vars(args).items() if k in model_cls.model_fields}
    values.update(explicit)
    values["command"] = args.command
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        errors = e.errors()
        # Prefer errors on flags the user actually typed
        err = next((x for x in errors if x.get("loc") and x["loc"][0] in explicit), errors[0])
        loc = err.get("loc") or ()
        prefix = f"{flag_for(str(loc[0]))}: " if loc else ""
        message = err["msg"].removeprefix("Value error, ")
        raise UsageError(f"{prefix}{message}\n{usage}") from e


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _finite_or_none(payload: Any) -> Any:
    if isinstance(payload, float) and not math.isfinite(payload):
        return None
    if isinstance(payload, dict):
        return {k: _finite_or_none(v) for k, v in payload.items()}
    if isinstance(payload, (list, tuple)):
        return [_finite_or_none(v) for v in payload]
    return payload


def write_json(payload: Any, path: str | Path) -> None:
    """Write JSON with non-finite floats as ``null``."""
    Path(path).write_text(json.dumps(_finite_or_none(payload), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def sidecar_path(output: str | Path) -> Path:
    return Path(f"{output}.config.json")


def _cmd_simulate(cfg: SimulateConfig) -> None:
    dataset, labels = simulate_cohort(cfg.simulation())
    save_csv(dataset, cfg.output)
    save_labels(labels, labels_path_for(cfg.output))


def _cmd_zscore(cfg: ZScoreConfig) -> None:
    raw = load_csv(cfg.input, schedule_hint=cfg.schedule)
    save_csv(zscore_per_timepoint(raw, cfg.mode), cfg.output)


def _cmd_fit_dpgp(cfg: FitDpgpConfig) -> None:
    data = load_csv(cfg.input)
    post = fit_dpgp(data, cfg.hyper(), cfg.sweeps, cfg.burnin, cfg.thin, derive_rng(cfg.seed, "dpgp-fit"))
    write_json(post.summary(), cfg.output)


def _cmd_fit_lcmm(cfg: FitLcmmConfig) -> None:
    data = load_csv(cfg.input)
    fit = em_fit(data, cfg.spec(), cfg.n_starts, cfg.tol, cfg.max_iters, derive_rng(cfg.seed, "lcmm-fit"))
    write_json(fit.summary(), cfg.output)


def _cmd_select_lcmm(cfg: SelectLcmmConfig) -> None:
    data = load_csv(cfg.input)
    candidates = [LcmmSpec(n_classes=g, cov_kind=kind) for kind in cfg.covs for g in cfg.classes]
    selection = select_model(data, candidates, cfg.em(), derive_rng(cfg.seed, "lcmm-select"), cfg.jobs)
    write_json(selection.summary(), cfg.output)


def _oracle_model(cfg: EvalConfig) -> OracleModel:
    sim_path = cfg.simulation or sidecar_path(cfg.input)
    payload = load_json_object(sim_path)
    payload.pop("command", None)
    try:
        simulation = SimulateConfig.model_validate(payload).simulation()
    except ValidationError as e:
        raise InvalidConfig(f"{sim_path}: not a simulate config: {e.errors()[0]['msg']}") from e
    labels = load_labels(cfg.labels or labels_path_for(cfg.input))
    return OracleModel(simulation=simulation, labels=labels)


def _cmd_eval(cfg: EvalConfig) -> None:
    data = load_csv(cfg.input)
    if cfg.model == "dpgp":
        model = DpgpModel(hyper=cfg.hyper(), sweeps=cfg.sweeps, burnin=cfg.burnin, thin=cfg.thin)
    elif cfg.model == "lcmm":
        model = LcmmModel(spec=cfg.spec(), em=cfg.em())
    else:
        model = _oracle_model(cfg)
    report = run_trials(model, data, cfg.holdout, cfg.trials, cfg.seed, cfg.jobs)
    Path(cfg.output).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    Path(f"{cfg.output}.metrics.json").write_text(report.metrics_json() + "\n", encoding="utf-8")


def _cmd_compare(cfg: CompareConfig) -> None:
    reports = [TrialReport.model_validate_json(Path(p).read_text(encoding="utf-8")) for p in cfg.reports]
    table = compare_models(reports)
    write_json(table.model_dump(mode="json"), cfg.output)
    write_figure_csv(table, cfg.figure or Path(cfg.output).with_suffix(".figure.csv"))


def _cmd_grid_search(cfg: GridSearchRunConfig) -> None:
    data = load_csv(cfg.input)
    grid = load_grid_file(cfg.grid)
    eval_cfg = GridSearchConfig(
        holdout_fraction=cfg.holdout, n_trials=cfg.trials, seed=cfg.seed,
        sweeps=cfg.sweeps, burnin=cfg.burnin, thin=cfg.thin,
    )
    best, table = grid_search(data, grid, eval_cfg, cfg.jobs)
    best_index = int(np.argmin([row.mean_rmse for row in table]))
    write_json(
        {
            "best_index": best_index,
            "best": best.to_flat(),
            "table": [{"index": row.index, **row.hyper.to_flat(), "mean_rmse": row.mean_rmse} for row in table],
        },
        cfg.output,
    )


COMMANDS: dict[str, Callable[[Any], None]] = {
    "simulate": _cmd_simulate,
    "zscore": _cmd_zscore,
    "fit-dpgp": _cmd_fit_dpgp,
    "fit-lcmm": _cmd_fit_lcmm,
    "select-lcmm": _cmd_select_lcmm,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "grid-search": _cmd_grid_search,
}


def _configure_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Execute one command.

    Returns:
        0 on success, 1 on a usage error, 2 on a runtime failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as e:
        print(f"{PROG}: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else 0

    _configure_logging(getattr(args, "log_level", None))
    logger.info(f"Running {cfg.command} -> {cfg.output}")
    try:
        COMMANDS[cfg.command](cfg)
        sidecar_path(cfg.output).write_text(cfg.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except (TrajectoryError, ValueError, OSError, np.linalg.LinAlgError) as e:
        logger.error(f"{cfg.command} failed: {type(e).__name__}: {e}")
        print(f"{PROG}: {cfg.command} failed: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
