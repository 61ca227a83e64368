"""
Repeated hold-out trials.

Each trial draws a fresh final-time-point split from a derived seed, fits a
model on the training part, predicts the hidden points and records RMSE,
correlation and fit wall-clock time.
"""
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Annotated, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from traj_pipeline.core.config import settings
from traj_pipeline.core.errors import FailureRateExceeded, TrajectoryError, ZeroVariance
from traj_pipeline.core.seeding import derive_rng
from traj_pipeline.evaluation.metrics import pearson, rmse, summarize
from traj_pipeline.evaluation.splits import make_holdout_split
from traj_pipeline.ingestion.schemas import SimulationConfig, TrajectoryDataset
from traj_pipeline.ingestion.simulator import oracle_predict
from traj_pipeline.models.dpgp import DpgpHyperParams, dpgp_predict, fit_dpgp
from traj_pipeline.models.lcmm import EmSettings, LcmmSpec, em_fit, lcmm_predict

logger = logging.getLogger(__name__)


class DpgpModel(BaseModel):
    """DP-GP fit + posterior-averaged prediction."""

    kind: Literal["dpgp"] = "dpgp"
    name: Optional[str] = None
    hyper: DpgpHyperParams = Field(default_factory=DpgpHyperParams)
    sweeps: Optional[int] = Field(None, ge=1)
    burnin: Optional[int] = Field(None, ge=0)
    thin: Optional[int] = Field(None, ge=1)

    @property
    def tag(self) -> str:
        return self.name or "DPGP"

    def fit_predict(self, train: TrajectoryDataset, queries: Sequence[tuple[str, float]],
                    rng: np.random.Generator) -> tuple[np.ndarray, float]:
        start = time.perf_counter()
        post = fit_dpgp(train, self.hyper, self.sweeps, self.burnin, self.thin, rng)
        elapsed = time.perf_counter() - start
        return dpgp_predict(post, train, queries), elapsed


class LcmmModel(BaseModel):
    """LCMM EM fit + conditional class-weighted prediction."""

    kind: Literal["lcmm"] = "lcmm"
    name: Optional[str] = None
    spec: LcmmSpec
    em: EmSettings = Field(default_factory=EmSettings)

    @property
    def tag(self) -> str:
        return self.name or self.spec.label

    def fit_predict(self, train: TrajectoryDataset, queries: Sequence[tuple[str, float]],
                    rng: np.random.Generator) -> tuple[np.ndarray, float]:
        start = time.perf_counter()
        fit = em_fit(train, self.spec, self.em.n_starts, self.em.tol, self.em.max_iters, rng)
        elapsed = time.perf_counter() - start
        preds = []
        for sid, t in queries:
            subject = train.get(sid)
            preds.append(lcmm_predict(fit, subject.times, subject.values, t))
        return np.asarray(preds), elapsed


class OracleModel(BaseModel):
    """Generative oracle: true cluster labels and simulation parameters, nothing fitted."""

    kind: Literal["oracle"] = "oracle"
    name: Optional[str] = None
    simulation: SimulationConfig
    labels: dict[str, int]

    @property
    def tag(self) -> str:
        return self.name or "ORACLE"

    def fit_predict(self, train: TrajectoryDataset, queries: Sequence[tuple[str, float]],
                    rng: np.random.Generator) -> tuple[np.ndarray, float]:
        preds = []
        for sid, t in queries:
            subject = train.get(sid)
            preds.append(oracle_predict(self.simulation, self.labels[sid], subject.times, subject.values, t))
        return np.asarray(preds), 0.0


ModelConfig = Annotated[Union[DpgpModel, LcmmModel, OracleModel], Field(discriminator="kind")]


class TrialOutcome(BaseModel):
    index: int
    rmse: Optional[float] = None
    correlation: Optional[float] = None
    fit_seconds: Optional[float] = None
    predictions: list[float] = Field(default_factory=list)
    truths: list[float] = Field(default_factory=list)
    error: Optional[str] = None


class TrialReport(BaseModel):
    """Per-trial metrics of one model, plus the pooled held-out-points view."""

    model: str
    n_trials: int
    holdout_fraction: float
    seed: int
    rmse: list[Optional[float]]
    correlation: list[Optional[float]]
    fit_seconds: list[Optional[float]]
    failed: list[int] = Field(default_factory=list)
    errors: dict[int, str] = Field(default_factory=dict)
    pooled_predictions: list[float] = Field(default_factory=list)
    pooled_truths: list[float] = Field(default_factory=list)
    summary: dict = Field(default_factory=dict)
    timing: dict = Field(default_factory=dict)

    def metrics_json(self) -> str:
        """JSON without wall-clock fields; identical across reruns with one seed."""
        return self.model_dump_json(exclude={"fit_seconds", "timing"}, indent=2)


def _run_trial(model: ModelConfig, data: TrajectoryDataset, fraction: float, seed: int, index: int) -> TrialOutcome:
    try:
        split = make_holdout_split(data, fraction, derive_rng(seed, "trial-split", index))
        preds, seconds = model.fit_predict(split.train, split.queries, derive_rng(seed, "trial-fit", index))
        truths = split.truths
        score = rmse(preds, truths)
    except (TrajectoryError, ValueError, np.linalg.LinAlgError) as e:
        logger.warning(f"{model.tag} trial {index} failed: {type(e).__name__}: {e}")
        return TrialOutcome(index=index, error=f"{type(e).__name__}: {e}")

    try:
        corr: Optional[float] = pearson(preds, truths)
    except ZeroVariance:
        logger.warning(f"{model.tag} trial {index}: predictions or truths constant, correlation undefined")
        corr = None
    return TrialOutcome(index=index, rmse=score, correlation=corr, fit_seconds=seconds,
                        predictions=preds.tolist(), truths=truths.tolist())


def run_trials(
    model: ModelConfig,
    data: TrajectoryDataset,
    fraction: float,
    n_trials: int,
    seed: int,
    jobs: Optional[int] = None,
    max_failure_rate: Optional[float] = None,
) -> TrialReport:
    """
    Repeat the hold-out protocol ``n_trials`` times.

    Args:
        model: Model adapter (DpgpModel, LcmmModel or OracleModel)
        data: Full cohort
        fraction: Share of subjects whose final point is hidden per trial
        n_trials: Number of trials (>= 1)
        seed: Master seed; trial t uses streams derived from (seed, t)
        jobs: Worker processes (defaults to settings.JOBS); use 1 for honest timing
        max_failure_rate: Allowed failed-trial share (defaults to settings.MAX_TRIAL_FAILURE_RATE)

    Returns:
        TrialReport; failed trials appear as ``None`` entries and are left out of summaries

    Raises:
        FailureRateExceeded: If more than ``max_failure_rate`` of the trials failed
    """
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    jobs = settings.JOBS if jobs is None else jobs
    max_failure_rate = settings.MAX_TRIAL_FAILURE_RATE if max_failure_rate is None else max_failure_rate

    logger.info(f"Running {n_trials} trials of {model.tag} (holdout {fraction}, seed {seed}, jobs {jobs})")
    indices = list(range(n_trials))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_trial, [model] * n_trials, [data] * n_trials,
                                     [fraction] * n_trials, [seed] * n_trials, indices))
    else:
        outcomes = [_run_trial(model, data, fraction, seed, i) for i in indices]

    failed = [o.index for o in outcomes if o.error is not None]
    if len(failed) > max_failure_rate * n_trials:
        raise FailureRateExceeded(f"{len(failed)}/{n_trials} trials of {model.tag} failed")

    pooled_p = [p for o in outcomes for p in o.predictions]
    pooled_t = [t for o in outcomes for t in o.truths]
    pooled: dict = {"n_points": len(pooled_p), "rmse": None, "correlation": None}
    if pooled_p:
        pooled["rmse"] = rmse(pooled_p, pooled_t)
        try:
            pooled["correlation"] = pearson(pooled_p, pooled_t)
        except ZeroVariance:
            pass

    report = TrialReport(
        model=model.tag,
        n_trials=n_trials,
        holdout_fraction=fraction,
        seed=seed,
        rmse=[o.rmse for o in outcomes],
        correlation=[o.correlation for o in outcomes],
        fit_seconds=[o.fit_seconds for o in outcomes],
        failed=failed,
        errors={o.index: o.error for o in outcomes if o.error is not None},
        pooled_predictions=pooled_p,
        pooled_truths=pooled_t,
        summary={
            "rmse": summarize([o.rmse for o in outcomes]),
            "correlation": summarize([o.correlation for o in outcomes]),
            "pooled": pooled,
        },
        timing={"fit_seconds": summarize([o.fit_seconds for o in outcomes])},
    )
    rmse_summary = report.summary["rmse"]
    if rmse_summary["n"]:
        logger.info(
            f"{model.tag}: median RMSE {rmse_summary['median']:.4f} over {rmse_summary['n']} trials, "
            f"{len(failed)} failed"
        )
    return report


def mean_fit_seconds(report: TrialReport) -> float:
    times = [t for t in report.fit_seconds if t is not None]
    return float(np.mean(times)) if times else math.nan
