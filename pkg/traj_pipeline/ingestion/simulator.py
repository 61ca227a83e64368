"""
Synthetic cohort generator.

Produces cohorts shaped like a small developmental study: a few subjects'
scores measured at a handful of fixed ages, drawn from planted clusters
with known mean curves, smooth individual deviations and measurement noise.
"""
import logging
from collections.abc import Mapping
from typing import Any

import numpy as np
from numpy.polynomial import polynomial
from pydantic import ValidationError

from traj_pipeline.core.errors import InvalidConfig
from traj_pipeline.ingestion.schemas import SimulationConfig, Subject, TrajectoryDataset
from traj_pipeline.models.kernels import (
    ClusterCovConfig,
    ClusterFactor,
    KernelParams,
    cholesky_with_jitter,
    se_matrix,
    stack_cluster,
)

logger = logging.getLogger(__name__)


def _validated(cfg: SimulationConfig | Mapping[str, Any]) -> SimulationConfig:
    payload = dict(cfg) if isinstance(cfg, Mapping) else cfg.model_dump()
    try:
        return SimulationConfig.model_validate(payload)
    except ValidationError as e:
        raise InvalidConfig(f"invalid simulation config: {e}") from e


def subject_id_for(index: int) -> str:
    return f"S{index + 1:03d}"


def cluster_mean(cfg: SimulationConfig, cluster: int, times) -> np.ndarray:
    """Value of cluster ``cluster``'s mean curve at ``times``."""
    return polynomial.polyval(np.asarray(times, dtype=float), cfg.cluster_mean_functions[cluster])


def simulate_cohort(cfg: SimulationConfig | Mapping[str, Any]) -> tuple[TrajectoryDataset, dict[str, int]]:
    """
    Draw a synthetic cohort with known cluster labels.

    Each subject draws a cluster by ``cluster_weights``; its value at age t is
    the cluster mean curve plus a squared-exponential GP deviation plus iid
    Gaussian noise. Observations are dropped independently with
    ``missing_rate`` but every subject keeps at least one.

    Args:
        cfg: Simulation configuration (a mapping is validated first)

    Returns:
        (dataset, labels mapping subject id to cluster index)

    Raises:
        InvalidConfig: If the configuration violates its invariants
    """
    cfg = _validated(cfg)
    rng = np.random.default_rng(cfg.seed)
    schedule = np.asarray(cfg.schedule, dtype=float)
    m = len(schedule)

    wiggle = cfg.individual_wiggle
    wiggle_chol = None
    if wiggle.amplitude > 0:
        wiggle_cov = se_matrix(schedule, schedule, KernelParams(variance=wiggle.amplitude ** 2,
                                                                lengthscale=wiggle.lengthscale))
        wiggle_chol, _ = cholesky_with_jitter(wiggle_cov, 1e-10)

    clusters = rng.choice(cfg.n_clusters, size=cfg.n_subjects, p=np.asarray(cfg.cluster_weights))
    subjects = []
    labels: dict[str, int] = {}
    for i, k in enumerate(clusters):
        z = rng.standard_normal(m)
        noise = rng.standard_normal(m)
        drop_draws = rng.random(m)

        values = cluster_mean(cfg, int(k), schedule)
        if wiggle_chol is not None:
            values = values + wiggle_chol @ z
        if cfg.individual_noise_sd > 0:
            values = values + cfg.individual_noise_sd * noise

        keep = drop_draws >= cfg.missing_rate
        if not keep.any():
            keep[int(rng.integers(m))] = True

        sid = subject_id_for(i)
        subjects.append(Subject.from_arrays(sid, schedule[keep], values[keep]))
        labels[sid] = int(k)

    dataset = TrajectoryDataset(subjects=subjects, schedule_hint=list(cfg.schedule))
    logger.info(
        f"Simulated {cfg.n_subjects} subjects in {cfg.n_clusters} clusters, "
        f"{dataset.n_observations} observations (seed={cfg.seed})"
    )
    return dataset, labels


def oracle_predict(
    cfg: SimulationConfig,
    cluster: int,
    times,
    values,
    query_time: float,
) -> float:
    """
    True generative conditional mean of a subject's value at ``query_time``.

    The cluster mean curve plus the GP conditional of the individual deviation
    (wiggle + measurement noise) given the subject's observed residuals.
    """
    times = np.asarray(times, dtype=float)
    residuals = np.asarray(values, dtype=float) - cluster_mean(cfg, cluster, times)
    cov = ClusterCovConfig(
        latent=KernelParams(variance=0.0, lengthscale=1.0),
        individual=KernelParams(variance=cfg.individual_wiggle.amplitude ** 2,
                                lengthscale=cfg.individual_wiggle.lengthscale),
        nugget=cfg.individual_noise_sd ** 2,
    )
    factor = ClusterFactor.build(stack_cluster([(times, residuals)]), cov)
    mean, _ = factor.predict(np.array([query_time]), 0)
    return float(cluster_mean(cfg, cluster, [query_time])[0] + mean[0])
