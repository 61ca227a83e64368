"""Clustering and forecasting of sparse longitudinal trajectories: DP-GP mixtures and latent class mixed models."""

from traj_pipeline.ingestion import (
    TrajectoryDataset,
    SimulationConfig,
    load_csv,
    save_csv,
    simulate_cohort,
)
from traj_pipeline.transformation import zscore_per_timepoint
from traj_pipeline.models import (
    DpgpHyperParams,
    fit_dpgp,
    dpgp_predict,
    grid_search,
    LcmmSpec,
    CovKind,
    em_fit,
    lcmm_predict,
    select_model,
)
from traj_pipeline.evaluation import (
    make_holdout_split,
    run_trials,
    compare_models,
)

__all__ = [
    "TrajectoryDataset",
    "SimulationConfig",
    "load_csv",
    "save_csv",
    "simulate_cohort",
    "zscore_per_timepoint",
    "DpgpHyperParams",
    "fit_dpgp",
    "dpgp_predict",
    "grid_search",
    "LcmmSpec",
    "CovKind",
    "em_fit",
    "lcmm_predict",
    "select_model",
    "make_holdout_split",
    "run_trials",
    "compare_models",
]
