"""
Evaluation Layer

Final-time-point hold-out splits, metrics, repeated trials and model comparison.
"""
from traj_pipeline.evaluation.metrics import rmse, pearson, summarize
from traj_pipeline.evaluation.splits import HoldoutSplit, make_holdout_split, merge_split
from traj_pipeline.evaluation.trials import (
    DpgpModel,
    LcmmModel,
    OracleModel,
    TrialReport,
    run_trials,
)
from traj_pipeline.evaluation.compare import ComparisonTable, compare_models, write_figure_csv

__all__ = [
    "rmse",
    "pearson",
    "summarize",
    "HoldoutSplit",
    "make_holdout_split",
    "merge_split",
    "DpgpModel",
    "LcmmModel",
    "OracleModel",
    "TrialReport",
    "run_trials",
    "ComparisonTable",
    "compare_models",
    "write_figure_csv",
]
