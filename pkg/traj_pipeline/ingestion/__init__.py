"""
Ingestion Layer

Cohort schemas, CSV reading/writing and the synthetic cohort generator.
"""
from traj_pipeline.ingestion.schemas import (
    Observation,
    Subject,
    TrajectoryDataset,
    SimulationConfig,
    IndividualWiggle,
    default_mean_functions,
)
from traj_pipeline.ingestion.cohort_io import (
    load_csv,
    save_csv,
    load_labels,
    save_labels,
    labels_path_for,
)
from traj_pipeline.ingestion.simulator import simulate_cohort, oracle_predict

__all__ = [
    "Observation",
    "Subject",
    "TrajectoryDataset",
    "SimulationConfig",
    "IndividualWiggle",
    "default_mean_functions",
    "load_csv",
    "save_csv",
    "load_labels",
    "save_labels",
    "labels_path_for",
    "simulate_cohort",
    "oracle_predict",
]
