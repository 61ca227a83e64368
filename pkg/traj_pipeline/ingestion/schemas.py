import math
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Observation(BaseModel):
    """Schema for a single (age, score) measurement of one subject."""

    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    time: float = Field(..., ge=0, description="Age at measurement in years")
    value: float = Field(..., description="Phenotype score (z-score units after transformation)")


class Subject(BaseModel):
    """Schema for one subject's irregularly sampled trajectory."""

    model_config = ConfigDict(frozen=True)

    id: str = Field(..., min_length=1, description="Opaque subject identifier, unique within a dataset")
    observations: list[Observation] = Field(..., min_length=1, description="Observations ordered by time")

    @field_validator("observations")
    @classmethod
    def _times_strictly_increasing(cls, observations: list[Observation]) -> list[Observation]:
        for prev, cur in zip(observations, observations[1:]):
            if not cur.time > prev.time:
                raise ValueError(f"observation times must be strictly increasing ({prev.time} then {cur.time})")
        return observations

    @property
    def times(self) -> np.ndarray:
        return np.array([o.time for o in self.observations], dtype=float)

    @property
    def values(self) -> np.ndarray:
        return np.array([o.value for o in self.observations], dtype=float)

    @property
    def n_observations(self) -> int:
        return len(self.observations)

    @classmethod
    def from_arrays(cls, subject_id: str, times, values) -> "Subject":
        """Build a subject from parallel time/value sequences."""
        return cls(
            id=subject_id,
            observations=[Observation(time=float(t), value=float(v)) for t, v in zip(times, values)],
        )


class TrajectoryDataset(BaseModel):
    """Schema for a cohort of subjects; the universal input of every model."""

    model_config = ConfigDict(frozen=True)

    subjects: list[Subject] = Field(..., min_length=1, description="Subjects in cohort order")
    schedule_hint: Optional[list[float]] = Field(None, description="Nominal measurement ages in years")

    @model_validator(mode="after")
    def _ids_unique(self) -> "TrajectoryDataset":
        seen: set[str] = set()
        for subject in self.subjects:
            if subject.id in seen:
                raise ValueError(f"duplicate subject id '{subject.id}'")
            seen.add(subject.id)
        return self

    @property
    def subject_ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_observations(self) -> int:
        return sum(s.n_observations for s in self.subjects)

    def index_of(self, subject_id: str) -> int:
        """Position of ``subject_id`` in cohort order."""
        for i, subject in enumerate(self.subjects):
            if subject.id == subject_id:
                return i
        raise KeyError(subject_id)

    def get(self, subject_id: str) -> Subject:
        return self.subjects[self.index_of(subject_id)]

    def times_values(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-subject (times, values) arrays in cohort order."""
        return [(s.times, s.values) for s in self.subjects]

    def schedule(self) -> list[float]:
        """The declared schedule, or the sorted union of observed times when none was declared."""
        if self.schedule_hint is not None:
            return list(self.schedule_hint)
        return sorted({o.time for s in self.subjects for o in s.observations})


def default_mean_functions(n_clusters: int) -> list[list[float]]:
    """
    Default per-cluster mean curves as ascending polynomial coefficients over age.

    Three clusters give low-stable, rising and high-declining trajectories;
    other counts spread linear curves over [-1.5, 1.5] at age 0.
    """
    if n_clusters == 3:
        return [[-1.2, 0.0], [-2.0, 0.6], [2.0, -0.2]]
    if n_clusters == 1:
        return [[0.0, 0.0]]
    intercepts = np.linspace(-1.5, 1.5, n_clusters)
    return [[float(b), 0.3 if k % 2 == 0 else -0.3] for k, b in enumerate(intercepts)]


def default_cluster_weights(n_clusters: int) -> list[float]:
    if n_clusters == 3:
        return [0.4, 0.35, 0.25]
    return [1.0 / n_clusters] * n_clusters


class IndividualWiggle(BaseModel):
    """Per-subject smooth deviation: a squared-exponential GP draw on the schedule."""

    amplitude: float = Field(0.2, ge=0, allow_inf_nan=False, description="Standard deviation of the deviation")
    lengthscale: float = Field(2.0, gt=0, allow_inf_nan=False, description="Lengthscale in years")


class SimulationConfig(BaseModel):
    """Configuration of the synthetic cohort generator."""

    model_config = ConfigDict(allow_inf_nan=False)

    n_subjects: int = Field(95, ge=1, description="Number of subjects")
    schedule: list[float] = Field(default_factory=lambda: [1.5, 2.0, 4.0, 5.0], min_length=1,
                                  description="Measurement ages in years")
    n_clusters: int = Field(3, ge=1, description="Number of planted clusters")
    cluster_mean_functions: list[list[float]] = Field(
        ..., description="Per-cluster ascending polynomial coefficients over age"
    )
    cluster_weights: list[float] = Field(..., description="Cluster probabilities")
    individual_noise_sd: float = Field(0.25, ge=0, description="Standard deviation of iid measurement noise")
    individual_wiggle: IndividualWiggle = Field(default_factory=IndividualWiggle)
    missing_rate: float = Field(0.0, ge=0, lt=1, description="Per-observation drop probability")
    seed: int = Field(0, description="Random seed")

    @model_validator(mode="before")
    @classmethod
    def _fill_cluster_defaults(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            n_clusters = data.get("n_clusters", 3)
            if isinstance(n_clusters, int) and n_clusters >= 1:
                if data.get("cluster_mean_functions") is None:
                    data["cluster_mean_functions"] = default_mean_functions(n_clusters)
                if data.get("cluster_weights") is None:
                    data["cluster_weights"] = default_cluster_weights(n_clusters)
        return data

    @model_validator(mode="after")
    def _check_invariants(self) -> "SimulationConfig":
        if len(self.cluster_mean_functions) != self.n_clusters:
            raise ValueError(
                f"n_clusters={self.n_clusters} but {len(self.cluster_mean_functions)} mean functions given"
            )
        if len(self.cluster_weights) != self.n_clusters:
            raise ValueError(f"n_clusters={self.n_clusters} but {len(self.cluster_weights)} weights given")
        if any(len(coefs) == 0 for coefs in self.cluster_mean_functions):
            raise ValueError("every mean function needs at least one coefficient")
        if any(w < 0 for w in self.cluster_weights):
            raise ValueError("cluster weights must be non-negative")
        if abs(math.fsum(self.cluster_weights) - 1.0) > 1e-12:
            raise ValueError(f"cluster weights sum to {math.fsum(self.cluster_weights)!r}, expected 1")
        if any(t < 0 for t in self.schedule):
            raise ValueError("schedule ages must be non-negative")
        for prev, cur in zip(self.schedule, self.schedule[1:]):
            if not cur > prev:
                raise ValueError(f"schedule must be strictly increasing ({prev} then {cur})")
        return self
