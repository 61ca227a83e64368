import logging
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from traj_pipeline.core.errors import NotEnoughSubjects
from traj_pipeline.ingestion.schemas import Observation, Subject, TrajectoryDataset

logger = logging.getLogger(__name__)


class HoldoutSplit(BaseModel):
    """Training cohort plus the final observations hidden from it."""

    model_config = ConfigDict(frozen=True)

    train: TrajectoryDataset
    heldout: list[tuple[str, float, float]] = Field(
        default_factory=list, description="(subject id, age, true value) per held-out subject"
    )

    @model_validator(mode="after")
    def _check(self) -> "HoldoutSplit":
        seen: set[str] = set()
        for sid, time, _ in self.heldout:
            if sid in seen:
                raise ValueError(f"subject '{sid}' held out twice")
            seen.add(sid)
            if not time > self.train.get(sid).observations[-1].time:
                raise ValueError(f"held-out time of '{sid}' is not after its training times")
        return self

    @property
    def queries(self) -> list[tuple[str, float]]:
        return [(sid, time) for sid, time, _ in self.heldout]

    @property
    def truths(self) -> np.ndarray:
        return np.array([value for _, _, value in self.heldout], dtype=float)


def holdout_count(fraction: float, n_subjects: int) -> int:
    """round-half-up(fraction × n_subjects), computed in decimal so 0.30 × 95 gives 29."""
    return int((Decimal(str(fraction)) * n_subjects).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def make_holdout_split(data: TrajectoryDataset, fraction: float, rng: np.random.Generator) -> HoldoutSplit:
    """
    Hide the final observation of a random subset of subjects.

    Args:
        data: Cohort
        fraction: Share of all subjects to hold out, in [0, 1)
        rng: Random generator

    Returns:
        HoldoutSplit whose train set keeps every other observation

    Raises:
        ValueError: fraction outside [0, 1)
        NotEnoughSubjects: Fewer subjects with >= 2 observations than requested
    """
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    n_held = holdout_count(fraction, data.n_subjects)
    eligible = [i for i, s in enumerate(data.subjects) if s.n_observations >= 2]
    if len(eligible) < n_held:
        raise NotEnoughSubjects(f"need {n_held} subjects with >= 2 observations, only {len(eligible)} available")

    chosen = set(rng.choice(eligible, size=n_held, replace=False).tolist()) if n_held else set()
    subjects = []
    heldout = []
    for i, subject in enumerate(data.subjects):
        if i in chosen:
            last = subject.observations[-1]
            heldout.append((subject.id, last.time, last.value))
            subject = Subject(id=subject.id, observations=subject.observations[:-1])
        subjects.append(subject)
    logger.debug(f"Held out final points of {n_held}/{data.n_subjects} subjects")
    return HoldoutSplit(train=TrajectoryDataset(subjects=subjects, schedule_hint=data.schedule_hint), heldout=heldout)


def merge_split(split: HoldoutSplit) -> TrajectoryDataset:
    """Put the held-out points back, reconstructing the original cohort."""
    extra = {sid: Observation(time=time, value=value) for sid, time, value in split.heldout}
    subjects = [
        Subject(id=s.id, observations=[*s.observations, extra[s.id]]) if s.id in extra else s
        for s in split.train.subjects
    ]
    return TrajectoryDataset(subjects=subjects, schedule_hint=split.train.schedule_hint)
