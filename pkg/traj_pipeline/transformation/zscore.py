import logging
from enum import Enum

import numpy as np
from scipy import stats

from traj_pipeline.core.errors import DegenerateColumn
from traj_pipeline.ingestion.schemas import Subject, TrajectoryDataset

logger = logging.getLogger(__name__)

# Tolerance for matching an observation age to a schedule age
_SCHEDULE_ATOL = 1e-9


class ZScoreMode(str, Enum):
    STANDARDIZE = "standardize"
    RANK = "rank"


def _standardize(values: np.ndarray) -> np.ndarray:
    return (values - values.mean()) / values.std(ddof=1)


def _blom(values: np.ndarray) -> np.ndarray:
    # Rank-based inverse normal transform with Blom offsets
    ranks = stats.rankdata(values)
    return stats.norm.ppf((ranks - 0.375) / (len(values) + 0.25))


def zscore_per_timepoint(
    raw: TrajectoryDataset,
    mode: ZScoreMode | str = ZScoreMode.STANDARDIZE,
) -> TrajectoryDataset:
    """
    Transform scores to z-scores across subjects separately at each schedule age.

    Args:
        raw: Dataset whose observations all sit on a shared schedule
            (``schedule_hint``, or the union of observed ages when absent)
        mode: ``standardize`` for (x − mean)/sd with the n−1 denominator,
            ``rank`` for a rank-based inverse-normal transform

    Returns:
        New dataset with the same subjects and ages and transformed values

    Raises:
        DegenerateColumn: An age has fewer than 2 observations, zero variance,
            or an observation falls off the schedule
    """
    mode = ZScoreMode(mode)
    schedule = np.asarray(raw.schedule(), dtype=float)

    # column index -> list of (subject index, observation index)
    columns: dict[int, list[tuple[int, int]]] = {j: [] for j in range(len(schedule))}
    for i, subject in enumerate(raw.subjects):
        for k, obs in enumerate(subject.observations):
            hits = np.flatnonzero(np.abs(schedule - obs.time) <= _SCHEDULE_ATOL)
            if len(hits) == 0:
                raise DegenerateColumn(
                    f"subject '{subject.id}' observed at age {obs.time!r}, which is not on the schedule"
                )
            columns[int(hits[0])].append((i, k))

    new_values = [subject.values.copy() for subject in raw.subjects]
    transform = _standardize if mode is ZScoreMode.STANDARDIZE else _blom
    for j, members in columns.items():
        if len(members) < 2:
            raise DegenerateColumn(f"age {schedule[j]!r} has {len(members)} observation(s); need at least 2")
        values = np.array([raw.subjects[i].observations[k].value for i, k in members])
        if not values.std(ddof=1) > 0:
            raise DegenerateColumn(f"age {schedule[j]!r} has zero variance")
        for (i, k), z in zip(members, transform(values)):
            new_values[i][k] = z

    subjects = [
        Subject.from_arrays(subject.id, subject.times, values)
        for subject, values in zip(raw.subjects, new_values)
    ]
    logger.info(f"Z-scored {raw.n_observations} observations at {len(schedule)} ages ({mode.value})")
    return TrajectoryDataset(subjects=subjects, schedule_hint=raw.schedule_hint)
