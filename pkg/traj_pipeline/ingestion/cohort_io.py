"""
Cohort CSV Service

Long-format cohort files (``subject_id,age_years,value``) and simulator
label files (``subject_id,cluster``). Floats are written with 17 significant
digits so a save/load round trip is exact.
"""
import logging
import math
import re
from pathlib import Path
from typing import Optional

import pandas as pd

from traj_pipeline.core.errors import NonMonotoneTimes, ParseError
from traj_pipeline.ingestion.schemas import Observation, Subject, TrajectoryDataset

logger = logging.getLogger(__name__)

COHORT_COLUMNS = ["subject_id", "age_years", "value"]
LABEL_COLUMNS = ["subject_id", "cluster"]
FLOAT_FORMAT = "%.17g"

# pandas tokenizer errors mention the offending line as "line N"
_LINE_RE = re.compile(r"line (\d+)")


def _read_frame(path: str | Path, columns: list[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise ParseError("file is empty", line=1) from e
    except pd.errors.ParserError as e:
        m = _LINE_RE.search(str(e))
        raise ParseError(str(e), line=int(m.group(1)) if m else None) from e
    if list(frame.columns) != columns:
        raise ParseError(f"header must be exactly {','.join(columns)}, got {','.join(frame.columns)}", line=1)
    return frame


def _is_blank(row: tuple) -> bool:
    # blank lines come back as all-NaN rows whatever the NA settings
    return all(not isinstance(field, str) or field == "" for field in row)


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{column} is not a number: {text!r}", line=line) from None
    if not math.isfinite(value):
        raise ParseError(f"{column} is not finite: {text!r}", line=line)
    return value


def load_csv(path: str | Path, schedule_hint: Optional[list[float]] = None) -> TrajectoryDataset:
    """
    Load a long-format cohort CSV.

    Rows of one subject may be interleaved with other subjects' rows but must
    appear in strictly increasing age order.

    Args:
        path: CSV file with header ``subject_id,age_years,value``
        schedule_hint: Optional nominal ages to attach to the dataset

    Returns:
        TrajectoryDataset with subjects in order of first appearance

    Raises:
        ParseError: Malformed header or row (carries the 1-based line number)
        NonMonotoneTimes: A subject's ages are not strictly increasing
    """
    frame = _read_frame(path, COHORT_COLUMNS)
    if frame.empty:
        raise ParseError("no observations", line=2)

    rows: dict[str, list[Observation]] = {}
    for offset, row in enumerate(frame.itertuples(index=False, name=None)):
        line = offset + 2
        if _is_blank(row):
            raise ParseError("blank row", line=line)
        sid, age, value = row
        if not sid.strip():
            raise ParseError("empty subject_id", line=line)
        time = _parse_float(age, "age_years", line)
        if time < 0:
            raise ParseError(f"age_years must be non-negative, got {age!r}", line=line)
        obs = rows.setdefault(sid, [])
        if obs and not time > obs[-1].time:
            raise NonMonotoneTimes(sid, f"{obs[-1].time!r} then {time!r} at line {line}")
        obs.append(Observation(time=time, value=_parse_float(value, "value", line)))

    dataset = TrajectoryDataset(
        subjects=[Subject(id=sid, observations=obs) for sid, obs in rows.items()],
        schedule_hint=schedule_hint,
    )
    logger.info(f"Loaded {dataset.n_subjects} subjects, {dataset.n_observations} observations from {path}")
    return dataset


def save_csv(dataset: TrajectoryDataset, path: str | Path) -> None:
    """Write ``dataset`` as a long-format cohort CSV."""
    frame = pd.DataFrame(
        [(s.id, o.time, o.value) for s in dataset.subjects for o in s.observations],
        columns=COHORT_COLUMNS,
    )
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    logger.info(f"Wrote {len(frame)} observations to {path}")


def save_labels(labels: dict[str, int], path: str | Path) -> None:
    """Write a ``subject_id,cluster`` labels file."""
    frame = pd.DataFrame(list(labels.items()), columns=LABEL_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def load_labels(path: str | Path) -> dict[str, int]:
    """Read a ``subject_id,cluster`` labels file."""
    frame = _read_frame(path, LABEL_COLUMNS)
    labels: dict[str, int] = {}
    for offset, row in enumerate(frame.itertuples(index=False, name=None)):
        if _is_blank(row):
            raise ParseError("blank row", line=offset + 2)
        sid, cluster = row
        try:
            labels[sid] = int(cluster)
        except ValueError:
            raise ParseError(f"cluster is not an integer: {cluster!r}", line=offset + 2) from None
    return labels


def labels_path_for(cohort_path: str | Path) -> Path:
    """``cohort.csv`` -> ``cohort.labels.csv``."""
    p = Path(cohort_path)
    return p.with_name(f"{p.stem}.labels{p.suffix or '.csv'}")
