import json
import logging
import re
from pathlib import Path

from pydantic import ValidationError

from traj_pipeline.core.errors import InvalidConfig

logger = logging.getLogger(__name__)

# Comma-separated numbers: "1.5,2,4,5"
_NUMBER_LIST_RE = re.compile(r"^\s*[^,\s]+(\s*,\s*[^,\s]+)*\s*$")

# Integer ranges and lists: "1-4", "3", "2,3,5"
_INT_RANGE_RE = re.compile(r"^\s*(\d+)\s*-\s*(\d+)\s*$")

GRID_KEYS = ("latent_variance", "latent_lengthscale", "indiv_variance", "indiv_lengthscale", "nugget", "alpha")


def parse_float_list(text: str) -> list[float]:
    """Parse ``"1.5,2,4,5"`` into floats.

    Raises ``ValueError`` on empty input or non-numeric items.
    """
    if not _NUMBER_LIST_RE.match(text):
        raise ValueError(f"expected comma-separated numbers, got '{text}'")
    return [float(item) for item in text.split(",")]


def parse_schedule(text: str) -> list[float]:
    """Parse a measurement schedule; ages must be non-negative and strictly increasing."""
    schedule = parse_float_list(text)
    if any(t < 0 for t in schedule):
        raise ValueError(f"schedule ages must be non-negative, got '{text}'")
    if any(not b > a for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"schedule must be strictly increasing, got '{text}'")
    return schedule


def parse_int_list(text: str) -> list[int]:
    """Parse ``"1-4"`` or ``"2,3,5"`` into positive integers."""
    m = _INT_RANGE_RE.match(text)
    if m is not None:
        lo, hi = int(m.group(1)), int(m.group(2))
        if lo > hi:
            raise ValueError(f"empty range '{text}'")
        values = list(range(lo, hi + 1))
    else:
        try:
            values = [int(item) for item in text.split(",")]
        except ValueError:
            raise ValueError(f"expected integers like '1-4' or '2,3', got '{text}'") from None
    if any(v < 1 for v in values):
        raise ValueError(f"integers must be >= 1, got '{text}'")
    return values


def parse_cov_kinds(text: str) -> list[str]:
    """Parse ``"nc,ar,bm"`` (any case) into lower-case covariance kind names."""
    kinds = [item.strip().lower() for item in text.split(",") if item.strip()]
    unknown = [k for k in kinds if k not in ("nc", "ar", "bm")]
    if not kinds or unknown:
        raise ValueError(f"covariance kinds must be among nc, ar, bm; got '{text}'")
    return kinds


def load_json_object(path: str | Path) -> dict:
    """Read a JSON file that must hold an object."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(payload, dict):
        raise InvalidConfig(f"{path}: expected a JSON object")
    return payload


def load_grid_file(path: str | Path) -> list:
    """Load a DP-GP hyperparameter grid: a JSON array of flat hyperparameter objects.

    Returns:
        List of DpgpHyperParams in file order
    """
    from traj_pipeline.models.dpgp import DpgpHyperParams

    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(payload, list) or not payload:
        raise InvalidConfig(f"{path}: grid must be a non-empty JSON array")

    grid = []
    for i, point in enumerate(payload):
        if not isinstance(point, dict):
            raise InvalidConfig(f"{path}: grid point {i} is not an object")
        missing = [k for k in GRID_KEYS if k not in point]
        extra = [k for k in point if k not in GRID_KEYS and k != "jitter"]
        if missing or extra:
            raise InvalidConfig(f"{path}: grid point {i} missing {missing} / unknown {extra}")
        try:
            grid.append(DpgpHyperParams.from_flat(**point))
        except ValidationError as e:
            raise InvalidConfig(f"{path}: grid point {i}: {e.errors()[0]['msg']}") from e
    logger.info(f"Loaded {len(grid)} grid points from {path}")
    return grid
