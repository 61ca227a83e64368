import math
from typing import Sequence

import numpy as np

from traj_pipeline.core.errors import ZeroVariance


def _pair(preds: Sequence[float], truths: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.shape != t.shape or p.ndim != 1 or len(p) == 0:
        raise ValueError(f"need two non-empty vectors of equal length, got {p.shape} and {t.shape}")
    return p, t


def rmse(preds: Sequence[float], truths: Sequence[float]) -> float:
    """Root mean squared error."""
    p, t = _pair(preds, truths)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def pearson(preds: Sequence[float], truths: Sequence[float]) -> float:
    """
    Sample Pearson correlation, clipped to [-1, 1].

    Raises:
        ZeroVariance: If either vector is constant
    """
    p, t = _pair(preds, truths)
    dp = p - p.mean()
    dt = t - t.mean()
    sp = math.sqrt(float(dp @ dp))
    st = math.sqrt(float(dt @ dt))
    if sp == 0 or st == 0:
        raise ZeroVariance("correlation undefined for a constant vector")
    return max(-1.0, min(1.0, float(dp @ dt) / (sp * st)))


def summarize(values: Sequence[float | None]) -> dict[str, float | int | None]:
    """Mean, median and quartiles over the non-missing values."""
    x = np.array([v for v in values if v is not None and math.isfinite(v)], dtype=float)
    if len(x) == 0:
        return {"n": 0, "mean": None, "median": None, "q1": None, "q3": None}
    q1, median, q3 = np.percentile(x, [25, 50, 75])
    return {"n": int(len(x)), "mean": float(x.mean()), "median": float(median), "q1": float(q1), "q3": float(q3)}
