"""
Transformation Layer

Per-time-point score normalization.
"""
from traj_pipeline.transformation.zscore import ZScoreMode, zscore_per_timepoint

__all__ = [
    "ZScoreMode",
    "zscore_per_timepoint",
]
