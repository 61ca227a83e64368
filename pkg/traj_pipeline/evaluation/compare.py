import logging
import math
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
from pydantic import BaseModel

from traj_pipeline.evaluation.metrics import summarize
from traj_pipeline.evaluation.trials import TrialReport, mean_fit_seconds

logger = logging.getLogger(__name__)

FIGURE_COLUMNS = ["model", "metric", "q1", "median", "q3", "mean"]


class ComparisonRow(BaseModel):
    model: str
    n_trials: int
    n_failed: int
    rmse: dict
    correlation: dict
    mean_fit_seconds: Optional[float]


class ComparisonTable(BaseModel):
    rows: list[ComparisonRow]


def compare_models(reports: Sequence[TrialReport]) -> ComparisonTable:
    """
    Side-by-side quartile summary of several models' trial reports.

    Args:
        reports: At least two TrialReports

    Returns:
        ComparisonTable with one row per report, in input order
    """
    if len(reports) < 2:
        raise ValueError(f"need at least 2 reports to compare, got {len(reports)}")
    rows = []
    for report in reports:
        seconds = mean_fit_seconds(report)
        rows.append(ComparisonRow(
            model=report.model,
            n_trials=report.n_trials,
            n_failed=len(report.failed),
            rmse=summarize(report.rmse),
            correlation=summarize(report.correlation),
            mean_fit_seconds=None if math.isnan(seconds) else seconds,
        ))
    logger.info(f"Compared {len(rows)} models: {', '.join(r.model for r in rows)}")
    return ComparisonTable(rows=rows)


def write_figure_csv(table: ComparisonTable, path: str | Path) -> None:
    """Write boxplot quantiles per model and metric (``model,metric,q1,median,q3,mean``)."""
    records = [
        (row.model, metric, stats["q1"], stats["median"], stats["q3"], stats["mean"])
        for row in table.rows
        for metric, stats in (("rmse", row.rmse), ("correlation", row.correlation))
    ]
    frame = pd.DataFrame(records, columns=FIGURE_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Wrote figure data for {len(table.rows)} models to {path}")
