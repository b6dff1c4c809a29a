"""Evaluation, diagnostics, repeated experiments and CSV reporting."""
from .evaluation import HeterogeneityReport, empirical_heterogeneity, evaluate, evaluate_splits, row_logits, score
from .history import (
    CIUnavailableError,
    ExperimentSummary,
    RoundRecord,
    TrainingHistory,
    read_history,
    read_summary,
    write_metrics,
)

__all__ = [
    "HeterogeneityReport", "empirical_heterogeneity", "evaluate", "evaluate_splits", "row_logits", "score",
    "CIUnavailableError", "ExperimentSummary", "RoundRecord", "TrainingHistory",
    "read_history", "read_summary", "write_metrics",
]
