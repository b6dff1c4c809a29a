"""Training records, multi-seed summaries and their CSV form."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

HISTORY_COLUMNS = ("update", "train_loss", "valid_loss", "train_acc", "valid_acc")
SUMMARY_COLUMNS = ("seed", "test_acc")
Z_95 = 1.96


class CIUnavailableError(ValueError):
    pass


@dataclass(frozen=True)
class RoundRecord:
    update: int
    train_loss: float
    valid_loss: float
    train_acc: float
    valid_acc: float


@dataclass
class TrainingHistory:
    records: list[RoundRecord] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)
    best_update: int | None = None
    best_valid_loss: float = math.nan
    best_params: Any = None
    final_params: Any = None
    test_loss: float = math.nan
    test_acc: float = math.nan

    def append(self, rec: RoundRecord) -> None:
        if self.records and rec.update <= self.records[-1].update:
            raise ValueError("update counts must increase")
        self.records.append(rec)

    def updates(self) -> list[int]:
        return [r.update for r in self.records]


@dataclass
class ExperimentSummary:
    seeds: list[int]
    test_accs: list[float]
    config: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.seeds) != len(self.test_accs):
            raise ValueError("one accuracy per seed")
        if not self.seeds:
            raise ValueError("summary needs at least one seed")

    @property
    def mean(self) -> float:
        total = 0.0
        for a in self.test_accs:
            total += a
        return total / len(self.test_accs)

    @property
    def std(self) -> float:
        n = len(self.test_accs)
        if n < 2:
            raise CIUnavailableError("sample standard deviation needs at least 2 seeds")
        if min(self.test_accs) == max(self.test_accs):
            return 0.0  # the rounded mean would leave ulp-sized deviations
        m = self.mean
        return math.sqrt(sum((a - m) ** 2 for a in self.test_accs) / (n - 1))

    @property
    def half_width(self) -> float:
        """95% normal-quantile half-width 1.96 s / sqrt(n)."""
        return Z_95 * self.std / math.sqrt(len(self.test_accs))


def fmt_float(v: float) -> str:
    return format(float(v), ".17g")


def _comment_lines(comments: dict[str, Any] | None) -> list[str]:
    return [f"# {k} = {v}\n" for k, v in (comments or {}).items()]


def write_metrics(obj, path, comments: dict[str, Any] | None = None) -> Path:
    """Write a TrainingHistory or ExperimentSummary as CSV.

    Summaries get the config echo (plus any ``comments``) as ``#`` lines
    and a trailing ``mean,<value>`` row.
    """
    path = Path(path)
    lines: list[str] = []
    if isinstance(obj, TrainingHistory):
        lines += _comment_lines(comments)
        lines.append(",".join(HISTORY_COLUMNS) + "\n")
        for r in obj.records:
            vals = [str(r.update)] + [fmt_float(getattr(r, c)) for c in HISTORY_COLUMNS[1:]]
            lines.append(",".join(vals) + "\n")
    elif isinstance(obj, ExperimentSummary):
        echo = dict(obj.config)
        echo.update(comments or {})
        if len(obj.test_accs) >= 2:
            echo["half_width"] = fmt_float(obj.half_width)
        lines += _comment_lines(echo)
        lines.append(",".join(SUMMARY_COLUMNS) + "\n")
        for s, a in zip(obj.seeds, obj.test_accs):
            lines.append(f"{s},{fmt_float(a)}\n")
        lines.append(f"mean,{fmt_float(obj.mean)}\n")
    else:
        raise TypeError(f"cannot write metrics for {type(obj).__name__}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.writelines(lines)
    except OSError as exc:
        raise OSError(f"{path}: cannot write metrics ({exc.strerror or exc})") from exc
    return path


def _split_comments(path) -> tuple[dict[str, str], list[list[str]]]:
    comments: dict[str, str] = {}
    body: list[str] = []
    try:
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, val = line[1:].partition("=")
                    comments[key.strip()] = val.strip()
                elif line.strip():
                    body.append(line)
    except OSError as exc:
        raise OSError(f"{path}: cannot read metrics ({exc.strerror or exc})") from exc
    return comments, list(csv.reader(body))


def read_history(path) -> tuple[list[RoundRecord], dict[str, str]]:
    comments, rows = _split_comments(path)
    if not rows or tuple(rows[0]) != HISTORY_COLUMNS:
        raise ValueError(f"{path}: not a history file (header {rows[0] if rows else 'missing'})")
    recs = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(HISTORY_COLUMNS):
            raise ValueError(f"{path}: row {i} has {len(row)} fields")
        recs.append(RoundRecord(int(row[0]), *(float(v) for v in row[1:])))
    return recs, comments


def read_summary(path) -> tuple[ExperimentSummary, dict[str, str]]:
    comments, rows = _split_comments(path)
    if not rows or tuple(rows[0]) != SUMMARY_COLUMNS:
        raise ValueError(f"{path}: not a summary file (header {rows[0] if rows else 'missing'})")
    seeds, accs = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ValueError(f"{path}: row {i} has {len(row)} fields")
        if row[0] == "mean":
            continue
        seeds.append(int(row[0]))
        accs.append(float(row[1]))
    return ExperimentSummary(seeds, accs), comments


def summarize(seeds: Sequence[int], accs: Sequence[float], config: dict | None = None) -> ExperimentSummary:
    return ExperimentSummary(list(seeds), [float(a) for a in accs], dict(config or {}))
