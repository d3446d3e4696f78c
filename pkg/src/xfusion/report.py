"""Experiment reports: a delimited metric table plus a structured summary.

The CSV carries one row per (subset, metric) with subsets spelled as
`+`-joined canonical modality ids. Written artifacts are byte-deterministic
for identical runs; wall time is runtime-only and never serialized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["ReportRow", "ExperimentReport", "read_report_csv"]

CSV_HEADER = ("task", "subset", "metric", "value")


@dataclass(frozen=True)
class ReportRow:
    task: str
    subset: str
    metric: str
    value: float


@dataclass
class ExperimentReport:
    rows: list[ReportRow]
    seed: int
    preset: str
    variant: str
    config_digest: str
    wall_time: float | None = None  # transient; excluded from files

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            key = (row.subset, row.metric)
            if key in seen:
                raise ValueError(f"duplicate report row for {key}")
            seen.add(key)

    def value(self, subset: str, metric: str) -> float:
        for row in self.rows:
            if row.subset == subset and row.metric == metric:
                return row.value
        raise KeyError(f"no report row for subset '{subset}', metric '{metric}'")

    def subsets(self) -> list[str]:
        ordered = []
        for row in self.rows:
            if row.subset not in ordered:
                ordered.append(row.subset)
        return ordered

    def metrics(self) -> list[str]:
        ordered = []
        for row in self.rows:
            if row.metric not in ordered:
                ordered.append(row.metric)
        return ordered

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in self.rows:
                writer.writerow([row.task, row.subset, row.metric, repr(row.value)])

    def write_summary(self, path) -> None:
        lines = [
            "[run]",
            f"preset = {self.preset}",
            f"variant = {self.variant}",
            f"seed = {self.seed}",
            f"config_digest = {self.config_digest}",
            f"task = {self.rows[0].task if self.rows else 'none'}",
            f"subsets = {len(self.subsets())}",
            f"metrics = {','.join(self.metrics())}",
            f"rows = {len(self.rows)}",
            "",
        ]
        Path(path).write_text("\n".join(lines), encoding="utf-8")


def read_report_csv(path) -> list[ReportRow]:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected report header {header}")
        for task, subset, metric, value in reader:
            rows.append(ReportRow(task=task, subset=subset, metric=metric, value=float(value)))
    return rows
