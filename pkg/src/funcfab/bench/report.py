"""Per-task reports, aggregates, and CSV emission."""

from __future__ import annotations

import csv
import os
import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Optional


class BenchAssertion(Exception):
    """An experiment invariant did not hold."""


@dataclass
class TaskRow:
    task_id: str
    submit_time: float
    terminal_time: Optional[float]
    state: str
    attempt: int
    memo_hit: bool
    batch_size: int
    service_time: float
    forwarder_time: float
    endpoint_time: float
    exec_time: float
    error_type: Optional[str] = None

    @property
    def latency(self) -> Optional[float]:
        if self.terminal_time is None:
            return None
        return self.terminal_time - self.submit_time

    @classmethod
    def from_export(cls, row: dict) -> "TaskRow":
        return cls(
            task_id=row["task_id"],
            submit_time=row["created_at"],
            terminal_time=row["terminal_at"],
            state=row["state"],
            attempt=row["attempt"],
            memo_hit=bool(row["memo_hit"]),
            batch_size=row.get("batch_size", 1),
            error_type=row.get("error_type"),
            service_time=row["service_time"],
            forwarder_time=row["forwarder_time"],
            endpoint_time=row["endpoint_time"],
            exec_time=row["exec_time"],
        )


TASK_COLUMNS = [
    "task_id",
    "submit_time",
    "terminal_time",
    "state",
    "attempt",
    "memo_hit",
    "batch_size",
    "latency_s",
    "service_time",
    "forwarder_time",
    "endpoint_time",
    "exec_time",
]

SUMMARY_COLUMNS = [
    "experiment",
    "submitted",
    "rows",
    "succeeded",
    "failed",
    "loss_count",
    "duplicate_count",
    "memo_hits",
    "max_attempt",
    "completion_s",
    "throughput_per_s",
    "p50_s",
    "p95_s",
    "p99_s",
    "mean_service_s",
    "mean_forwarder_s",
    "mean_endpoint_s",
    "mean_exec_s",
]


def percentile(values: List[float], pct: float) -> float:
    if not values:
        return float("nan")
    ordered = sorted(values)
    k = (len(ordered) - 1) * pct / 100.0
    lower = int(k)
    upper = min(lower + 1, len(ordered) - 1)
    frac = k - lower
    return ordered[lower] * (1 - frac) + ordered[upper] * frac


@dataclass
class ExperimentReport:
    name: str
    submitted: int
    rows: List[TaskRow]
    duplicate_count: int = 0
    meta: Dict = field(default_factory=dict)

    @property
    def loss_count(self) -> int:
        """Tasks that ended FAILED because they were lost in flight
        (retriable workloads must show zero)."""
        return sum(
            1 for r in self.rows if r.state == "FAILED" and r.error_type == "lost"
        )

    def aggregates(self) -> dict:
        terminal = [r for r in self.rows if r.terminal_time is not None]
        latencies = [r.latency for r in terminal]
        succeeded = sum(1 for r in self.rows if r.state == "SUCCEEDED")
        failed = sum(1 for r in self.rows if r.state == "FAILED")
        if terminal:
            completion = max(r.terminal_time for r in terminal) - min(
                r.submit_time for r in self.rows
            )
        else:
            completion = float("nan")
        out = {
            "experiment": self.name,
            "submitted": self.submitted,
            "rows": len(self.rows),
            "succeeded": succeeded,
            "failed": failed,
            "loss_count": self.loss_count,
            "duplicate_count": self.duplicate_count,
            "memo_hits": sum(1 for r in self.rows if r.memo_hit),
            "max_attempt": max((r.attempt for r in self.rows), default=0),
            "completion_s": completion,
            "throughput_per_s": (len(terminal) / completion) if completion and completion > 0 else float("nan"),
            "p50_s": percentile(latencies, 50),
            "p95_s": percentile(latencies, 95),
            "p99_s": percentile(latencies, 99),
            "mean_service_s": statistics.fmean([r.service_time for r in terminal]) if terminal else float("nan"),
            "mean_forwarder_s": statistics.fmean([r.forwarder_time for r in terminal]) if terminal else float("nan"),
            "mean_endpoint_s": statistics.fmean([r.endpoint_time for r in terminal]) if terminal else float("nan"),
            "mean_exec_s": statistics.fmean([r.exec_time for r in terminal]) if terminal else float("nan"),
        }
        return out

    def assert_conservation(self, retriable: bool = True):
        """Every submitted task has exactly one terminal row; retriable
        workloads lose nothing."""
        if len(self.rows) != self.submitted:
            raise BenchAssertion(
                "row count %d != submitted %d" % (len(self.rows), self.submitted)
            )
        non_terminal = [r.task_id for r in self.rows if r.terminal_time is None]
        if non_terminal:
            raise BenchAssertion("%d tasks never reached a terminal state" % len(non_terminal))
        if retriable:
            failed = [r.task_id for r in self.rows if r.state != "SUCCEEDED"]
            if failed:
                raise BenchAssertion(
                    "%d retriable tasks did not succeed (e.g. %s)"
                    % (len(failed), failed[:3])
                )


def emit_report(report: ExperimentReport, out_dir: str, prefix: str = ""):
    """Write tasks.csv and summary.csv; rows ordered by task_id."""
    os.makedirs(out_dir, exist_ok=True)
    tasks_path = os.path.join(out_dir, prefix + "tasks.csv")
    with open(tasks_path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(TASK_COLUMNS)
        for row in sorted(report.rows, key=lambda r: r.task_id):
            writer.writerow(
                [
                    row.task_id,
                    row.submit_time,
                    row.terminal_time,
                    row.state,
                    row.attempt,
                    int(row.memo_hit),
                    row.batch_size,
                    row.latency,
                    row.service_time,
                    row.forwarder_time,
                    row.endpoint_time,
                    row.exec_time,
                ]
            )
    summary_path = os.path.join(out_dir, prefix + "summary.csv")
    aggregates = report.aggregates()
    with open(summary_path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerow([aggregates[c] for c in SUMMARY_COLUMNS])
    return tasks_path, summary_path
