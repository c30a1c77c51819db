"""Run reports and their CSV form.

Floats are written with ``repr`` so ``parse_csv(emit_csv(r)) == r`` exactly.
Wall-clock timings live in a separate table (``timing.csv``) so the metric
report of a fixed config and seed is byte-identical across runs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, field, fields

from ..errors import FormatError
from ..models import atomic_write


@dataclass(frozen=True)
class ReportRow:
    run_id: str
    kind: str  # "epoch" or "summary"
    seed: int
    epoch: int
    lr: float
    loss_ce: float
    loss_ins: float
    loss_cla: float
    loss_cc: float
    loss_feat: float
    train_acc: float
    test_top1: float
    test_topk: float


@dataclass(frozen=True)
class TimingRow:
    run_id: str
    seed: int
    epoch: int
    seconds: float
    seconds_per_batch: float


@dataclass
class RunReport:
    rows: list[ReportRow] = field(default_factory=list)
    timings: list[TimingRow] = field(default_factory=list)

    def extend(self, other: RunReport) -> None:
        self.rows.extend(other.rows)
        self.timings.extend(other.timings)

    def epochs(self, run_id: str | None = None) -> list[ReportRow]:
        return [r for r in self.rows if r.kind == "epoch" and (run_id is None or r.run_id == run_id)]

    def summaries(self, run_id: str | None = None) -> list[ReportRow]:
        return [r for r in self.rows if r.kind == "summary" and (run_id is None or r.run_id == run_id)]

    def best_top1(self, run_id: str | None = None) -> dict[int, float]:
        return {r.seed: r.test_top1 for r in self.summaries(run_id)}


REPORT_COLUMNS = tuple(f.name for f in fields(ReportRow))
TIMING_COLUMNS = tuple(f.name for f in fields(TimingRow))


def _fmt(v) -> str:
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError(f"non-finite value {v} in report")
        return repr(v)
    if isinstance(v, str) and any(ord(c) < 32 and c != "\t" for c in v):
        raise ValueError(f"control character in report field {v!r}")
    return str(v)


def _emit(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in astuple(row)])
    return buf.getvalue()


def emit_csv(report: RunReport) -> str:
    return _emit(REPORT_COLUMNS, report.rows)


def emit_timing_csv(report: RunReport) -> str:
    return _emit(TIMING_COLUMNS, report.timings)


def _parse(text: str, cls, columns):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty CSV") from None
    if tuple(header) != columns:
        raise FormatError(f"unexpected CSV header {header}")
    types = [f.type for f in fields(cls)]
    out = []
    for lineno, rec in enumerate(reader, start=2):
        if len(rec) != len(columns):
            raise FormatError(f"line {lineno}: expected {len(columns)} fields, got {len(rec)}")
        vals = []
        for name, t, raw in zip(columns, types, rec):
            try:
                vals.append(int(raw) if t == "int" else float(raw) if t == "float" else raw)
            except ValueError:
                raise FormatError(f"line {lineno}: bad {name} value {raw!r}") from None
        out.append(cls(*vals))
    return out


def parse_csv(text: str, timing_text: str | None = None) -> RunReport:
    rows = _parse(text, ReportRow, REPORT_COLUMNS)
    timings = _parse(timing_text, TimingRow, TIMING_COLUMNS) if timing_text else []
    return RunReport(rows, timings)


def write_report(report: RunReport, path, timing_path=None) -> None:
    atomic_write(path, emit_csv(report).encode("utf-8"))
    if timing_path is not None:
        atomic_write(timing_path, emit_timing_csv(report).encode("utf-8"))
