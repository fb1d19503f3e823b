"""Plot-ready diagnostic tables over persisted runs.

Emits the series the optimization loop is judged by: layer sizes per
snapshot, pattern-record dynamics, patch magnitude, resource activation,
and cost curves. Output is CSV (one file per table) plus a combined JSON;
no plotting here.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

from skilltuner.errors import MissingArtifactsError
from skilltuner.execution import Trajectory
from skilltuner.momentum import derived_metrics
from skilltuner.optimizer import STAGES, RunState
from skilltuner.patcher import diff_counts, package_files
from skilltuner.skill import SkillPackage, layer_metrics

_INT_RE = re.compile(r"^-?\d+$")

CellValue = int | float | str


@dataclass(frozen=True)
class Column:
    label: str
    unit: str = ""


@dataclass(frozen=True)
class ReportTable:
    name: str
    columns: tuple[Column, ...]
    rows: tuple[tuple[CellValue, ...], ...]

    def __post_init__(self) -> None:
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError(
                    f"table {self.name}: row arity {len(row)} != "
                    f"{len(self.columns)} columns"
                )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "columns": [{"label": c.label, "unit": c.unit} for c in self.columns],
            "rows": [list(row) for row in self.rows],
        }


def _format_cell(value: CellValue) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_cell(text: str) -> CellValue:
    if _INT_RE.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text


def write_csv(table: ReportTable, path: Path | str) -> None:
    """One CSV per table; the header encodes units as ``label [unit]``."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [f"{c.label} [{c.unit}]" if c.unit else c.label for c in table.columns]
        )
        for row in table.rows:
            writer.writerow([_format_cell(v) for v in row])


def read_csv(path: Path | str, name: str | None = None) -> ReportTable:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        columns = []
        for cell in header:
            if cell.endswith("]") and " [" in cell:
                label, _, unit = cell.rpartition(" [")
                columns.append(Column(label, unit[:-1]))
            else:
                columns.append(Column(cell))
        rows = [tuple(_parse_cell(v) for v in row) for row in reader]
    return ReportTable(name or path.stem, tuple(columns), tuple(rows))


# -- resource activation ---------------------------------------------------------

@dataclass(frozen=True)
class L3ActivationStats:
    l3_files: int
    l3_reads: int
    activated_tasks: int
    total_tasks: int

    def rate(self) -> float:
        if not self.total_tasks:
            return 0.0
        return self.activated_tasks / self.total_tasks


def count_reference_reads(trajectory: Trajectory) -> int:
    return sum(
        1
        for turn in trajectory.turns
        for use in turn.tool_calls
        if use.name == "read_reference"
    )


def l3_activation(
    trajectories: list[Trajectory], skill: SkillPackage
) -> L3ActivationStats:
    """A task is activated iff its trajectory holds >= 1 read_reference call."""
    reads = [count_reference_reads(t) for t in trajectories]
    return L3ActivationStats(
        l3_files=len(skill.resources),
        l3_reads=sum(reads),
        activated_tasks=sum(1 for r in reads if r > 0),
        total_tasks=len(trajectories),
    )


# -- per-run series ----------------------------------------------------------------

def structure_series(run: RunState) -> ReportTable:
    """LayerMetrics of every snapshot, iteration 0 (initial) through the last."""
    completed = run.completed_iterations()
    if not completed and not run.snapshot_dir(0).is_dir():
        raise MissingArtifactsError("run has no snapshots")
    columns = (
        Column("iteration"),
        Column("l2_lines", "lines"),
        Column("l2_words", "words"),
        Column("l2_chars", "chars"),
        Column("l3_files", "files"),
        Column("l3_words", "words"),
        Column("l3_chars", "chars"),
    )
    rows = []
    for t in [0, *completed]:
        metrics = layer_metrics(run.load_snapshot(t))
        rows.append(
            (
                t,
                metrics.l2_lines,
                metrics.l2_words,
                metrics.l2_chars,
                metrics.l3_files,
                metrics.l3_words,
                metrics.l3_chars,
            )
        )
    return ReportTable("structure", columns, tuple(rows))


def dynamics_series(run: RunState) -> ReportTable:
    """Pattern-record dynamics; all zeros when momentum was disabled."""
    columns = (
        Column("iteration"),
        Column("cumulative", "patterns"),
        Column("new", "patterns"),
        Column("active", "patterns"),
    )
    completed = run.completed_iterations()
    if run.config.momentum_enabled:
        history = run.memory_history()
        if len(history) != len(completed):
            raise MissingArtifactsError(
                "memory artifacts missing for some completed iterations"
            )
        rows = tuple(derived_metrics(history))
    else:
        rows = tuple((t, 0, 0, 0) for t in completed)
    return ReportTable("momentum_dynamics", columns, rows)


def magnitude_series(run: RunState) -> ReportTable:
    """Word- and line-level diff totals between consecutive snapshots."""
    columns = (
        Column("iteration"),
        Column("words_added", "words"),
        Column("words_removed", "words"),
        Column("lines_added", "lines"),
        Column("lines_removed", "lines"),
    )
    rows = []
    previous = run.load_snapshot(0)
    for t in run.completed_iterations():
        current = run.load_snapshot(t)
        words_added = words_removed = lines_added = lines_removed = 0
        before, after = package_files(previous), package_files(current)
        for path in sorted(before.keys() | after.keys()):
            wa, wr = diff_counts(before.get(path, ""), after.get(path, ""))
            la, lr = diff_counts(
                before.get(path, ""), after.get(path, ""), str.splitlines
            )
            words_added += wa
            words_removed += wr
            lines_added += la
            lines_removed += lr
        rows.append((t, words_added, words_removed, lines_added, lines_removed))
        previous = current
    return ReportTable("patch_magnitude", columns, tuple(rows))


def cost_series(run: RunState) -> ReportTable:
    """Per-iteration stage costs plus a cumulative column (floats for plots)."""
    ledger = run.ledger()
    columns = (
        Column("iteration"),
        *(Column(stage, "usd") for stage in STAGES),
        Column("total", "usd"),
        Column("cumulative", "usd"),
    )
    rows = []
    running = 0.0
    for t in ledger.iterations():
        stage_values = [float(ledger.stage_total(t, stage)) for stage in STAGES]
        total = float(ledger.iteration_total(t))
        running += total
        rows.append((t, *stage_values, total, running))
    return ReportTable("cost", columns, tuple(rows))


def activation_series(run: RunState) -> ReportTable:
    """Resource activation of each iteration's training executions.

    Executions at iteration t run under the previous snapshot, so file
    counts come from snapshot t-1.
    """
    columns = (
        Column("iteration"),
        Column("l3_files", "files"),
        Column("l3_reads", "reads"),
        Column("activated_tasks", "tasks"),
        Column("total_tasks", "tasks"),
    )
    rows = []
    for t in run.completed_iterations():
        stats = l3_activation(run.trajectories(t), run.load_snapshot(t - 1))
        rows.append(
            (t, stats.l3_files, stats.l3_reads, stats.activated_tasks, stats.total_tasks)
        )
    return ReportTable("l3_activation", columns, tuple(rows))


def build_report_tables(run: RunState) -> list[ReportTable]:
    return [
        structure_series(run),
        dynamics_series(run),
        magnitude_series(run),
        cost_series(run),
        activation_series(run),
    ]


def write_reports(run: RunState, out_dir: Path | str | None = None) -> Path:
    """Emit every table as CSV plus a combined report.json; returns the dir."""
    out_dir = Path(out_dir) if out_dir else run.run_dir / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = build_report_tables(run)
    combined = {}
    for table in tables:
        write_csv(table, out_dir / f"{table.name}.csv")
        combined[table.name] = table.to_dict()
    (out_dir / "report.json").write_text(
        json.dumps(combined, indent=2) + "\n", encoding="utf-8"
    )
    return out_dir


# -- multi-seed aggregation ---------------------------------------------------------

def write_aggregate_reports(runs: list[RunState], out_dir: Path | str) -> Path:
    """Mean/std tables across several runs (e.g. training seeds)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_run = [build_report_tables(run) for run in runs]
    combined = {}
    for grouped in zip(*per_run):
        aggregate = aggregate_tables(list(grouped))
        write_csv(aggregate, out_dir / f"{aggregate.name}.csv")
        combined[aggregate.name] = aggregate.to_dict()
    (out_dir / "report.json").write_text(
        json.dumps(combined, indent=2) + "\n", encoding="utf-8"
    )
    return out_dir


def aggregate_tables(tables: list[ReportTable]) -> ReportTable:
    """Mean and population std across same-shaped tables (e.g. seeds).

    The first column keys the rows and must agree across tables.
    """
    if not tables:
        raise ValueError("nothing to aggregate")
    first = tables[0]
    for other in tables[1:]:
        if [c.label for c in other.columns] != [c.label for c in first.columns]:
            raise ValueError("tables have different columns")
        if len(other.rows) != len(first.rows):
            raise ValueError("tables have different row counts")
        if [r[0] for r in other.rows] != [r[0] for r in first.rows]:
            raise ValueError("tables have different row keys")
    columns = [first.columns[0]]
    for column in first.columns[1:]:
        columns.append(Column(f"{column.label}_mean", column.unit))
        columns.append(Column(f"{column.label}_std", column.unit))
    rows = []
    for i, key_row in enumerate(first.rows):
        row: list[CellValue] = [key_row[0]]
        for j in range(1, len(first.columns)):
            values = [float(t.rows[i][j]) for t in tables]
            mean = sum(values) / len(values)
            variance = sum((v - mean) ** 2 for v in values) / len(values)
            row.append(mean)
            row.append(math.sqrt(variance))
        rows.append(tuple(row))
    return ReportTable(f"{first.name}_aggregate", tuple(columns), tuple(rows))
