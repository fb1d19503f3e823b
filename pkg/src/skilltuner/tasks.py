"""Task definitions, workspaces, outcome evaluation, and split protocol.

Ships a deterministic grid environment: task inputs and goldens are JSON
grids, the agent writes ``output.json``, and success requires every cell
inside every annotated answer range to match the golden grid.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from skilltuner.errors import (
    MissingOutputArtifactError,
    NotEnoughFailuresError,
    PoolTooSmallError,
    UnreadableArtifactError,
)

OUTPUT_FILENAME = "output.json"
REAL_TOLERANCE = 1e-9
FEEDBACK_CELL_CAP = 10

Cell = tuple[str, int, int]
Scalar = str | int | float | bool


@dataclass(frozen=True)
class CellRange:
    """Inclusive 1-based rectangle on one sheet."""

    sheet: str
    row_start: int
    row_end: int
    col_start: int
    col_end: int

    def cells(self) -> list[Cell]:
        return [
            (self.sheet, r, c)
            for r in range(self.row_start, self.row_end + 1)
            for c in range(self.col_start, self.col_end + 1)
        ]


@dataclass(frozen=True)
class GoldenSpec:
    answer_ranges: tuple[CellRange, ...]
    golden_grid: dict[Cell, Scalar]

    def __post_init__(self) -> None:
        if not self.answer_ranges:
            raise ValueError("golden spec needs at least one answer range")
        for rng in self.answer_ranges:
            for cell in rng.cells():
                if cell not in self.golden_grid:
                    sheet, r, c = cell
                    raise ValueError(f"no golden value for {sheet}!r{r}c{c}")


@dataclass(frozen=True)
class Task:
    id: str
    instruction: str
    input_files: tuple[tuple[str, bytes], ...]
    golden: GoldenSpec
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class Outcome:
    success: int
    feedback: str = ""

    def __post_init__(self) -> None:
        if self.success not in (0, 1):
            raise ValueError("success must be 0 or 1")
        if self.success == 0 and not self.feedback:
            raise ValueError("failures need non-empty feedback")


@dataclass(frozen=True)
class SplitSpec:
    train_pool: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    unused: tuple[str, ...]
    shuffle_seed: int


# -- grid serialization ------------------------------------------------------

def grid_to_cells(raw: dict) -> dict[Cell, Scalar]:
    """Flatten ``{"sheets": {name: [[...]]}}`` into a sparse cell map."""
    cells: dict[Cell, Scalar] = {}
    sheets = raw.get("sheets")
    if not isinstance(sheets, dict):
        raise ValueError("grid JSON must have a 'sheets' object")
    for sheet, rows in sheets.items():
        if not isinstance(rows, list):
            raise ValueError(f"sheet {sheet!r} must be a list of rows")
        for r, row in enumerate(rows, start=1):
            if not isinstance(row, list):
                raise ValueError(f"sheet {sheet!r} row {r} must be a list")
            for c, value in enumerate(row, start=1):
                if value is not None:
                    cells[(sheet, r, c)] = value
    return cells


def cells_to_grid(cells: dict[Cell, Scalar]) -> dict:
    """Densify a sparse cell map back into row-major sheet lists."""
    sheets: dict[str, list[list[Scalar | None]]] = {}
    for (sheet, r, c), value in sorted(cells.items()):
        rows = sheets.setdefault(sheet, [])
        while len(rows) < r:
            rows.append([])
        row = rows[r - 1]
        while len(row) < c:
            row.append(None)
        row[c - 1] = value
    return {"sheets": sheets}


def _values_match(golden: Scalar, got: Scalar | None) -> bool:
    if got is None:
        return False
    if isinstance(golden, bool) or isinstance(got, bool):
        return golden is got or golden == got and type(golden) is type(got)
    if isinstance(golden, (int, float)) and isinstance(got, (int, float)):
        if isinstance(golden, int) and isinstance(got, int):
            return golden == got
        return abs(float(golden) - float(got)) <= REAL_TOLERANCE
    return type(golden) is type(got) and golden == got


def evaluate(task: Task, workspace: Path | str) -> Outcome:
    """Compare the workspace output grid against the golden answer ranges.

    Pure in (task, workspace bytes): repeated calls agree. Cells outside
    the answer ranges are ignored.
    """
    out_path = Path(workspace) / OUTPUT_FILENAME
    if not out_path.is_file():
        raise MissingOutputArtifactError(f"no {OUTPUT_FILENAME} in workspace")
    try:
        produced = grid_to_cells(json.loads(out_path.read_text(encoding="utf-8")))
    except (ValueError, UnicodeDecodeError) as exc:
        raise UnreadableArtifactError(f"cannot parse {OUTPUT_FILENAME}: {exc}")

    mismatches: list[str] = []
    total = 0
    for rng in task.golden.answer_ranges:
        for cell in rng.cells():
            golden = task.golden.golden_grid[cell]
            got = produced.get(cell)
            if not _values_match(golden, got):
                total += 1
                if len(mismatches) < FEEDBACK_CELL_CAP:
                    sheet, r, c = cell
                    shown = "empty" if got is None else repr(got)
                    mismatches.append(f"{sheet}!r{r}c{c}: expected {golden!r}, got {shown}")
    if not total:
        return Outcome(1, "")
    feedback = "; ".join(mismatches)
    if total > len(mismatches):
        feedback += f" (+{total - len(mismatches)} more)"
    return Outcome(0, f"answer-range mismatches: {feedback}")


class GridEnvironment:
    """Built-in deterministic environment over JSON grids."""

    def prepare_workspace(self, task: Task, workspace: Path) -> None:
        workspace = Path(workspace)
        workspace.mkdir(parents=True, exist_ok=True)
        for rel, data in task.input_files:
            target = workspace / rel
            if not target.resolve().is_relative_to(workspace.resolve()):
                raise ValueError(f"input path escapes workspace: {rel}")
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)

    def present_task(self, task: Task) -> str:
        names = ", ".join(rel for rel, _ in task.input_files) or "(none)"
        return (
            f"## Task {task.id}\n"
            f"{task.instruction}\n\n"
            f"Workspace files: {names}\n"
            f"Write your answer grid to {OUTPUT_FILENAME}."
        )

    def evaluate(self, task: Task, workspace: Path) -> Outcome:
        return evaluate(task, workspace)


# -- split / sampling protocol -----------------------------------------------

def make_split(pool: list[Task], sizes: tuple[int, int, int], seed: int) -> SplitSpec:
    """Deterministic split: training candidates first, rest shuffled once."""
    train_n, val_n, test_n = sizes
    ids = [t.id for t in pool]
    if len(ids) < train_n + val_n + test_n:
        raise PoolTooSmallError(
            f"pool of {len(ids)} cannot cover split sizes {sizes}"
        )
    train = ids[:train_n]
    held_out = ids[train_n:]
    random.Random(seed).shuffle(held_out)
    return SplitSpec(
        train_pool=tuple(train),
        validation=tuple(held_out[:val_n]),
        test=tuple(held_out[val_n : val_n + test_n]),
        unused=tuple(held_out[val_n + test_n :]),
        shuffle_seed=seed,
    )


def sample_training_set(failures: list[Task], n: int, seed: int) -> list[Task]:
    """Draw n distinct tasks uniformly without replacement, fixed by seed."""
    if n > len(failures):
        raise NotEnoughFailuresError(
            f"need {n} training tasks but only {len(failures)} failures"
        )
    return random.Random(seed).sample(list(failures), n)


def save_split(split: SplitSpec, path: Path | str) -> None:
    payload = {
        "train_pool": list(split.train_pool),
        "validation": list(split.validation),
        "test": list(split.test),
        "unused": list(split.unused),
        "shuffle_seed": split.shuffle_seed,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_split(path: Path | str) -> SplitSpec:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return SplitSpec(
        train_pool=tuple(raw["train_pool"]),
        validation=tuple(raw["validation"]),
        test=tuple(raw["test"]),
        unused=tuple(raw["unused"]),
        shuffle_seed=raw["shuffle_seed"],
    )


# -- task directory IO -------------------------------------------------------

def _range_to_dict(rng: CellRange) -> dict:
    return {
        "sheet": rng.sheet,
        "rows": [rng.row_start, rng.row_end],
        "cols": [rng.col_start, rng.col_end],
    }


def _range_from_dict(raw: dict) -> CellRange:
    return CellRange(raw["sheet"], raw["rows"][0], raw["rows"][1], raw["cols"][0], raw["cols"][1])


def save_task(task: Task, directory: Path | str) -> None:
    """Persist one task as task.json + inputs/ + golden/golden.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "id": task.id,
        "instruction": task.instruction,
        "answer_ranges": [_range_to_dict(r) for r in task.golden.answer_ranges],
        "tags": list(task.tags),
    }
    (directory / "task.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    inputs = directory / "inputs"
    inputs.mkdir(exist_ok=True)
    for rel, data in task.input_files:
        target = inputs / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
    golden = directory / "golden"
    golden.mkdir(exist_ok=True)
    (golden / "golden.json").write_text(
        json.dumps(cells_to_grid(task.golden.golden_grid), indent=2) + "\n",
        encoding="utf-8",
    )


def load_task(directory: Path | str) -> Task:
    directory = Path(directory)
    meta = json.loads((directory / "task.json").read_text(encoding="utf-8"))
    ranges = tuple(_range_from_dict(r) for r in meta["answer_ranges"])
    golden_grid = grid_to_cells(
        json.loads((directory / "golden" / "golden.json").read_text(encoding="utf-8"))
    )
    inputs_dir = directory / "inputs"
    input_files: list[tuple[str, bytes]] = []
    if inputs_dir.is_dir():
        for path in sorted(inputs_dir.rglob("*")):
            if path.is_file():
                input_files.append(
                    (path.relative_to(inputs_dir).as_posix(), path.read_bytes())
                )
    return Task(
        id=meta["id"],
        instruction=meta["instruction"],
        input_files=tuple(input_files),
        golden=GoldenSpec(ranges, golden_grid),
        tags=tuple(meta.get("tags", ())),
    )


def load_task_pool(directory: Path | str) -> list[Task]:
    """Load every task subdirectory, sorted by task id."""
    directory = Path(directory)
    tasks = [
        load_task(sub) for sub in sorted(directory.iterdir())
        if sub.is_dir() and (sub / "task.json").is_file()
    ]
    tasks.sort(key=lambda t: t.id)
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids in pool {directory}")
    return tasks
