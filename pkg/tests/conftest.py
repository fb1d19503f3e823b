"""Shared fixtures: grid tasks, skill builders, and mock script helpers."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from skilltuner.momentum import slugify
from skilltuner.skill import Metadata, Resource, SkillPackage, save_package
from skilltuner.tasks import CellRange, GoldenSpec, Task, save_task


def make_header(name: str = "grid-tasks", description: str = "Handles grid tasks.") -> Metadata:
    return Metadata().with_field("name", name).with_field("description", description)


def make_skill(
    body: str = "Read the inputs, transform them, write output.json.\n",
    resources: dict[str, str] | None = None,
    name: str = "grid-tasks",
) -> SkillPackage:
    return SkillPackage(
        make_header(name),
        body,
        tuple(Resource(path, text) for path, text in sorted((resources or {}).items())),
    )


@pytest.fixture
def skill_dir(tmp_path: Path) -> Path:
    directory = tmp_path / "skill"
    save_package(make_skill(), directory)
    return directory


# -- grid tasks ----------------------------------------------------------------

def answer_for(task_id: str) -> str:
    return f"answer-{task_id}"


def grid_task(task_id: str) -> Task:
    """One-cell task: the agent must write the transformed value to r1c1."""
    golden_value = answer_for(task_id)
    input_grid = {"sheets": {"Sheet1": [[f"seed-{task_id}"]]}}
    return Task(
        id=task_id,
        instruction=(
            f"Transform the seed value in Sheet1 r1c1 of input.json into "
            f"'{golden_value}' and write the result grid."
        ),
        input_files=(("input.json", json.dumps(input_grid).encode()),),
        golden=GoldenSpec(
            (CellRange("Sheet1", 1, 1, 1, 1),),
            {("Sheet1", 1, 1): golden_value},
        ),
    )


def correct_output_text(task: Task) -> str:
    cell = task.golden.golden_grid[("Sheet1", 1, 1)]
    return json.dumps({"sheets": {"Sheet1": [[cell]]}})


def write_pool(directory: Path, tasks: list[Task]) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for task in tasks:
        save_task(task, directory / task.id)
    return directory


# -- mock scripts ----------------------------------------------------------------

def write_script(path: Path, entries: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"entries": entries}, indent=2) + "\n", encoding="utf-8")
    return path


def finish_call() -> dict:
    return {"name": "finish", "arguments": "{}"}


def write_output_call(task: Task) -> dict:
    return {
        "name": "write_file",
        "arguments": json.dumps(
            {"path": "output.json", "content": correct_output_text(task)}
        ),
    }


def solve_entry(task: Task, prompt_contains: str | None = None) -> dict:
    """Executor writes the correct grid and finishes in one turn."""
    entry = {
        "role": "executor",
        "contains": f"## Task {task.id}\n",
        "turn": 1,
        "tool_calls": [write_output_call(task), finish_call()],
    }
    if prompt_contains:
        entry["prompt_contains"] = prompt_contains
    return entry


def give_up_entry() -> dict:
    """Executor finishes immediately without writing anything."""
    return {"role": "executor", "tool_calls": [finish_call()]}


def failure_diagnoser_entry() -> dict:
    return {
        "role": "failure_diagnoser",
        "content": (
            "Missing transform step.\nThe agent finished without writing the "
            "transformed value; the skill never says to derive it."
        ),
    }


def contrastive_diagnoser_entry() -> dict:
    return {
        "role": "contrastive_diagnoser",
        "content": (
            "Transform now applied.\nThe current run derives the value before "
            "writing; keep that derivation rule explicit."
        ),
    }


def momentum_reply(summary: str, iteration: int) -> str:
    pattern: dict = {
        "summary": summary,
        "character": "operation",
        "appeared_in": [1],
        "status": "new",
    }
    key = summary
    if iteration > 1:
        pattern["id"] = slugify(summary)
        key = slugify(summary)
    payload = {
        "patterns": [pattern],
        "overlay": [{"pattern": key, "directive": "teach the transform rule"}],
    }
    return "```json\n" + json.dumps(payload, indent=2) + "\n```"


def momentum_entries(total_iterations: int, summary: str = "missing transform rule") -> list[dict]:
    """One valid carry-forward reply per iteration, keyed by iteration line."""
    return [
        {
            "role": "momentum",
            "contains": f"Current iteration: {t}\n",
            "turn": 1,
            "content": momentum_reply(summary, t),
        }
        for t in range(1, total_iterations + 1)
    ]


def identity_patcher_entry() -> dict:
    return {"role": "patcher", "content": '```json\n{"edits": []}\n```'}


def patcher_entry_at(iteration: int, edits: list[dict]) -> dict:
    return {
        "role": "patcher",
        "contains": f"\nIteration: {iteration}\n",
        "turn": 1,
        "content": "```json\n" + json.dumps({"edits": edits}, indent=2) + "\n```",
    }


def training_script(
    iterations: int,
    solved_tasks: list[Task] = (),
    momentum: bool = True,
    extra_entries: list[dict] = (),
) -> list[dict]:
    """Standard offline script: solve listed tasks, give up on the rest."""
    entries: list[dict] = list(extra_entries)
    entries.extend(solve_entry(task) for task in solved_tasks)
    entries.append(give_up_entry())
    entries.append(failure_diagnoser_entry())
    entries.append(contrastive_diagnoser_entry())
    if momentum:
        entries.extend(momentum_entries(iterations))
    entries.append(identity_patcher_entry())
    return entries


# -- misc ------------------------------------------------------------------------

def read_tree(root: Path) -> dict[str, bytes]:
    """Every file under root keyed by relative path, for tree equality."""
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }
