"""Operator entry point: scaffold, baseline, train, resume, eval, report."""

from __future__ import annotations

import functools
import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from skilltuner.analytics import write_reports
from skilltuner.errors import ConfigError, EngineError
from skilltuner.optimizer import (
    RunConfig,
    RunState,
    build_router,
    capture_baseline,
    evaluate_skill,
    resume as resume_run,
    run as run_training,
)
from skilltuner.execution import ExecutionLimits
from skilltuner.patcher import patch_magnitude
from skilltuner.providers import PriceTable, UsageLog
from skilltuner.skill import (
    Metadata,
    SkillPackage,
    load_package,
    save_package,
    validate,
)
from skilltuner.tasks import load_split, load_task_pool, make_split, save_split

STARTER_DESCRIPTION = (
    "Use this skill for grid-manipulation tasks: read JSON grid inputs "
    "and write the answer grid to output.json."
)

STARTER_BODY = """\
# Grid Task Processing

Use the workspace tools to read inputs and write results.

## Quick start
1. Read every input file with read_file before planning edits.
2. Parse grid JSON: {"sheets": {"Sheet1": [[...row values...]]}}.
3. Rows and columns are 1-based when the task names cells.
4. Build the full answer grid in memory before writing.
5. Write the final grid to output.json with write_file.
6. Call finish only after output.json is written.

## Reading grids
- A sheet is a list of rows; each row is a list of cell values.
- null cells are empty; do not treat them as zeros.
- Values may be strings, integers, reals, or booleans.
- Keep value types: do not stringify numbers you copy.

## Writing results
- output.json must contain a top-level "sheets" object.
- Include every sheet the task asks about, even if unchanged.
- Preserve cells outside the requested ranges when copying.
- Round nothing unless the task says to.

## Common pitfalls
- Off-by-one row indexing: the first row is row 1.
- Writing a partial grid that drops trailing empty cells.
- Forgetting finish, which wastes turns until the cap.
- Editing input files instead of writing output.json.

## Verification
- Re-read output.json after writing and compare a sample cell.
- Check the answer cells named by the task one by one.
- If a driver cell is blank, re-derive it before finishing.

## Turn budget
- Executions stop after a fixed number of turns.
- Prefer one careful write over many speculative edits.
- Do not re-read large files you have already seen.
- Stop exploring once the answer cells are known.
"""


def engine_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except EngineError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
def main():
    """Optimize three-layer agent skill packages against task pools."""


@main.command()
@click.argument("directory", type=click.Path(path_type=Path))
@click.option("--name", default="grid-tasks", help="Skill name header field.")
@click.option("--description", default=STARTER_DESCRIPTION)
@engine_errors
def init(directory: Path, name: str, description: str):
    """Scaffold a fresh starter skill package in DIRECTORY."""
    if (directory / "SKILL.md").exists():
        raise ConfigError(f"{directory} already holds a skill package")
    header = Metadata().with_field("name", name).with_field("description", description)
    save_package(SkillPackage(header, STARTER_BODY), directory)
    click.echo(f"initialized skill package at {directory}")


@main.command(name="validate")
@click.argument("skill_dir", type=click.Path(exists=True, path_type=Path))
@engine_errors
def validate_cmd(skill_dir: Path):
    """Check every package invariant; exit nonzero on violations."""
    violations = validate(load_package(skill_dir))
    for violation in violations:
        click.echo(str(violation))
    if violations:
        sys.exit(1)
    click.echo("ok")


@main.command()
@click.argument("old_dir", type=click.Path(exists=True, path_type=Path))
@click.argument("new_dir", type=click.Path(exists=True, path_type=Path))
@engine_errors
def diff(old_dir: Path, new_dir: Path):
    """Word-level diff totals between two skill directories."""
    magnitude = patch_magnitude(load_package(old_dir), load_package(new_dir))
    click.echo(f"added={magnitude.words_added} removed={magnitude.words_removed}")


def _parse_split_sizes(text: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError("--split-sizes must be train,validation,test")
    return int(parts[0]), int(parts[1]), int(parts[2])


@main.command()
@click.option("--skill", "skill_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--tasks", "task_pool", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--provider", "provider_spec", required=True, help="mock:<script> or http:<config>.")
@click.option("--max-turns", default=30, show_default=True)
@click.option("--parallelism", default=1, show_default=True)
@click.option("--prompts", "prompts_dir", type=click.Path(exists=True, path_type=Path))
@click.option("--prices", "prices_path", type=click.Path(exists=True, path_type=Path))
@click.option("--split-sizes", help="train,val,test sizes; writes split.json.")
@click.option("--split-seed", default=0, show_default=True)
@engine_errors
def baseline(
    skill_dir, task_pool, out_dir, provider_spec, max_turns, parallelism,
    prompts_dir, prices_path, split_sizes, split_seed,
):
    """Run the initial skill over candidate tasks; persist the failure pool."""
    skill = load_package(skill_dir)
    pool = load_task_pool(task_pool)
    if split_sizes:
        split = make_split(pool, _parse_split_sizes(split_sizes), split_seed)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_split(split, out_dir / "split.json")
        by_id = {t.id: t for t in pool}
        candidates = [by_id[i] for i in split.train_pool]
    else:
        candidates = pool
    if not candidates:
        raise ConfigError("no candidate tasks to baseline")
    usage_log = UsageLog()
    router = build_router({"default": provider_spec}, usage_log)
    prices = PriceTable.from_file(prices_path) if prices_path else None
    failures = capture_baseline(
        skill,
        candidates,
        router,
        out_dir,
        ExecutionLimits(max_turns),
        parallelism,
        prompts_dir,
        usage_log,
        prices,
    )
    click.echo(
        f"baseline complete: {len(failures)}/{len(candidates)} failures -> {out_dir}"
    )


def _merged_config(config_path: Path | None, **flags) -> RunConfig:
    """CLI flags > config file > built-in defaults."""
    if config_path:
        base = RunConfig.from_dict(json.loads(config_path.read_text(encoding="utf-8")))
    else:
        base = RunConfig()
    overrides = {key: value for key, value in flags.items() if value is not None}
    return replace(base, **overrides)


@main.command()
@click.option("--skill", "skill_dir", type=click.Path(path_type=Path))
@click.option("--tasks", "task_pool", type=click.Path(path_type=Path))
@click.option("--baseline", "baseline_dir", type=click.Path(path_type=Path))
@click.option("--run-dir", required=True, type=click.Path(path_type=Path))
@click.option("--provider", "provider_spec", help="mock:<script> or http:<config>.")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--batch-size", type=int)
@click.option("--iterations", type=int)
@click.option("--train-tasks", type=int)
@click.option("--max-turns", type=int)
@click.option("--keep-turns", type=int)
@click.option("--parallelism", type=int)
@click.option("--training-seed", type=int)
@click.option("--split-seed", type=int)
@click.option("--no-momentum", is_flag=True, default=False)
@click.option("--no-contrastive", is_flag=True, default=False)
@click.option("--prices", "prices_path", type=click.Path(exists=True, path_type=Path))
@click.option("--prompts", "prompts_dir", type=click.Path(exists=True, path_type=Path))
@engine_errors
def train(
    skill_dir, task_pool, baseline_dir, run_dir, provider_spec, config_path,
    batch_size, iterations, train_tasks, max_turns, keep_turns, parallelism,
    training_seed, split_seed, no_momentum, no_contrastive, prices_path,
    prompts_dir,
):
    """Run the optimization loop into --run-dir."""
    config = _merged_config(
        config_path,
        skill_dir=str(skill_dir) if skill_dir else None,
        task_pool=str(task_pool) if task_pool else None,
        baseline_dir=str(baseline_dir) if baseline_dir else None,
        batch_size=batch_size,
        iterations=iterations,
        train_tasks=train_tasks,
        max_turns=max_turns,
        keep_turns=keep_turns,
        parallelism=parallelism,
        training_seed=training_seed,
        split_seed=split_seed,
        prompts_dir=str(prompts_dir) if prompts_dir else None,
    )
    if provider_spec:
        config = replace(config, provider={"default": provider_spec})
    if no_momentum:
        config = replace(config, momentum_enabled=False)
    if no_contrastive:
        config = replace(config, contrastive_enabled=False)
    if prices_path:
        config = replace(config, prices=PriceTable.from_file(prices_path).to_dict())
    for required, label in (
        (config.skill_dir, "--skill"),
        (config.task_pool, "--tasks"),
        (config.baseline_dir, "--baseline"),
        (config.provider, "--provider"),
    ):
        if not required:
            raise ConfigError(f"{label} is required (flag or config file)")
    state = run_training(config, run_dir)
    ledger = state.ledger()
    click.echo(
        f"trained {state.current_iteration} iterations -> {run_dir} "
        f"(total cost {ledger.total()} usd)"
    )


@main.command(name="resume")
@click.option("--run-dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--iterations", "extra", required=True, type=int)
@engine_errors
def resume_cmd(run_dir: Path, extra: int):
    """Continue a run for EXTRA iterations past its last completed one."""
    state = resume_run(run_dir, extra)
    click.echo(f"run at iteration {state.current_iteration} -> {run_dir}")


@main.command(name="eval")
@click.option("--skill", "skill_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--tasks", "task_pool", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--provider", "provider_spec", required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path))
@click.option(
    "--subset",
    type=click.Choice(["train_pool", "validation", "test", "unused"]),
    default="test",
    show_default=True,
)
@click.option("--max-turns", default=30, show_default=True)
@click.option("--parallelism", default=1, show_default=True)
@click.option("--prompts", "prompts_dir", type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", type=click.Path(path_type=Path))
@engine_errors
def eval_cmd(
    skill_dir, task_pool, provider_spec, split_path, subset, max_turns,
    parallelism, prompts_dir, out_path,
):
    """Execute each task once under the skill and report accuracy."""
    skill = load_package(skill_dir)
    pool = load_task_pool(task_pool)
    if split_path:
        split = load_split(split_path)
        wanted = list(getattr(split, subset))
        by_id = {t.id: t for t in pool}
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise ConfigError(f"split ids not in pool: {', '.join(missing[:5])}")
        tasks = [by_id[i] for i in wanted]
    else:
        tasks = pool
    if not tasks:
        raise ConfigError("no tasks selected for evaluation")
    usage_log = UsageLog()
    router = build_router({"default": provider_spec}, usage_log)
    result = evaluate_skill(
        skill,
        tasks,
        router,
        ExecutionLimits(max_turns),
        parallelism,
        prompts_dir,
        usage_log,
    )
    solved = sum(outcome.success for _, outcome in result.outcomes)
    click.echo(f"accuracy: {result.accuracy:.4f} ({solved}/{len(tasks)})")
    if result.flagged:
        click.echo(f"flagged (provider failures): {', '.join(result.flagged)}")
    if out_path:
        payload = {
            "accuracy": result.accuracy,
            "outcomes": [
                {"task_id": task_id, "success": outcome.success, "feedback": outcome.feedback}
                for task_id, outcome in result.outcomes
            ],
            "flagged": result.flagged,
        }
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        click.echo(f"wrote {out_path}")


@main.command()
@click.option("--run-dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(path_type=Path))
@engine_errors
def report(run_dir: Path, out_dir: Path | None):
    """Emit plot-ready CSV tables and a combined JSON for a run."""
    state = RunState.load(run_dir)
    target = write_reports(state, out_dir)
    click.echo(f"reports -> {target}")


if __name__ == "__main__":
    main()
