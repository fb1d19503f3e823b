"""Command surface: exit codes, artifacts, and the full offline workflow."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from skilltuner.cli import main
from skilltuner.skill import load_package, layer_metrics
from tests.conftest import (
    give_up_entry,
    grid_task,
    solve_entry,
    training_script,
    write_pool,
    write_script,
)

runner = CliRunner()


def invoke(*args):
    return runner.invoke(main, [str(a) for a in args])


class TestInitValidateDiff:
    def test_init_produces_valid_starter(self, tmp_path):
        result = invoke("init", tmp_path / "skill")
        assert result.exit_code == 0, result.output
        check = invoke("validate", tmp_path / "skill")
        assert check.exit_code == 0
        assert "ok" in check.output
        metrics = layer_metrics(load_package(tmp_path / "skill"))
        assert metrics.l2_lines == 40
        assert metrics.l3_files == 0

    def test_init_refuses_overwrite(self, tmp_path):
        invoke("init", tmp_path / "skill")
        result = invoke("init", tmp_path / "skill")
        assert result.exit_code == 1
        assert "error:" in result.output

    def test_validate_reports_violations(self, tmp_path):
        (tmp_path / "bad").mkdir()
        (tmp_path / "bad" / "SKILL.md").write_text("---\nname: x\n---\n", encoding="utf-8")
        result = invoke("validate", tmp_path / "bad")
        assert result.exit_code == 1
        assert "missing-header-field" in result.output
        assert "empty-body" in result.output

    def test_diff_same_dir_is_zero(self, tmp_path):
        invoke("init", tmp_path / "skill")
        result = invoke("diff", tmp_path / "skill", tmp_path / "skill")
        assert result.exit_code == 0
        assert "added=0 removed=0" in result.output

    def test_diff_counts_differences(self, tmp_path):
        invoke("init", tmp_path / "a")
        invoke("init", tmp_path / "b")
        extra = tmp_path / "b" / "references" / "new.md"
        extra.parent.mkdir(exist_ok=True)
        extra.write_text("five words of new text", encoding="utf-8")
        result = invoke("diff", tmp_path / "a", tmp_path / "b")
        assert "added=5 removed=0" in result.output


@pytest.fixture
def workflow(tmp_path):
    """Skill, 6-task pool, and scripts for the full CLI workflow."""
    invoke("init", tmp_path / "skill")
    tasks = [grid_task(f"t{i:03d}") for i in range(6)]
    write_pool(tmp_path / "pool", tasks)
    write_script(tmp_path / "baseline.json", [give_up_entry()])
    write_script(
        tmp_path / "train.json", training_script(12, solved_tasks=tasks[:2])
    )
    prices = {"default": {"prompt_per_million": "2", "completion_per_million": "8"}}
    (tmp_path / "prices.json").write_text(json.dumps(prices), encoding="utf-8")
    return tmp_path, tasks


class TestWorkflow:
    def test_baseline_train_report_resume_eval(self, workflow):
        tmp_path, tasks = workflow

        result = invoke(
            "baseline",
            "--skill", tmp_path / "skill",
            "--tasks", tmp_path / "pool",
            "--out", tmp_path / "baseline",
            "--provider", f"mock:{tmp_path / 'baseline.json'}",
        )
        assert result.exit_code == 0, result.output
        assert "6/6 failures" in result.output

        result = invoke(
            "train",
            "--skill", tmp_path / "skill",
            "--tasks", tmp_path / "pool",
            "--baseline", tmp_path / "baseline",
            "--run-dir", tmp_path / "run",
            "--provider", f"mock:{tmp_path / 'train.json'}",
            "--batch-size", 2,
            "--iterations", 3,
            "--train-tasks", 6,
            "--prices", tmp_path / "prices.json",
        )
        assert result.exit_code == 0, result.output
        assert "trained 3 iterations" in result.output
        config = json.loads((tmp_path / "run" / "config.json").read_text())
        assert config["batch_size"] == 2
        assert config["prices"]["default"]["prompt_per_million"] == "2"

        result = invoke("report", "--run-dir", tmp_path / "run")
        assert result.exit_code == 0, result.output
        assert (tmp_path / "run" / "reports" / "structure.csv").is_file()

        result = invoke("resume", "--run-dir", tmp_path / "run", "--iterations", 1)
        assert result.exit_code == 0, result.output
        assert "iteration 4" in result.output

        result = invoke(
            "eval",
            "--skill", tmp_path / "skill",
            "--tasks", tmp_path / "pool",
            "--provider", f"mock:{tmp_path / 'train.json'}",
            "--out", tmp_path / "eval.json",
        )
        assert result.exit_code == 0, result.output
        assert "accuracy: 0.3333" in result.output
        payload = json.loads((tmp_path / "eval.json").read_text())
        assert len(payload["outcomes"]) == 6

    def test_baseline_with_split(self, workflow):
        tmp_path, tasks = workflow
        result = invoke(
            "baseline",
            "--skill", tmp_path / "skill",
            "--tasks", tmp_path / "pool",
            "--out", tmp_path / "baseline",
            "--provider", f"mock:{tmp_path / 'baseline.json'}",
            "--split-sizes", "3,1,2",
            "--split-seed", 7,
        )
        assert result.exit_code == 0, result.output
        assert "3/3 failures" in result.output
        split = json.loads((tmp_path / "baseline" / "split.json").read_text())
        assert len(split["train_pool"]) == 3
        assert len(split["test"]) == 2

        eval_result = invoke(
            "eval",
            "--skill", tmp_path / "skill",
            "--tasks", tmp_path / "pool",
            "--provider", f"mock:{tmp_path / 'train.json'}",
            "--split", tmp_path / "baseline" / "split.json",
            "--subset", "test",
        )
        assert eval_result.exit_code == 0, eval_result.output
        assert "/2)" in eval_result.output

    def test_train_requires_inputs(self, tmp_path):
        result = invoke("train", "--run-dir", tmp_path / "run")
        assert result.exit_code == 1
        assert "error: --skill is required" in result.output

    def test_config_file_provides_defaults(self, workflow):
        tmp_path, _ = workflow
        invoke(
            "baseline",
            "--skill", tmp_path / "skill",
            "--tasks", tmp_path / "pool",
            "--out", tmp_path / "baseline",
            "--provider", f"mock:{tmp_path / 'baseline.json'}",
        )
        file_config = {
            "batch_size": 3,
            "iterations": 2,
            "train_tasks": 6,
            "paths": {
                "skill_dir": str(tmp_path / "skill"),
                "task_pool": str(tmp_path / "pool"),
                "baseline_dir": str(tmp_path / "baseline"),
            },
            "provider": {"default": f"mock:{tmp_path / 'train.json'}"},
        }
        (tmp_path / "config.json").write_text(json.dumps(file_config), encoding="utf-8")
        result = invoke(
            "train",
            "--config", tmp_path / "config.json",
            "--run-dir", tmp_path / "run",
            "--iterations", 1,  # flag beats file
        )
        assert result.exit_code == 0, result.output
        persisted = json.loads((tmp_path / "run" / "config.json").read_text())
        assert persisted["iterations"] == 1
        assert persisted["batch_size"] == 3

    def test_ablation_flags_persisted(self, workflow):
        tmp_path, _ = workflow
        invoke(
            "baseline",
            "--skill", tmp_path / "skill",
            "--tasks", tmp_path / "pool",
            "--out", tmp_path / "baseline",
            "--provider", f"mock:{tmp_path / 'baseline.json'}",
        )
        result = invoke(
            "train",
            "--skill", tmp_path / "skill",
            "--tasks", tmp_path / "pool",
            "--baseline", tmp_path / "baseline",
            "--run-dir", tmp_path / "run",
            "--provider", f"mock:{tmp_path / 'train.json'}",
            "--batch-size", 2,
            "--iterations", 1,
            "--train-tasks", 6,
            "--no-momentum",
            "--no-contrastive",
        )
        assert result.exit_code == 0, result.output
        persisted = json.loads((tmp_path / "run" / "config.json").read_text())
        assert persisted["ablations"] == {
            "momentum_enabled": False,
            "contrastive_enabled": False,
        }
        assert not (tmp_path / "run" / "iter_1" / "memory.json").exists()

    def test_unknown_command_rejected(self):
        result = invoke("conjure")
        assert result.exit_code != 0
