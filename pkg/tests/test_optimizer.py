"""Training loop behavior: scheduling, artifacts, ablations, resume, costs."""

from __future__ import annotations

import json
from decimal import Decimal
from pathlib import Path

import pytest

from skilltuner.errors import ConfigError, CorruptRunDirError, RunLockedError
from skilltuner.optimizer import (
    CostLedger,
    RunConfig,
    RunState,
    build_router,
    capture_baseline,
    evaluate_skill,
    resume,
    run,
)
from skilltuner.providers import MockProvider, UsageLog
from skilltuner.skill import load_package, save_package
from skilltuner.tasks import load_task_pool
from tests.conftest import (
    give_up_entry,
    grid_task,
    make_skill,
    read_tree,
    solve_entry,
    training_script,
    write_pool,
    write_script,
)

PRICES = {
    "default": {"prompt_per_million": "2", "completion_per_million": "8"},
}


def prepare_run(
    tmp_path: Path,
    n_tasks: int = 8,
    iterations: int = 4,
    batch_size: int = 2,
    solved_ids: list[str] = (),
    momentum: bool = True,
    contrastive: bool = True,
    prices: dict | None = None,
    extra_entries: list[dict] = (),
) -> RunConfig:
    """Build skill/pool/baseline/script fixtures and return a ready config."""
    skill_dir = tmp_path / "skill"
    save_package(make_skill(), skill_dir)
    tasks = [grid_task(f"t{i:03d}") for i in range(n_tasks)]
    pool_dir = write_pool(tmp_path / "pool", tasks)

    baseline_script = write_script(tmp_path / "baseline_script.json", [give_up_entry()])
    baseline_dir = tmp_path / "baseline"
    capture_baseline(
        load_package(skill_dir),
        tasks,
        MockProvider.from_file(baseline_script),
        baseline_dir,
    )

    solved = [t for t in tasks if t.id in set(solved_ids)]
    script = write_script(
        tmp_path / "train_script.json",
        training_script(
            iterations + 8, solved, momentum=momentum, extra_entries=list(extra_entries)
        ),
    )
    return RunConfig(
        batch_size=batch_size,
        iterations=iterations,
        train_tasks=n_tasks,
        skill_dir=str(skill_dir),
        task_pool=str(pool_dir),
        baseline_dir=str(baseline_dir),
        momentum_enabled=momentum,
        contrastive_enabled=contrastive,
        provider={"default": f"mock:{script}"},
        prices=prices,
    )


def executed_ids(state: RunState) -> list[str]:
    ids = []
    for t in state.completed_iterations():
        for trajectory in state.trajectories(t):
            ids.append(trajectory.task_id)
    return ids


class TestRun:
    def test_one_pass_coverage(self, tmp_path):
        config = prepare_run(tmp_path, n_tasks=8, iterations=4, batch_size=2)
        state = run(config, tmp_path / "run")
        ids = executed_ids(state)
        assert len(ids) == 8
        assert sorted(ids) == sorted(f"t{i:03d}" for i in range(8))
        assert state.completed_iterations() == [1, 2, 3, 4]
        assert (tmp_path / "run" / "final" / "skill" / "SKILL.md").is_file()

    def test_wraparound_repeats_after_first_pass(self, tmp_path):
        config = prepare_run(tmp_path, n_tasks=4, iterations=4, batch_size=3)
        state = run(config, tmp_path / "run")
        ids = executed_ids(state)
        assert len(ids) == 12
        counts = {i: ids.count(i) for i in set(ids)}
        assert set(counts.values()) == {3}

    def test_identity_run_keeps_skill(self, tmp_path):
        config = prepare_run(tmp_path, iterations=2)
        state = run(config, tmp_path / "run")
        assert read_tree(state.snapshot_dir(0)) == read_tree(state.snapshot_dir(2))
        assert read_tree(state.snapshot_dir(0)) == read_tree(
            tmp_path / "run" / "final" / "skill"
        )

    def test_stage_artifacts_written_per_iteration(self, tmp_path):
        config = prepare_run(tmp_path, iterations=2)
        state = run(config, tmp_path / "run")
        for t in (1, 2):
            iter_dir = state.iter_dir(t)
            for name in (
                "evidence.json",
                "diagnoses.json",
                "memory.json",
                "overlay.json",
                "patch.json",
                "costs.json",
            ):
                assert (iter_dir / name).is_file(), f"iter {t} missing {name}"
            assert (iter_dir / "skill" / "SKILL.md").is_file()

    def test_fresh_dir_required(self, tmp_path):
        config = prepare_run(tmp_path, iterations=1)
        run(config, tmp_path / "run")
        with pytest.raises(ConfigError, match="already initialized"):
            run(config, tmp_path / "run")

    def test_lock_blocks_concurrent_use(self, tmp_path):
        config = prepare_run(tmp_path, iterations=1)
        run_dir = tmp_path / "run"
        run_dir.mkdir()
        (run_dir / ".lock").write_text("12345")
        with pytest.raises(RunLockedError):
            run(config, run_dir)

    def test_batch_bigger_than_pool_rejected(self, tmp_path):
        config = prepare_run(tmp_path, n_tasks=2, batch_size=3)
        with pytest.raises(ConfigError, match="batch_size"):
            run(config, tmp_path / "run")

    def test_baseline_trajectories_copied(self, tmp_path):
        config = prepare_run(tmp_path, n_tasks=4, iterations=1, batch_size=2)
        state = run(config, tmp_path / "run")
        copied = sorted(p.name for p in (state.run_dir / "baseline").glob("*.jsonl"))
        assert copied == [f"{i}.jsonl" for i in sorted(state.training_task_ids())]


class TestEvidenceRecords:
    def test_branches_match_outcomes(self, tmp_path):
        solved = ["t000", "t002"]
        config = prepare_run(
            tmp_path, n_tasks=4, iterations=2, batch_size=2, solved_ids=solved
        )
        state = run(config, tmp_path / "run")
        seen = 0
        for t in state.completed_iterations():
            for record in state.evidence_records(t):
                seen += 1
                if record["success"] == 0:
                    assert record["kind"] == "failed"
                else:
                    assert record["kind"] == "contrastive_success"
                    assert record["baseline_task_id"] == record["task_id"]
        assert seen == 4

    def test_contrastive_disabled_drops_successes(self, tmp_path):
        solved = ["t000", "t002"]
        config = prepare_run(
            tmp_path,
            n_tasks=4,
            iterations=2,
            batch_size=2,
            solved_ids=solved,
            contrastive=False,
        )
        state = run(config, tmp_path / "run")
        kinds = [
            record["kind"]
            for t in state.completed_iterations()
            for record in state.evidence_records(t)
        ]
        assert "contrastive_success" not in kinds
        assert kinds.count(None) == 2
        for diagnoses in state.diagnosis_history():
            assert all(d.kind == "failure" for d in diagnoses.items)


class TestAblationArtifacts:
    def test_momentum_disabled_writes_no_memory(self, tmp_path):
        config = prepare_run(tmp_path, iterations=2, momentum=False)
        state = run(config, tmp_path / "run")
        assert list(state.run_dir.rglob("memory.json")) == []
        assert list(state.run_dir.rglob("overlay.json")) == []

    def test_momentum_enabled_chains_iterations(self, tmp_path):
        config = prepare_run(tmp_path, iterations=3)
        state = run(config, tmp_path / "run")
        history = state.memory_history()
        assert [m.iteration for m in history] == [1, 2, 3]
        assert all(len(m.patterns) == 1 for m in history)


class TestLedger:
    def test_costs_recorded_per_stage(self, tmp_path):
        config = prepare_run(tmp_path, iterations=2, prices=PRICES)
        state = run(config, tmp_path / "run")
        ledger = state.ledger()
        assert ledger.total() > 0
        for t in (1, 2):
            assert ledger.stage_total(t, "execution") > 0
            assert ledger.stage_total(t, "diagnosis") > 0
            assert ledger.stage_total(t, "patch") > 0

    def test_cumulative_is_prefix_sums(self, tmp_path):
        config = prepare_run(tmp_path, iterations=3, prices=PRICES)
        state = run(config, tmp_path / "run")
        ledger = state.ledger()
        running = Decimal(0)
        for t, cumulative in ledger.cumulative():
            running += ledger.iteration_total(t)
            assert cumulative == running

    def test_ledger_direct_example(self):
        ledger = CostLedger()
        ledger.add(1, "execution", Decimal("0.2"))
        ledger.add(2, "execution", Decimal("0.3"))
        ledger.add(3, "patch", Decimal("0.5"))
        assert [c for _, c in ledger.cumulative()] == [
            Decimal("0.2"),
            Decimal("0.5"),
            Decimal("1.0"),
        ]

    def test_no_prices_means_zero_cost(self, tmp_path):
        config = prepare_run(tmp_path, iterations=1)
        state = run(config, tmp_path / "run")
        assert state.ledger().total() == 0


class TestDeterminism:
    def test_two_runs_byte_identical(self, tmp_path):
        config = prepare_run(tmp_path, iterations=3, prices=PRICES, solved_ids=["t001"])
        run(config, tmp_path / "run_a")
        run(config, tmp_path / "run_b")
        assert read_tree(tmp_path / "run_a") == read_tree(tmp_path / "run_b")


class TestResume:
    def test_resume_matches_uninterrupted_run(self, tmp_path):
        config = prepare_run(tmp_path, iterations=4, prices=PRICES)
        run(config, tmp_path / "full")

        short = RunConfig.from_dict({**config.to_dict(), "iterations": 2})
        run(short, tmp_path / "resumed")
        state = resume(tmp_path / "resumed", 2)
        assert state.current_iteration == 4
        assert read_tree(tmp_path / "resumed") == read_tree(tmp_path / "full")

    def test_resume_zero_is_noop(self, tmp_path):
        config = prepare_run(tmp_path, iterations=2)
        run(config, tmp_path / "run")
        before = read_tree(tmp_path / "run")
        state = resume(tmp_path / "run", 0)
        assert state.current_iteration == 2
        assert read_tree(tmp_path / "run") == before

    def test_resume_empty_dir_is_corrupt(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(CorruptRunDirError):
            resume(tmp_path / "empty", 1)

    def test_resume_without_iterations_is_corrupt(self, tmp_path):
        config = prepare_run(tmp_path, iterations=1)
        run_dir = tmp_path / "broken"
        run_dir.mkdir()
        (run_dir / "config.json").write_text(
            json.dumps(config.to_dict()), encoding="utf-8"
        )
        with pytest.raises(CorruptRunDirError, match="no completed iteration"):
            resume(run_dir, 1)


class TestEvaluateSkill:
    def run_eval(self, tmp_path, n_tasks, n_solved):
        tasks = [grid_task(f"e{i:03d}") for i in range(n_tasks)]
        entries = [solve_entry(t) for t in tasks[:n_solved]]
        entries.append(give_up_entry())
        script = write_script(tmp_path / "eval_script.json", entries)
        provider = MockProvider.from_file(script)
        return evaluate_skill(make_skill(), tasks, provider)

    def test_all_success(self, tmp_path):
        result = self.run_eval(tmp_path, 6, 6)
        assert result.accuracy == 1.0

    def test_partial_benchmark_share(self, tmp_path):
        result = self.run_eval(tmp_path, 120, 87)
        assert result.accuracy == pytest.approx(0.725)

    def test_empty_tasks_rejected(self):
        with pytest.raises(ValueError):
            evaluate_skill(make_skill(), [], MockProvider([]))

    def test_provider_failures_flagged_as_failures(self, tmp_path):
        tasks = [grid_task("e000"), grid_task("e001")]
        entries = [solve_entry(tasks[0])]  # nothing matches e001
        script = write_script(tmp_path / "s.json", entries)
        result = evaluate_skill(make_skill(), tasks, MockProvider.from_file(script))
        assert result.accuracy == 0.5
        assert result.flagged == ["e001"]


class TestCaptureBaseline:
    def test_mixed_outcomes_partition(self, tmp_path):
        tasks = [grid_task(f"b{i}") for i in range(4)]
        entries = [solve_entry(tasks[0]), give_up_entry()]
        provider = MockProvider.from_file(write_script(tmp_path / "s.json", entries))
        failures = capture_baseline(make_skill(), tasks, provider, tmp_path / "out")
        assert failures == ["b1", "b2", "b3"]
        outcomes = json.loads((tmp_path / "out" / "outcomes.json").read_text())
        assert {o["task_id"]: o["success"] for o in outcomes} == {
            "b0": 1,
            "b1": 0,
            "b2": 0,
            "b3": 0,
        }
        stored = sorted(p.stem for p in (tmp_path / "out" / "trajectories").glob("*.jsonl"))
        assert stored == ["b1", "b2", "b3"]


class TestRunConfig:
    def test_dict_round_trip(self):
        config = RunConfig(
            batch_size=6,
            iterations=12,
            momentum_enabled=False,
            provider={"default": "mock:x.json"},
            prices=PRICES,
            skill_dir="s",
            task_pool="p",
            baseline_dir="b",
        )
        assert RunConfig.from_dict(config.to_dict()) == config

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            RunConfig(batch_size=0)
        with pytest.raises(ValueError):
            RunConfig(iterations=0)


class TestRouter:
    def test_role_specific_binding(self, tmp_path):
        script_a = write_script(tmp_path / "a.json", [{"content": "from-a"}])
        script_b = write_script(tmp_path / "b.json", [{"content": "from-b"}])
        log = UsageLog()
        router = build_router(
            {"default": f"mock:{script_a}", "patcher": f"mock:{script_b}"}, log
        )
        from skilltuner.providers import ChatRequest, Message

        patcher_reply = router.complete(
            ChatRequest("patcher", (Message("user", "x"),))
        )
        executor_reply = router.complete(
            ChatRequest("executor", (Message("user", "x"),))
        )
        assert patcher_reply.content == "from-b"
        assert executor_reply.content == "from-a"

    def test_default_required(self):
        with pytest.raises(ConfigError):
            build_router({"executor": "mock:x"}, UsageLog())
