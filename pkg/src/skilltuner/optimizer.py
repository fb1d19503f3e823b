"""The training loop: scheduling, stage sequencing, checkpoints, costs.

Each iteration runs execute -> evidence -> diagnose -> momentum -> patch,
persists every stage artifact before advancing, and never selects
checkpoints by validation: the final skill is the last iteration's
snapshot. Failed stages degrade (skipped item, identity patch) instead of
aborting, so the iteration budget is always spent.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path

from skilltuner.diagnosis import (
    DiagnosisSet,
    diagnose_batch,
    load_diagnoses,
    save_diagnoses,
)
from skilltuner.errors import (
    BatchDiagnosisFailureError,
    ConfigError,
    CorruptRunDirError,
    PatchError,
    RunLockedError,
)
from skilltuner.execution import (
    BaselineStore,
    ExecutionLimits,
    LossEvidence,
    Trajectory,
    build_evidence,
    execute,
    load_trajectory,
    write_trajectory,
)
from skilltuner.momentum import (
    Overlay,
    PatternMemory,
    load_memory,
    save_memory,
    save_overlay,
    update,
)
from skilltuner.patcher import PatchSet, apply_patch, propose_patch, save_patch
from skilltuner.providers import (
    HttpConfig,
    HttpProvider,
    MockProvider,
    PriceTable,
    Provider,
    UsageLog,
    cost_of,
)
from skilltuner.skill import SkillPackage, load_package, save_package, validate
from skilltuner.tasks import (
    GridEnvironment,
    Outcome,
    Task,
    load_task_pool,
    sample_training_set,
)

logger = logging.getLogger(__name__)

STAGES = ("execution", "diagnosis", "momentum", "patch", "evaluation")


@dataclass(frozen=True)
class RunConfig:
    batch_size: int = 4
    iterations: int = 10
    max_turns: int = 30
    train_tasks: int = 40
    keep_turns: int = 6
    parallelism: int = 1
    split_seed: int = 0
    training_seed: int = 0
    momentum_enabled: bool = True
    contrastive_enabled: bool = True
    skill_dir: str = ""
    task_pool: str = ""
    baseline_dir: str = ""
    provider: dict = field(default_factory=dict)
    """Provider spec strings keyed by role tag, with a 'default' entry."""
    prices: dict | None = None
    prompts_dir: str | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")

    def limits(self) -> ExecutionLimits:
        return ExecutionLimits(self.max_turns, self.keep_turns)

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "max_turns": self.max_turns,
            "train_tasks": self.train_tasks,
            "keep_turns": self.keep_turns,
            "parallelism": self.parallelism,
            "seeds": {
                "split_seed": self.split_seed,
                "training_seed": self.training_seed,
            },
            "ablations": {
                "momentum_enabled": self.momentum_enabled,
                "contrastive_enabled": self.contrastive_enabled,
            },
            "paths": {
                "skill_dir": self.skill_dir,
                "task_pool": self.task_pool,
                "baseline_dir": self.baseline_dir,
            },
            "provider": dict(self.provider),
            "prices": self.prices,
            "prompts_dir": self.prompts_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        seeds = raw.get("seeds", {})
        ablations = raw.get("ablations", {})
        paths = raw.get("paths", {})
        return cls(
            batch_size=raw.get("batch_size", 4),
            iterations=raw.get("iterations", 10),
            max_turns=raw.get("max_turns", 30),
            train_tasks=raw.get("train_tasks", 40),
            keep_turns=raw.get("keep_turns", 6),
            parallelism=raw.get("parallelism", 1),
            split_seed=seeds.get("split_seed", 0),
            training_seed=seeds.get("training_seed", 0),
            momentum_enabled=ablations.get("momentum_enabled", True),
            contrastive_enabled=ablations.get("contrastive_enabled", True),
            skill_dir=paths.get("skill_dir", ""),
            task_pool=paths.get("task_pool", ""),
            baseline_dir=paths.get("baseline_dir", ""),
            provider=dict(raw.get("provider", {})),
            prices=raw.get("prices"),
            prompts_dir=raw.get("prompts_dir"),
        )


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


# -- providers -----------------------------------------------------------------

def build_provider(spec: str, usage_log: UsageLog | None = None) -> Provider:
    """Build one backend from a spec string: mock:<script> or http:<config>."""
    kind, _, rest = spec.partition(":")
    if kind == "mock":
        if not rest:
            raise ConfigError("mock provider needs a script path: mock:<path>")
        return MockProvider.from_file(rest, usage_log)
    if kind == "http":
        if not rest:
            raise ConfigError("http provider needs a config path: http:<path>")
        raw = json.loads(Path(rest).read_text(encoding="utf-8"))
        api_key = os.environ.get(raw.get("api_key_env", "OPENAI_API_KEY"), "")
        config = HttpConfig(
            base_url=raw["base_url"],
            model=raw["model"],
            api_key=api_key,
            temperature=raw.get("temperature", 0.0),
            max_output_tokens=raw.get("max_output_tokens"),
            retries=raw.get("retries", 3),
            backoff=raw.get("backoff", 0.5),
            timeout=raw.get("timeout", 120.0),
        )
        return HttpProvider(config, usage_log)
    raise ConfigError(f"unknown provider kind {kind!r}")


class RoleRouter:
    """Dispatches completions to per-role providers; default covers all."""

    def __init__(self, bindings: dict[str, Provider]):
        if "default" not in bindings:
            raise ConfigError("provider bindings need a 'default' entry")
        self.bindings = bindings

    def provider_for(self, role_tag: str) -> Provider:
        return self.bindings.get(role_tag, self.bindings["default"])

    def complete(self, request):
        return self.provider_for(request.role_tag).complete(request)


def build_router(provider_specs: dict, usage_log: UsageLog) -> RoleRouter:
    if "default" not in provider_specs:
        raise ConfigError("provider config needs a 'default' spec")
    built: dict[str, Provider] = {}
    bindings: dict[str, Provider] = {}
    for role, spec in provider_specs.items():
        if spec not in built:
            built[spec] = build_provider(spec, usage_log)
        bindings[role] = built[spec]
    return RoleRouter(bindings)


# -- cost ledger ----------------------------------------------------------------

@dataclass(frozen=True)
class LedgerEntry:
    iteration: int
    stage: str
    usd: Decimal


class CostLedger:
    """Per-stage, per-iteration USD entries with exact decimal arithmetic."""

    def __init__(self, entries: list[LedgerEntry] | None = None):
        self._entries: list[LedgerEntry] = list(entries or ())

    def add(self, iteration: int, stage: str, usd: Decimal) -> None:
        if usd < 0:
            raise ValueError("ledger entries must be non-negative")
        self._entries.append(LedgerEntry(iteration, stage, usd))

    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def iterations(self) -> list[int]:
        return sorted({e.iteration for e in self._entries})

    def stage_total(self, iteration: int, stage: str) -> Decimal:
        return sum(
            (e.usd for e in self._entries if e.iteration == iteration and e.stage == stage),
            Decimal(0),
        )

    def iteration_total(self, iteration: int) -> Decimal:
        return sum(
            (e.usd for e in self._entries if e.iteration == iteration), Decimal(0)
        )

    def cumulative(self) -> list[tuple[int, Decimal]]:
        running = Decimal(0)
        rows = []
        for t in self.iterations():
            running += self.iteration_total(t)
            rows.append((t, running))
        return rows

    def total(self) -> Decimal:
        return sum((e.usd for e in self._entries), Decimal(0))

    @classmethod
    def from_run_dir(cls, run_dir: Path | str) -> "CostLedger":
        run_dir = Path(run_dir)
        entries: list[LedgerEntry] = []
        for iter_dir in sorted(
            run_dir.glob("iter_*"), key=lambda p: int(p.name.split("_")[1])
        ):
            costs_path = iter_dir / "costs.json"
            if not costs_path.is_file():
                continue
            raw = json.loads(costs_path.read_text(encoding="utf-8"))
            for stage in STAGES:
                if stage in raw["stages"]:
                    entries.append(
                        LedgerEntry(raw["iteration"], stage, Decimal(raw["stages"][stage]))
                    )
        return cls(entries)


def _stage_costs(
    usage_log: UsageLog, iteration: int, prices: PriceTable | None
) -> dict[str, Decimal]:
    totals = {stage: Decimal(0) for stage in STAGES}
    for entry in usage_log.entries():
        if entry.iteration != iteration or entry.stage not in totals:
            continue
        if prices is None:
            continue
        totals[entry.stage] += cost_of(entry.usage, prices, entry.role_tag, entry.model)
    return totals


# -- run state -------------------------------------------------------------------

@dataclass
class RunState:
    run_dir: Path
    config: RunConfig
    current_iteration: int

    def iter_dir(self, t: int) -> Path:
        return self.run_dir / f"iter_{t}"

    def snapshot_dir(self, t: int) -> Path:
        if t == 0:
            return self.run_dir / "initial" / "skill"
        return self.iter_dir(t) / "skill"

    def load_snapshot(self, t: int) -> SkillPackage:
        return load_package(self.snapshot_dir(t))

    def training_task_ids(self) -> list[str]:
        raw = json.loads((self.run_dir / "state.json").read_text(encoding="utf-8"))
        return list(raw["training_task_ids"])

    def completed_iterations(self) -> list[int]:
        done = []
        t = 1
        while (self.iter_dir(t) / "costs.json").is_file() and (
            self.snapshot_dir(t) / "SKILL.md"
        ).is_file():
            done.append(t)
            t += 1
        return done

    def memory_history(self) -> list[PatternMemory]:
        history = []
        for t in self.completed_iterations():
            path = self.iter_dir(t) / "memory.json"
            if path.is_file():
                history.append(load_memory(path))
        return history

    def diagnosis_history(self) -> list[DiagnosisSet]:
        history = []
        for t in self.completed_iterations():
            path = self.iter_dir(t) / "diagnoses.json"
            if path.is_file():
                history.append(load_diagnoses(path))
        return history

    def evidence_records(self, t: int) -> list[dict]:
        return json.loads(
            (self.iter_dir(t) / "evidence.json").read_text(encoding="utf-8")
        )

    def trajectories(self, t: int) -> list[Trajectory]:
        traj_dir = self.iter_dir(t) / "trajectories"
        if not traj_dir.is_dir():
            return []
        return [load_trajectory(p) for p in sorted(traj_dir.glob("*.jsonl"))]

    def ledger(self) -> CostLedger:
        return CostLedger.from_run_dir(self.run_dir)

    @classmethod
    def load(cls, run_dir: Path | str) -> "RunState":
        run_dir = Path(run_dir)
        config_path = run_dir / "config.json"
        if not config_path.is_file():
            raise CorruptRunDirError(f"no config.json under {run_dir}")
        config = RunConfig.from_dict(
            json.loads(config_path.read_text(encoding="utf-8"))
        )
        state = cls(run_dir, config, 0)
        completed = state.completed_iterations()
        state.current_iteration = completed[-1] if completed else 0
        return state


@contextmanager
def run_lock(run_dir: Path):
    """One process per run directory, held through a lock file."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / ".lock"
    try:
        with open(lock_path, "x", encoding="utf-8") as handle:
            handle.write(str(os.getpid()))
    except FileExistsError:
        raise RunLockedError(
            f"{lock_path} exists; another process may own this run "
            "(delete the file if that process is gone)"
        )
    try:
        yield
    finally:
        lock_path.unlink(missing_ok=True)


# -- the trainer ------------------------------------------------------------------

class _Trainer:
    def __init__(
        self,
        config: RunConfig,
        run_dir: Path,
        tasks_by_id: dict[str, Task],
        schedule: list[str],
        router: RoleRouter,
        usage_log: UsageLog,
    ):
        self.config = config
        self.run_dir = run_dir
        self.tasks_by_id = tasks_by_id
        self.schedule = schedule
        self.router = router
        self.usage_log = usage_log
        self.environment = GridEnvironment()
        self.baseline = BaselineStore(run_dir / "baseline")
        self.prices = PriceTable.from_dict(config.prices) if config.prices else None
        self.prompts_dir = config.prompts_dir

    def batch_ids(self, t: int) -> list[str]:
        n = len(self.schedule)
        start = (t - 1) * self.config.batch_size
        return [self.schedule[(start + j) % n] for j in range(self.config.batch_size)]

    def _execute_one(self, skill: SkillPackage, task: Task, t: int) -> Trajectory:
        with tempfile.TemporaryDirectory(prefix="skilltuner-") as workspace:
            return execute(
                skill,
                task,
                self.router,
                self.environment,
                Path(workspace),
                self.config.limits(),
                skill_iteration=t - 1,
                prompts_dir=self.prompts_dir,
            )

    def run_iteration(
        self, t: int, skill: SkillPackage, memory_prev: PatternMemory
    ) -> tuple[SkillPackage, PatternMemory]:
        config = self.config
        iter_dir = self.run_dir / f"iter_{t}"
        (iter_dir / "trajectories").mkdir(parents=True, exist_ok=True)
        batch = [self.tasks_by_id[i] for i in self.batch_ids(t)]

        # execute
        self.usage_log.set_context(t, "execution")
        if config.parallelism > 1:
            with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
                trajectories = list(
                    pool.map(lambda task: self._execute_one(skill, task, t), batch)
                )
        else:
            trajectories = [self._execute_one(skill, task, t) for task in batch]
        for trajectory in trajectories:
            write_trajectory(
                trajectory, iter_dir / "trajectories" / f"{trajectory.task_id}.jsonl"
            )

        # evidence
        records: list[dict] = []
        diagnosable: list[tuple[Task, LossEvidence]] = []
        for task, trajectory in zip(batch, trajectories):
            success = trajectory.final_outcome.success
            if success == 1 and not config.contrastive_enabled:
                records.append({"task_id": task.id, "success": 1, "kind": None})
                continue
            evidence = build_evidence(task.id, trajectory, self.baseline)
            record = {
                "task_id": task.id,
                "success": success,
                "kind": evidence.kind,
                "feedback": evidence.feedback,
            }
            if evidence.kind == "contrastive_success":
                record["baseline_task_id"] = evidence.baseline.task_id
                record["baseline_path"] = f"baseline/{task.id}.jsonl"
            records.append(record)
            diagnosable.append((task, evidence))
        _write_json(iter_dir / "evidence.json", records)

        # diagnose
        diagnoses: DiagnosisSet | None = None
        if diagnosable:
            self.usage_log.set_context(t, "diagnosis")
            try:
                diagnoses = diagnose_batch(
                    skill,
                    diagnosable,
                    self.router,
                    t,
                    config.keep_turns,
                    self.prompts_dir,
                    config.parallelism,
                )
            except BatchDiagnosisFailureError as exc:
                logger.warning("iteration %d: %s", t, exc)
        if diagnoses is not None:
            save_diagnoses(diagnoses, iter_dir / "diagnoses.json")

        # momentum
        memory: PatternMemory
        overlay: Overlay | None = None
        if config.momentum_enabled:
            if diagnoses is not None:
                self.usage_log.set_context(t, "momentum")
                memory, overlay = update(
                    memory_prev, diagnoses, skill, self.router, self.prompts_dir
                )
            else:
                memory = PatternMemory(t, memory_prev.patterns)
                overlay = Overlay(t, ())
            save_memory(memory, iter_dir / "memory.json")
            save_overlay(overlay, iter_dir / "overlay.json")
        else:
            memory = PatternMemory(t, ())

        # patch
        self.usage_log.set_context(t, "patch")
        note = None
        if diagnoses is None:
            patch = PatchSet(t, ())
            next_skill = skill
            note = "no diagnoses; identity update"
        else:
            try:
                patch = propose_patch(
                    skill,
                    diagnoses,
                    memory if config.momentum_enabled else None,
                    overlay if config.momentum_enabled else None,
                    self.router,
                    self.prompts_dir,
                )
                next_skill = apply_patch(skill, patch)
            except PatchError as exc:
                logger.warning("iteration %d patch skipped: %s", t, exc)
                patch = PatchSet(t, ())
                next_skill = skill
                note = f"patch skipped: {exc}"
        save_patch(patch, iter_dir / "patch.json", note)
        save_package(next_skill, iter_dir / "skill")

        # costs
        stages = _stage_costs(self.usage_log, t, self.prices)
        _write_json(
            iter_dir / "costs.json",
            {"iteration": t, "stages": {s: str(stages[s]) for s in STAGES}},
        )
        return next_skill, memory

    def run_span(
        self,
        skill: SkillPackage,
        memory: PatternMemory,
        first: int,
        last: int,
    ) -> SkillPackage:
        for t in range(first, last + 1):
            skill, memory = self.run_iteration(t, skill, memory)
        final_dir = self.run_dir / "final" / "skill"
        if final_dir.parent.is_dir():
            shutil.rmtree(final_dir.parent)
        save_package(skill, final_dir)
        return skill


def _load_training_setup(config: RunConfig) -> tuple[dict[str, Task], list[Task]]:
    tasks = load_task_pool(config.task_pool)
    by_id = {t.id: t for t in tasks}
    failures_path = Path(config.baseline_dir) / "failures.json"
    if not failures_path.is_file():
        raise ConfigError(f"no failures.json under {config.baseline_dir}")
    failure_ids = json.loads(failures_path.read_text(encoding="utf-8"))
    missing = [i for i in failure_ids if i not in by_id]
    if missing:
        raise ConfigError(f"failure ids not in task pool: {', '.join(missing[:5])}")
    failure_tasks = sorted((by_id[i] for i in failure_ids), key=lambda t: t.id)
    training = sample_training_set(
        failure_tasks, config.train_tasks, config.training_seed
    )
    return by_id, training


def run(config: RunConfig, run_dir: Path | str) -> RunState:
    """Run a full training loop into a fresh run directory."""
    run_dir = Path(run_dir)
    if (run_dir / "config.json").exists():
        raise ConfigError(f"{run_dir} is already initialized; use resume")
    if config.batch_size > config.train_tasks:
        raise ConfigError("batch_size cannot exceed train_tasks")

    skill = load_package(config.skill_dir)
    violations = validate(skill)
    if violations:
        raise ConfigError(
            "initial skill is invalid: " + "; ".join(str(v) for v in violations)
        )
    by_id, training = _load_training_setup(config)

    source_store = BaselineStore(Path(config.baseline_dir) / "trajectories")
    for task in training:
        if not source_store.has(task.id):
            raise ConfigError(f"no baseline trajectory for training task {task.id}")

    with run_lock(run_dir):
        _write_json(run_dir / "config.json", config.to_dict())
        _write_json(
            run_dir / "state.json", {"training_task_ids": [t.id for t in training]}
        )
        baseline_dir = run_dir / "baseline"
        baseline_dir.mkdir(exist_ok=True)
        for task in training:
            shutil.copyfile(
                source_store.path_for(task.id), baseline_dir / f"{task.id}.jsonl"
            )
        save_package(skill, run_dir / "initial" / "skill")

        usage_log = UsageLog()
        router = build_router(config.provider, usage_log)
        trainer = _Trainer(
            config, run_dir, by_id, [t.id for t in training], router, usage_log
        )
        trainer.run_span(skill, PatternMemory.empty(0), 1, config.iterations)
    return RunState.load(run_dir)


def resume(run_dir: Path | str, extra_iterations: int) -> RunState:
    """Continue a run for extra iterations past its last completed one."""
    run_dir = Path(run_dir)
    state = RunState.load(run_dir)
    completed = state.completed_iterations()
    if not completed:
        raise CorruptRunDirError(f"{run_dir} has no completed iteration")
    last = completed[-1]
    if extra_iterations < 0:
        raise ValueError("extra_iterations must be non-negative")
    if extra_iterations == 0:
        return state

    target = last + extra_iterations
    config = replace(state.config, iterations=target)
    tasks = load_task_pool(config.task_pool)
    by_id = {t.id: t for t in tasks}
    schedule = state.training_task_ids()
    missing = [i for i in schedule if i not in by_id]
    if missing:
        raise CorruptRunDirError(
            f"training tasks missing from pool: {', '.join(missing[:5])}"
        )

    skill = state.load_snapshot(last)
    memory_path = state.iter_dir(last) / "memory.json"
    memory = load_memory(memory_path) if memory_path.is_file() else PatternMemory.empty(last)

    with run_lock(run_dir):
        _write_json(run_dir / "config.json", config.to_dict())
        usage_log = UsageLog()
        router = build_router(config.provider, usage_log)
        trainer = _Trainer(config, run_dir, by_id, schedule, router, usage_log)
        trainer.run_span(skill, memory, last + 1, target)
    return RunState.load(run_dir)


# -- evaluation ---------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    outcomes: list[tuple[str, Outcome]]
    trajectories: list[Trajectory]
    flagged: list[str]
    """Task ids whose executions hit provider failures (counted as failures)."""


def evaluate_skill(
    skill: SkillPackage,
    tasks: list[Task],
    provider,
    limits: ExecutionLimits = ExecutionLimits(),
    parallelism: int = 1,
    prompts_dir: Path | str | None = None,
    usage_log: UsageLog | None = None,
    iteration: int = 0,
) -> EvalResult:
    """Execute each task once under the skill; accuracy is the solved share."""
    if not tasks:
        raise ValueError("evaluation needs at least one task")
    if usage_log is not None:
        usage_log.set_context(iteration, "evaluation")
    environment = GridEnvironment()

    def one(task: Task) -> Trajectory:
        with tempfile.TemporaryDirectory(prefix="skilltuner-eval-") as workspace:
            return execute(
                skill,
                task,
                provider,
                environment,
                Path(workspace),
                limits,
                skill_iteration=iteration,
                prompts_dir=prompts_dir,
            )

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            trajectories = list(pool.map(one, tasks))
    else:
        trajectories = [one(task) for task in tasks]

    outcomes = [(traj.task_id, traj.final_outcome) for traj in trajectories]
    flagged = [traj.task_id for traj in trajectories if traj.error]
    successes = sum(outcome.success for _, outcome in outcomes)
    return EvalResult(successes / len(tasks), outcomes, trajectories, flagged)


def capture_baseline(
    skill: SkillPackage,
    tasks: list[Task],
    provider,
    out_dir: Path | str,
    limits: ExecutionLimits = ExecutionLimits(),
    parallelism: int = 1,
    prompts_dir: Path | str | None = None,
    usage_log: UsageLog | None = None,
    prices: PriceTable | None = None,
) -> list[str]:
    """Run the initial skill over candidate tasks and persist the failure pool.

    Writes outcomes.json, failures.json, and trajectories/<task>.jsonl for
    every failed task (the stored initial failures that later pair with
    training successes). Returns the failure ids.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if usage_log is None:
        usage_log = UsageLog()
    usage_log.set_context(0, "execution")
    result = evaluate_skill(
        skill, tasks, provider, limits, parallelism, prompts_dir
    )
    store = BaselineStore(out_dir / "trajectories")
    failures = []
    outcomes_payload = []
    for trajectory in result.trajectories:
        outcome = trajectory.final_outcome
        outcomes_payload.append(
            {"task_id": trajectory.task_id, "success": outcome.success}
        )
        if outcome.success == 0:
            failures.append(trajectory.task_id)
            store.save(trajectory)
    failures.sort()
    outcomes_payload.sort(key=lambda r: r["task_id"])
    _write_json(out_dir / "outcomes.json", outcomes_payload)
    _write_json(out_dir / "failures.json", failures)
    stages = _stage_costs(usage_log, 0, prices)
    _write_json(
        out_dir / "costs.json",
        {"iteration": 0, "stages": {s: str(stages[s]) for s in STAGES}},
    )
    return failures
