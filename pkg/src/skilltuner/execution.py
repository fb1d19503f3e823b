"""Tool-calling execution loop producing trajectories and loss evidence.

The executor sees the skill header and body in its system context; resource
files are delivered only through the ``read_reference`` tool. A run ends at
a ``finish`` call or at the turn cap, and the workspace is then evaluated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from skilltuner.errors import (
    EngineError,
    MissingBaselineError,
    MissingOutputArtifactError,
    UnreadableArtifactError,
    WorkspaceSetupError,
)
from skilltuner.providers import (
    ChatRequest,
    Message,
    Provider,
    ToolSchema,
    Usage,
    load_template,
    render_template,
)
from skilltuner.skill import RESOURCE_DIR, SkillPackage
from skilltuner.tasks import Outcome, Task

logger = logging.getLogger(__name__)

MAX_TOOL_RESULT_CHARS = 20_000

EXECUTOR_TOOLS = (
    ToolSchema(
        "read_reference",
        "Read one of the skill's reference files by name.",
        (("name", "reference name, e.g. mapping_shapes"),),
    ),
    ToolSchema(
        "read_file",
        "Read a file from the task workspace.",
        (("path", "workspace-relative path"),),
    ),
    ToolSchema(
        "write_file",
        "Write a file into the task workspace, replacing any existing content.",
        (("path", "workspace-relative path"), ("content", "full file content")),
    ),
    ToolSchema("finish", "Declare the task done once the answer artifact is written."),
)


@dataclass(frozen=True)
class ExecutionLimits:
    max_turns: int = 30
    keep_turns: int = 6
    """Turns kept at each end when rendering long trajectories for prompts."""

    def __post_init__(self) -> None:
        if self.max_turns < 1:
            raise ValueError("max_turns must be at least 1")


@dataclass(frozen=True)
class ToolUse:
    name: str
    arguments: str
    result: str


@dataclass(frozen=True)
class Turn:
    message: str
    tool_calls: tuple[ToolUse, ...]
    usage: Usage


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    skill_iteration: int
    turns: tuple[Turn, ...]
    final_outcome: Outcome
    truncated: int = 0
    error: str | None = None

    def total_usage(self) -> Usage:
        total = Usage()
        for turn in self.turns:
            total = total + turn.usage
        return total


@dataclass(frozen=True)
class LossEvidence:
    """Per-task evidence bundle: the failed branch or the contrastive one."""

    task_id: str
    kind: str  # "failed" | "contrastive_success"
    current: Trajectory
    feedback: str
    baseline: Trajectory | None = None

    def __post_init__(self) -> None:
        if self.kind == "failed":
            if self.current.final_outcome.success != 0:
                raise ValueError("failed evidence requires a failed current trajectory")
        elif self.kind == "contrastive_success":
            if self.current.final_outcome.success != 1:
                raise ValueError("contrastive evidence requires a current success")
            if self.baseline is None or self.baseline.final_outcome.success != 0:
                raise ValueError("contrastive evidence requires a failed baseline")
            if self.baseline.task_id != self.task_id:
                raise ValueError("baseline trajectory is for a different task")
        else:
            raise ValueError(f"unknown evidence kind {self.kind!r}")


def _resource_name(name: str) -> str:
    base = name.strip()
    if base.startswith(f"{RESOURCE_DIR}/"):
        base = base[len(RESOURCE_DIR) + 1 :]
    if base.endswith(".md"):
        base = base[:-3]
    return f"{RESOURCE_DIR}/{base}.md"


def _clip(text: str) -> str:
    if len(text) > MAX_TOOL_RESULT_CHARS:
        return text[:MAX_TOOL_RESULT_CHARS] + "\n[truncated]"
    return text


class _Toolbox:
    """Executes the four executor tools against one workspace + skill."""

    def __init__(self, skill: SkillPackage, workspace: Path):
        self.skill = skill
        self.workspace = workspace
        self.finished = False

    def run(self, name: str, arguments: str) -> str:
        try:
            args = json.loads(arguments) if arguments.strip() else {}
        except ValueError:
            return f"error: arguments for {name} are not valid JSON"
        if not isinstance(args, dict):
            return f"error: arguments for {name} must be a JSON object"
        handler = getattr(self, f"_tool_{name}", None)
        if handler is None:
            return f"error: unknown tool {name}"
        try:
            return handler(args)
        except KeyError as exc:
            return f"error: missing argument {exc} for {name}"

    def _resolve(self, rel: str) -> Path | None:
        if not rel or Path(rel).is_absolute():
            return None
        target = (self.workspace / rel).resolve()
        if not target.is_relative_to(self.workspace.resolve()):
            return None
        return target

    def _tool_read_reference(self, args: dict) -> str:
        path = _resource_name(str(args["name"]))
        text = self.skill.get_resource(path)
        if text is None:
            available = ", ".join(r.path for r in self.skill.resources) or "(none)"
            return f"error: unknown reference {args['name']!r}; available: {available}"
        return _clip(text)

    def _tool_read_file(self, args: dict) -> str:
        target = self._resolve(str(args["path"]))
        if target is None:
            return f"error: illegal path {args['path']!r}"
        if not target.is_file():
            return f"error: no such file {args['path']!r}"
        return _clip(target.read_bytes().decode("utf-8", errors="replace"))

    def _tool_write_file(self, args: dict) -> str:
        target = self._resolve(str(args["path"]))
        if target is None:
            return f"error: illegal path {args['path']!r}"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(str(args["content"]), encoding="utf-8")
        return f"wrote {args['path']}"

    def _tool_finish(self, args: dict) -> str:
        self.finished = True
        return "done"


def executor_system_message(
    skill: SkillPackage, prompts_dir: Path | str | None = None
) -> str:
    reference_list = (
        "\n".join(f"- {r.path}" for r in skill.resources) or "(none)"
    )
    return render_template(
        load_template("executor", prompts_dir),
        {
            "skill_name": skill.header.name or "(unnamed)",
            "skill_description": skill.header.description,
            "skill_body": skill.body,
            "reference_list": reference_list,
        },
    )


def _safe_evaluate(environment, task: Task, workspace: Path) -> Outcome:
    try:
        return environment.evaluate(task, workspace)
    except (MissingOutputArtifactError, UnreadableArtifactError) as exc:
        return Outcome(0, str(exc))


def execute(
    skill: SkillPackage,
    task: Task,
    provider: Provider,
    environment,
    workspace: Path,
    limits: ExecutionLimits = ExecutionLimits(),
    skill_iteration: int = 0,
    prompts_dir: Path | str | None = None,
) -> Trajectory:
    """Run one task under the skill and evaluate whatever was written.

    Provider failures do not raise: the trajectory carries an error marker
    and the workspace is still evaluated.
    """
    workspace = Path(workspace)
    try:
        environment.prepare_workspace(task, workspace)
    except OSError as exc:
        raise WorkspaceSetupError(str(exc))

    toolbox = _Toolbox(skill, workspace)
    messages = [
        Message("system", executor_system_message(skill, prompts_dir)),
        Message("user", environment.present_task(task)),
    ]
    turns: list[Turn] = []
    error: str | None = None

    while len(turns) < limits.max_turns and not toolbox.finished:
        request = ChatRequest("executor", tuple(messages), EXECUTOR_TOOLS)
        try:
            response = provider.complete(request)
        except EngineError as exc:
            error = f"provider failure at turn {len(turns) + 1}: {exc}"
            logger.warning("task %s: %s", task.id, error)
            break
        uses: list[ToolUse] = []
        for call in response.tool_calls:
            uses.append(ToolUse(call.name, call.arguments, toolbox.run(call.name, call.arguments)))
        turns.append(Turn(response.content, tuple(uses), response.usage))
        messages.append(Message("assistant", response.content))
        if uses:
            for use in uses:
                messages.append(Message("tool", f"[{use.name}] {use.result}"))
        else:
            messages.append(
                Message(
                    "user",
                    "No tool call received. Use the tools; call finish once the "
                    "answer artifact is written.",
                )
            )

    truncated = int(not toolbox.finished and error is None and len(turns) >= limits.max_turns)
    outcome = _safe_evaluate(environment, task, workspace)
    if error is not None and outcome.success == 1:
        # spend was interrupted; never count an errored run as solved
        outcome = Outcome(0, f"provider failure: {error}")
    return Trajectory(task.id, skill_iteration, tuple(turns), outcome, truncated, error)


def binary_loss(outcome: Outcome) -> int:
    """Terminal 0/1 loss: one minus the success bit."""
    return 1 - outcome.success


def render_trajectory(trajectory: Trajectory, keep_turns: int = 6) -> str:
    """Plain-text rendering for diagnosis prompts, eliding the middle."""
    lines: list[str] = []
    total = len(trajectory.turns)

    def render_turn(i: int, turn: Turn) -> None:
        lines.append(f"Turn {i}:")
        if turn.message.strip():
            lines.append(f"  assistant: {turn.message.strip()}")
        for use in turn.tool_calls:
            lines.append(f"  {use.name}({use.arguments}) -> {use.result}")

    if total <= 2 * keep_turns:
        for i, turn in enumerate(trajectory.turns, start=1):
            render_turn(i, turn)
    else:
        for i in range(keep_turns):
            render_turn(i + 1, trajectory.turns[i])
        lines.append(f"[... {total - 2 * keep_turns} turns elided ...]")
        for i in range(total - keep_turns, total):
            render_turn(i + 1, trajectory.turns[i])
    if trajectory.error:
        lines.append(f"Execution error: {trajectory.error}")
    if trajectory.truncated:
        lines.append("Execution stopped at the turn cap without finish.")
    verdict = "success" if trajectory.final_outcome.success else "failure"
    lines.append(f"Outcome: {verdict}")
    return "\n".join(lines)


# -- trajectory persistence ---------------------------------------------------

def write_trajectory(trajectory: Trajectory, path: Path | str) -> None:
    """Persist as JSON lines: one meta line, then one line per turn."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": "trajectory",
        "task_id": trajectory.task_id,
        "skill_iteration": trajectory.skill_iteration,
        "truncated": trajectory.truncated,
        "error": trajectory.error,
        "outcome": {
            "success": trajectory.final_outcome.success,
            "feedback": trajectory.final_outcome.feedback,
        },
    }
    lines = [json.dumps(meta, ensure_ascii=False)]
    for turn in trajectory.turns:
        lines.append(
            json.dumps(
                {
                    "kind": "turn",
                    "message": turn.message,
                    "tool_calls": [
                        {"name": u.name, "arguments": u.arguments, "result": u.result}
                        for u in turn.tool_calls
                    ],
                    "usage": {
                        "prompt_tokens": turn.usage.prompt_tokens,
                        "completion_tokens": turn.usage.completion_tokens,
                    },
                },
                ensure_ascii=False,
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_trajectory(path: Path | str) -> Trajectory:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"empty trajectory file {path}")
    meta = json.loads(lines[0])
    turns: list[Turn] = []
    for line in lines[1:]:
        raw = json.loads(line)
        turns.append(
            Turn(
                raw["message"],
                tuple(
                    ToolUse(c["name"], c["arguments"], c["result"])
                    for c in raw["tool_calls"]
                ),
                Usage(raw["usage"]["prompt_tokens"], raw["usage"]["completion_tokens"]),
            )
        )
    return Trajectory(
        task_id=meta["task_id"],
        skill_iteration=meta["skill_iteration"],
        turns=tuple(turns),
        final_outcome=Outcome(meta["outcome"]["success"], meta["outcome"]["feedback"]),
        truncated=meta["truncated"],
        error=meta["error"],
    )


class BaselineStore:
    """Initial-skill failure trajectories keyed by task id."""

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)

    def path_for(self, task_id: str) -> Path:
        return self.directory / f"{task_id}.jsonl"

    def save(self, trajectory: Trajectory) -> None:
        write_trajectory(trajectory, self.path_for(trajectory.task_id))

    def has(self, task_id: str) -> bool:
        return self.path_for(task_id).is_file()

    def load(self, task_id: str) -> Trajectory | None:
        path = self.path_for(task_id)
        if not path.is_file():
            return None
        return load_trajectory(path)

    def task_ids(self) -> list[str]:
        if not self.directory.is_dir():
            return []
        return sorted(p.stem for p in self.directory.glob("*.jsonl"))


def build_evidence(
    task_id: str, current: Trajectory, baseline_store: BaselineStore
) -> LossEvidence:
    """Pick the evidence branch from the current outcome bit.

    Failures carry their own trajectory and feedback; successes pair the
    current trajectory with the stored initial-skill failure on the same
    task, which must exist because training tasks are sampled from initial
    failures.
    """
    if current.final_outcome.success == 0:
        return LossEvidence(task_id, "failed", current, current.final_outcome.feedback)
    baseline = baseline_store.load(task_id)
    if baseline is None:
        raise MissingBaselineError(
            f"no stored initial failure for {task_id}; training tasks must "
            "come from the initial failure pool"
        )
    if baseline.final_outcome.success != 0:
        raise MissingBaselineError(
            f"stored baseline for {task_id} is not a failure"
        )
    return LossEvidence(
        task_id,
        "contrastive_success",
        current,
        baseline.final_outcome.feedback,
        baseline,
    )
