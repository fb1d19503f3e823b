"""Per-task textual diagnoses from loss evidence, kept unmerged per batch."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from skilltuner.errors import (
    BatchDiagnosisFailureError,
    EmptyDiagnosisError,
    EngineError,
)
from skilltuner.execution import LossEvidence, render_trajectory
from skilltuner.providers import (
    ChatRequest,
    Message,
    Provider,
    load_template,
    render_template,
)
from skilltuner.skill import SkillPackage, serialize_skill_file
from skilltuner.tasks import Task

logger = logging.getLogger(__name__)

_SECTIONS_RE = re.compile(r"^SECTIONS:\s*(.+)$", re.MULTILINE)


@dataclass(frozen=True)
class Diagnosis:
    task_id: str
    kind: str  # "failure" | "contrastive"
    text: str
    cited_skill_sections: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("failure", "contrastive"):
            raise ValueError(f"unknown diagnosis kind {self.kind!r}")
        if not self.text.strip():
            raise ValueError("diagnosis text must be non-empty")


@dataclass(frozen=True)
class DiagnosisSet:
    iteration: int
    items: tuple[Diagnosis, ...]
    skipped: tuple[str, ...] = ()


def render_skill(skill: SkillPackage) -> str:
    """Full skill text for prompts: header, body, then each resource."""
    parts = [serialize_skill_file(skill)]
    for resource in skill.resources:
        parts.append(f"\n===== {resource.path} =====\n{resource.text}")
    return "".join(parts)


def _parse_reply(task_id: str, kind: str, text: str) -> Diagnosis:
    sections: tuple[str, ...] = ()
    match = _SECTIONS_RE.search(text)
    if match:
        sections = tuple(
            s.strip() for s in match.group(1).split(",") if s.strip()
        )
    return Diagnosis(task_id, kind, text.strip(), sections)


def diagnose(
    skill: SkillPackage,
    task: Task,
    evidence: LossEvidence,
    provider: Provider,
    iteration: int,
    keep_turns: int = 6,
    prompts_dir: Path | str | None = None,
) -> Diagnosis:
    """Route the evidence to the matching diagnoser and parse the reply.

    A blank reply is retried once, then raises EmptyDiagnosisError.
    """
    skill_text = render_skill(skill)
    task_text = f"{task.id}: {task.instruction}"
    if evidence.kind == "failed":
        role = "failure_diagnoser"
        kind = "failure"
        bindings = {
            "iteration": str(iteration),
            "skill": skill_text,
            "task": task_text,
            "trajectory": render_trajectory(evidence.current, keep_turns),
            "feedback": evidence.feedback,
        }
    else:
        role = "contrastive_diagnoser"
        kind = "contrastive"
        assert evidence.baseline is not None
        bindings = {
            "iteration": str(iteration),
            "skill": skill_text,
            "task": task_text,
            "success_trajectory": render_trajectory(evidence.current, keep_turns),
            "initial_trajectory": render_trajectory(evidence.baseline, keep_turns),
            "initial_feedback": evidence.feedback,
        }
    prompt = render_template(load_template(role, prompts_dir), bindings)
    request = ChatRequest(role, (Message("user", prompt),))
    for attempt in range(2):
        response = provider.complete(request)
        if response.content.strip():
            return _parse_reply(task.id, kind, response.content)
        logger.warning(
            "blank diagnosis for %s (attempt %d)", task.id, attempt + 1
        )
    raise EmptyDiagnosisError(f"diagnoser returned blank output twice for {task.id}")


def diagnose_batch(
    skill: SkillPackage,
    batch: list[tuple[Task, LossEvidence]],
    provider: Provider,
    iteration: int,
    keep_turns: int = 6,
    prompts_dir: Path | str | None = None,
    parallelism: int = 1,
) -> DiagnosisSet:
    """One diagnosis per task, in batch order, with no merging.

    Failed items become skipped entries; the batch fails only when every
    item does.
    """
    if not batch:
        raise ValueError("diagnosis batch must be non-empty")

    def one(item: tuple[Task, LossEvidence]) -> Diagnosis | Exception:
        task, evidence = item
        try:
            return diagnose(
                skill, task, evidence, provider, iteration, keep_turns, prompts_dir
            )
        except EngineError as exc:
            logger.warning("diagnosis skipped for %s: %s", task.id, exc)
            return exc

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(one, batch))
    else:
        results = [one(item) for item in batch]

    items: list[Diagnosis] = []
    skipped: list[str] = []
    for (task, _), result in zip(batch, results):
        if isinstance(result, Diagnosis):
            items.append(result)
        else:
            skipped.append(task.id)
    if not items:
        raise BatchDiagnosisFailureError(
            f"all {len(batch)} diagnoses failed at iteration {iteration}"
        )
    return DiagnosisSet(iteration, tuple(items), tuple(skipped))


def render_diagnoses(diagnoses: DiagnosisSet) -> str:
    """Plain-text rendering for momentum and patcher prompts."""
    blocks = []
    for i, d in enumerate(diagnoses.items, start=1):
        blocks.append(f"### Diagnosis {i} (task {d.task_id}, {d.kind})\n{d.text}")
    return "\n\n".join(blocks) or "(none)"


# -- persistence ---------------------------------------------------------------

def save_diagnoses(diagnoses: DiagnosisSet, path: Path | str) -> None:
    payload = {
        "iteration": diagnoses.iteration,
        "items": [
            {
                "task_id": d.task_id,
                "kind": d.kind,
                "text": d.text,
                "cited_skill_sections": list(d.cited_skill_sections),
            }
            for d in diagnoses.items
        ],
        "skipped": list(diagnoses.skipped),
    }
    Path(path).write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_diagnoses(path: Path | str) -> DiagnosisSet:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return DiagnosisSet(
        iteration=raw["iteration"],
        items=tuple(
            Diagnosis(
                d["task_id"],
                d["kind"],
                d["text"],
                tuple(d.get("cited_skill_sections", ())),
            )
            for d in raw["items"]
        ),
        skipped=tuple(raw.get("skipped", ())),
    )
