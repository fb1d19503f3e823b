"""Persistent pattern memory and per-iteration overlay.

The model performs the semantic work (dedup, status calls); the engine
enforces only the schema: stable engine-assigned ids, carry-forward of
every prior pattern, and extend-only ``appeared_in`` lists. Schema
violations get one repair attempt, then the iteration falls back to the
previous memory with an empty overlay.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

from skilltuner.errors import SchemaViolationError
from skilltuner.diagnosis import DiagnosisSet, render_diagnoses, render_skill
from skilltuner.providers import (
    ChatRequest,
    Message,
    Provider,
    load_template,
    render_template,
)
from skilltuner.skill import SkillPackage

logger = logging.getLogger(__name__)

PATTERN_CHARACTERS = ("operation", "workflow")
PATTERN_STATUSES = ("new", "recurring", "absorbed", "unresolved")

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)
_SLUG_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class Pattern:
    id: str
    summary: str
    character: str  # "operation" | "workflow"
    appeared_in: tuple[int, ...]
    status: str  # "new" | "recurring" | "absorbed" | "unresolved"
    evidence_refs: tuple[tuple[int, str], ...] = ()
    skill_anchor: str | None = None
    retired_reason: str | None = None


@dataclass(frozen=True)
class PatternMemory:
    iteration: int
    patterns: tuple[Pattern, ...] = ()

    @classmethod
    def empty(cls, iteration: int = 0) -> "PatternMemory":
        return cls(iteration, ())

    def ids(self) -> set[str]:
        return {p.id for p in self.patterns}

    def get(self, pattern_id: str) -> Pattern | None:
        for p in self.patterns:
            if p.id == pattern_id:
                return p
        return None


@dataclass(frozen=True)
class Overlay:
    iteration: int
    focus: tuple[tuple[str, str], ...] = ()
    """(pattern id, directive) pairs, in patch priority order."""


def slugify(summary: str, taken: set[str] | None = None) -> str:
    """Engine-assigned stable id: first words of the summary, deduplicated."""
    words = _SLUG_RE.findall(summary.lower())[:5]
    base = "-".join(words) or "pattern"
    if taken is None:
        return base
    slug = base
    suffix = 2
    while slug in taken:
        slug = f"{base}-{suffix}"
        suffix += 1
    return slug


def extract_fenced_json(text: str) -> dict:
    """Pull the first fenced JSON block, or parse the whole reply."""
    match = _FENCE_RE.search(text)
    candidate = match.group(1) if match else text
    try:
        parsed = json.loads(candidate)
    except ValueError as exc:
        raise SchemaViolationError([f"reply is not valid JSON: {exc}"])
    if not isinstance(parsed, dict):
        raise SchemaViolationError(["reply JSON must be an object"])
    return parsed


def _validate_pattern_fields(raw: dict, where: str, problems: list[str]) -> None:
    if not str(raw.get("summary", "")).strip():
        problems.append(f"{where}: empty summary")
    if raw.get("character") not in PATTERN_CHARACTERS:
        problems.append(f"{where}: character must be one of {PATTERN_CHARACTERS}")
    if raw.get("status") not in PATTERN_STATUSES:
        problems.append(f"{where}: status must be one of {PATTERN_STATUSES}")
    appeared = raw.get("appeared_in")
    if (
        not isinstance(appeared, list)
        or not appeared
        or not all(isinstance(i, int) and i >= 1 for i in appeared)
    ):
        problems.append(f"{where}: appeared_in must be a non-empty list of iterations")
        return
    if any(b <= a for a, b in zip(appeared, appeared[1:])):
        problems.append(f"{where}: appeared_in must be strictly increasing")
    if raw.get("status") == "new" and len(appeared) != 1:
        problems.append(f"{where}: status 'new' requires a single appearance")


def parse_memory_reply(
    text: str, previous: PatternMemory, iteration: int
) -> tuple[PatternMemory, Overlay]:
    """Validate the model reply against the pattern schema.

    Raises SchemaViolationError listing every problem, so the repair
    prompt can show all of them at once.
    """
    data = extract_fenced_json(text)
    problems: list[str] = []
    raw_patterns = data.get("patterns")
    if not isinstance(raw_patterns, list):
        raise SchemaViolationError(["'patterns' must be a list"])

    prev_ids = previous.ids()
    taken = set(prev_ids)
    patterns: list[Pattern] = []
    seen_ids: set[str] = set()
    for idx, raw in enumerate(raw_patterns):
        if not isinstance(raw, dict):
            problems.append(f"patterns[{idx}]: must be an object")
            continue
        where = f"patterns[{idx}]"
        _validate_pattern_fields(raw, where, problems)
        appeared = tuple(raw.get("appeared_in") or ())
        pattern_id = raw.get("id")
        if pattern_id is not None:
            if pattern_id not in prev_ids:
                problems.append(
                    f"{where}: id {pattern_id!r} is not in the previous record; "
                    "omit id for new patterns"
                )
            else:
                prior = previous.get(pattern_id)
                assert prior is not None
                old = prior.appeared_in
                if tuple(appeared[: len(old)]) != old or any(
                    i != iteration for i in appeared[len(old) :]
                ):
                    problems.append(
                        f"{where}: appeared_in may only extend {list(old)} "
                        f"with the current iteration {iteration}"
                    )
        else:
            if appeared and list(appeared) != [iteration]:
                problems.append(
                    f"{where}: new patterns must have appeared_in [{iteration}]"
                )
            pattern_id = slugify(str(raw.get("summary", "")), taken)
        if appeared and max(appeared) > iteration:
            problems.append(f"{where}: appeared_in exceeds current iteration")
        if pattern_id in seen_ids:
            problems.append(f"{where}: duplicate pattern id {pattern_id!r}")
        seen_ids.add(pattern_id)
        taken.add(pattern_id)

        evidence_raw = raw.get("evidence") or raw.get("evidence_refs") or []
        evidence: list[tuple[int, str]] = []
        for ref in evidence_raw:
            if isinstance(ref, (list, tuple)) and len(ref) == 2:
                evidence.append((int(ref[0]), str(ref[1])))
        patterns.append(
            Pattern(
                id=pattern_id,
                summary=str(raw.get("summary", "")).strip(),
                character=str(raw.get("character", "")),
                appeared_in=appeared,
                status=str(raw.get("status", "")),
                evidence_refs=tuple(evidence),
                skill_anchor=raw.get("skill_anchor"),
                retired_reason=raw.get("retired_reason"),
            )
        )

    dropped = prev_ids - seen_ids
    if dropped:
        problems.append(
            "prior patterns were dropped instead of carried forward or "
            f"retired by status: {', '.join(sorted(dropped))}"
        )

    raw_overlay = data.get("overlay", [])
    if not isinstance(raw_overlay, list):
        problems.append("'overlay' must be a list")
        raw_overlay = []
    focus: list[tuple[str, str]] = []
    by_summary = {p.summary: p.id for p in patterns}
    for idx, raw in enumerate(raw_overlay):
        if not isinstance(raw, dict) or "pattern" not in raw:
            problems.append(f"overlay[{idx}]: must be an object with 'pattern'")
            continue
        key = str(raw["pattern"])
        if key in seen_ids:
            resolved = key
        elif key in by_summary:
            resolved = by_summary[key]
        else:
            problems.append(f"overlay[{idx}]: unknown pattern {key!r}")
            continue
        focus.append((resolved, str(raw.get("directive", "")).strip()))

    if problems:
        raise SchemaViolationError(problems)
    return PatternMemory(iteration, tuple(patterns)), Overlay(iteration, tuple(focus))


def render_memory(memory: PatternMemory) -> str:
    if not memory.patterns:
        return "(empty)"
    return json.dumps(
        [_pattern_to_dict(p) for p in memory.patterns], indent=2, ensure_ascii=False
    )


def update(
    memory_prev: PatternMemory,
    diagnoses: DiagnosisSet,
    skill: SkillPackage,
    provider: Provider,
    prompts_dir: Path | str | None = None,
) -> tuple[PatternMemory, Overlay]:
    """One momentum step: fold the batch diagnoses into the pattern record."""
    iteration = diagnoses.iteration
    if memory_prev.iteration != iteration - 1:
        raise ValueError(
            f"memory is at iteration {memory_prev.iteration}, expected {iteration - 1}"
        )
    prompt = render_template(
        load_template("momentum", prompts_dir),
        {
            "iteration": str(iteration),
            "memory": render_memory(memory_prev),
            "diagnoses": render_diagnoses(diagnoses),
            "skill": render_skill(skill),
        },
    )
    messages = [Message("user", prompt)]
    response = provider.complete(ChatRequest("momentum", tuple(messages)))
    try:
        return parse_memory_reply(response.content, memory_prev, iteration)
    except SchemaViolationError as first:
        logger.warning("memory reply failed validation: %s", first)
        messages.append(Message("assistant", response.content))
        messages.append(
            Message(
                "user",
                "Your reply failed validation:\n- "
                + "\n- ".join(first.problems)
                + "\nReply again with exactly one fenced JSON block fixing "
                "these issues.",
            )
        )
        retry = provider.complete(ChatRequest("momentum", tuple(messages)))
        try:
            return parse_memory_reply(retry.content, memory_prev, iteration)
        except SchemaViolationError as second:
            logger.warning(
                "memory repair failed (%s); keeping previous record with an "
                "empty overlay",
                second,
            )
            return (
                PatternMemory(iteration, memory_prev.patterns),
                Overlay(iteration, ()),
            )


def derived_metrics(history: list[PatternMemory]) -> list[tuple[int, int, int, int]]:
    """(iteration, cumulative, new, active) rows from a memory history.

    cumulative counts distinct pattern ids ever seen by each iteration;
    new counts patterns whose first appearance is that iteration; active
    counts patterns whose appeared_in contains it.
    """
    rows: list[tuple[int, int, int, int]] = []
    seen: set[str] = set()
    for memory in history:
        t = memory.iteration
        seen.update(p.id for p in memory.patterns)
        new = sum(1 for p in memory.patterns if p.appeared_in and min(p.appeared_in) == t)
        active = sum(1 for p in memory.patterns if t in p.appeared_in)
        rows.append((t, len(seen), new, active))
    return rows


# -- persistence ---------------------------------------------------------------

def _pattern_to_dict(p: Pattern) -> dict:
    return {
        "id": p.id,
        "summary": p.summary,
        "character": p.character,
        "appeared_in": list(p.appeared_in),
        "status": p.status,
        "evidence_refs": [[i, t] for i, t in p.evidence_refs],
        "skill_anchor": p.skill_anchor,
        "retired_reason": p.retired_reason,
    }


def _pattern_from_dict(raw: dict) -> Pattern:
    return Pattern(
        id=raw["id"],
        summary=raw["summary"],
        character=raw["character"],
        appeared_in=tuple(raw["appeared_in"]),
        status=raw["status"],
        evidence_refs=tuple((int(i), str(t)) for i, t in raw.get("evidence_refs", ())),
        skill_anchor=raw.get("skill_anchor"),
        retired_reason=raw.get("retired_reason"),
    )


def save_memory(memory: PatternMemory, path: Path | str) -> None:
    payload = {
        "iteration": memory.iteration,
        "patterns": [_pattern_to_dict(p) for p in memory.patterns],
    }
    Path(path).write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_memory(path: Path | str) -> PatternMemory:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return PatternMemory(
        raw["iteration"], tuple(_pattern_from_dict(p) for p in raw["patterns"])
    )


def save_overlay(overlay: Overlay, path: Path | str) -> None:
    payload = {
        "iteration": overlay.iteration,
        "focus": [
            {"pattern_id": pid, "directive": directive}
            for pid, directive in overlay.focus
        ],
    }
    Path(path).write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_overlay(path: Path | str) -> Overlay:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return Overlay(
        raw["iteration"],
        tuple((f["pattern_id"], f["directive"]) for f in raw["focus"]),
    )
