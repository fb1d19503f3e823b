"""Layer-aware skill updates: model-proposed, engine-validated edit sets.

Edits are whole-file replacements routed to one of the three layers, the
simplest contract that stays robust to model-emitted output. Update size
is still visible through word-level LCS diff totals between snapshots.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from skilltuner.errors import (
    DeleteOfMissingResourceError,
    ResultInvalidError,
    SchemaViolationError,
    UnparseablePatchError,
)
from skilltuner.diagnosis import DiagnosisSet, render_diagnoses, render_skill
from skilltuner.momentum import (
    Overlay,
    PatternMemory,
    extract_fenced_json,
    render_memory,
)
from skilltuner.providers import (
    ChatRequest,
    Message,
    Provider,
    load_template,
    render_template,
)
from skilltuner.skill import (
    BODY_FILENAME,
    Resource,
    SkillPackage,
    check_resource_path,
    serialize_skill_file,
    validate,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReplaceBody:
    content: str


@dataclass(frozen=True)
class UpsertResource:
    path: str
    content: str


@dataclass(frozen=True)
class DeleteResource:
    path: str


@dataclass(frozen=True)
class ReplaceHeaderField:
    key: str
    value: str


Edit = ReplaceBody | UpsertResource | DeleteResource | ReplaceHeaderField


@dataclass(frozen=True)
class PatchSet:
    iteration: int
    edits: tuple[Edit, ...]


@dataclass(frozen=True)
class PatchMagnitude:
    words_added: int = 0
    words_removed: int = 0

    def __add__(self, other: "PatchMagnitude") -> "PatchMagnitude":
        return PatchMagnitude(
            self.words_added + other.words_added,
            self.words_removed + other.words_removed,
        )


# -- proposal -----------------------------------------------------------------

def _parse_edits(text: str, skill: SkillPackage, iteration: int) -> PatchSet:
    data = extract_fenced_json(text)
    raw_edits = data.get("edits")
    if not isinstance(raw_edits, list):
        raise SchemaViolationError(["'edits' must be a list"])
    problems: list[str] = []
    edits: list[Edit] = []
    body_edits = 0
    upserted: set[str] = set()
    resource_paths = {r.path for r in skill.resources}
    for idx, raw in enumerate(raw_edits):
        where = f"edits[{idx}]"
        if not isinstance(raw, dict) or "op" not in raw:
            problems.append(f"{where}: must be an object with 'op'")
            continue
        op = raw["op"]
        if op == "replace_body":
            body_edits += 1
            if body_edits > 1:
                problems.append(f"{where}: at most one replace_body edit")
            if not str(raw.get("content", "")).strip():
                problems.append(f"{where}: replace_body content must be non-empty")
            edits.append(ReplaceBody(str(raw.get("content", ""))))
        elif op == "upsert_resource":
            path = str(raw.get("path", ""))
            reason = check_resource_path(path)
            if reason:
                problems.append(f"{where}: {path!r} {reason}")
            if path in upserted:
                problems.append(f"{where}: duplicate upsert of {path!r}")
            upserted.add(path)
            edits.append(UpsertResource(path, str(raw.get("content", ""))))
        elif op == "delete_resource":
            path = str(raw.get("path", ""))
            if path not in resource_paths:
                problems.append(f"{where}: delete of missing resource {path!r}")
            edits.append(DeleteResource(path))
        elif op == "replace_header_field":
            key = str(raw.get("key", ""))
            if key == "name":
                problems.append(f"{where}: the name field cannot be changed")
            if not key:
                problems.append(f"{where}: header key must be non-empty")
            edits.append(ReplaceHeaderField(key, str(raw.get("value", ""))))
        else:
            problems.append(f"{where}: unknown op {op!r}")
    if problems:
        raise SchemaViolationError(problems)
    return PatchSet(iteration, tuple(edits))


def render_pattern_state(memory: PatternMemory, overlay: Overlay) -> str:
    """The momentum block of the patcher prompt; empty when disabled."""
    focus_lines = [
        f"- {pid}: {directive}" for pid, directive in overlay.focus
    ] or ["(none)"]
    return (
        "\n## Recurring pattern record\n"
        + render_memory(memory)
        + "\n\n## Patch overlay (act on these)\n"
        + "\n".join(focus_lines)
    )


def propose_patch(
    skill: SkillPackage,
    diagnoses: DiagnosisSet,
    memory: PatternMemory | None,
    overlay: Overlay | None,
    provider: Provider,
    prompts_dir: Path | str | None = None,
) -> PatchSet:
    """Ask the patcher for whole-file edits; one repair retry on bad output.

    When momentum is disabled, memory and overlay are None and the prompt
    carries no pattern state at all.
    """
    iteration = diagnoses.iteration
    if memory is not None and overlay is not None:
        pattern_state = render_pattern_state(memory, overlay)
    else:
        pattern_state = ""
    prompt = render_template(
        load_template("patcher", prompts_dir),
        {
            "iteration": str(iteration),
            "skill": render_skill(skill),
            "diagnoses": render_diagnoses(diagnoses),
            "pattern_state": pattern_state,
        },
    )
    messages = [Message("user", prompt)]
    response = provider.complete(ChatRequest("patcher", tuple(messages)))
    try:
        return _parse_edits(response.content, skill, iteration)
    except SchemaViolationError as first:
        logger.warning("patch reply failed validation: %s", first)
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
        retry = provider.complete(ChatRequest("patcher", tuple(messages)))
        try:
            return _parse_edits(retry.content, skill, iteration)
        except SchemaViolationError as second:
            raise UnparseablePatchError(str(second))


# -- application ----------------------------------------------------------------

def apply_patch(skill: SkillPackage, patch: PatchSet) -> SkillPackage:
    """Apply edits in order, returning a new package; the input is untouched."""
    header = skill.header
    body = skill.body
    resources = {r.path: r.text for r in skill.resources}
    for edit in patch.edits:
        if isinstance(edit, ReplaceBody):
            body = edit.content
        elif isinstance(edit, UpsertResource):
            resources[edit.path] = edit.content
        elif isinstance(edit, DeleteResource):
            if edit.path not in resources:
                raise DeleteOfMissingResourceError(edit.path)
            del resources[edit.path]
        elif isinstance(edit, ReplaceHeaderField):
            if edit.key == "name":
                raise ResultInvalidError("the name field cannot be changed")
            header = header.with_field(edit.key, edit.value)
    result = SkillPackage(
        header,
        body,
        tuple(Resource(path, resources[path]) for path in sorted(resources)),
    )
    violations = validate(result)
    if violations:
        raise ResultInvalidError(
            "; ".join(str(v) for v in violations)
        )
    return result


# -- magnitude ------------------------------------------------------------------

def lcs_length(a: list, b: list) -> int:
    """Length of the longest common subsequence, two-row dynamic program."""
    start = 0
    end_a, end_b = len(a), len(b)
    while start < end_a and start < end_b and a[start] == b[start]:
        start += 1
    while end_a > start and end_b > start and a[end_a - 1] == b[end_b - 1]:
        end_a -= 1
        end_b -= 1
    common = start + (len(a) - end_a)
    mid_a = a[start:end_a]
    mid_b = b[start:end_b]
    if not mid_a or not mid_b:
        return common
    previous = [0] * (len(mid_b) + 1)
    for x in mid_a:
        current = [0]
        for j, y in enumerate(mid_b, start=1):
            if x == y:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return common + previous[-1]


def diff_counts(before: str, after: str, tokenizer=str.split) -> tuple[int, int]:
    """(added, removed) counts under an LCS alignment of token streams."""
    a = tokenizer(before)
    b = tokenizer(after)
    common = lcs_length(a, b)
    return len(b) - common, len(a) - common


def package_files(pkg: SkillPackage) -> dict[str, str]:
    """Every file of the package tree as saved, keyed by relative path."""
    files = {BODY_FILENAME: serialize_skill_file(pkg)}
    for resource in pkg.resources:
        files[resource.path] = resource.text
    return files


def patch_magnitude(before: SkillPackage, after: SkillPackage) -> PatchMagnitude:
    """Word-level LCS diff totals across the union of package files.

    A created file contributes all its words as added; a deleted file
    contributes all of them as removed.
    """
    files_before = package_files(before)
    files_after = package_files(after)
    total = PatchMagnitude()
    for path in sorted(files_before.keys() | files_after.keys()):
        added, removed = diff_counts(
            files_before.get(path, ""), files_after.get(path, "")
        )
        total = total + PatchMagnitude(added, removed)
    return total


def line_diff_totals(before: SkillPackage, after: SkillPackage) -> tuple[int, int]:
    """Line-level LCS diff totals across the package tree."""
    files_before = package_files(before)
    files_after = package_files(after)
    added = removed = 0
    for path in sorted(files_before.keys() | files_after.keys()):
        a, r = diff_counts(
            files_before.get(path, ""), files_after.get(path, ""), str.splitlines
        )
        added += a
        removed += r
    return added, removed


# -- persistence ----------------------------------------------------------------

def _edit_to_dict(edit: Edit) -> dict:
    if isinstance(edit, ReplaceBody):
        return {"op": "replace_body", "content": edit.content}
    if isinstance(edit, UpsertResource):
        return {"op": "upsert_resource", "path": edit.path, "content": edit.content}
    if isinstance(edit, DeleteResource):
        return {"op": "delete_resource", "path": edit.path}
    return {"op": "replace_header_field", "key": edit.key, "value": edit.value}


def _edit_from_dict(raw: dict) -> Edit:
    op = raw["op"]
    if op == "replace_body":
        return ReplaceBody(raw["content"])
    if op == "upsert_resource":
        return UpsertResource(raw["path"], raw["content"])
    if op == "delete_resource":
        return DeleteResource(raw["path"])
    if op == "replace_header_field":
        return ReplaceHeaderField(raw["key"], raw["value"])
    raise ValueError(f"unknown edit op {op!r}")


def save_patch(patch: PatchSet, path: Path | str, note: str | None = None) -> None:
    payload: dict = {
        "iteration": patch.iteration,
        "edits": [_edit_to_dict(e) for e in patch.edits],
    }
    if note:
        payload["note"] = note
    Path(path).write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_patch(path: Path | str) -> PatchSet:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return PatchSet(raw["iteration"], tuple(_edit_from_dict(e) for e in raw["edits"]))
