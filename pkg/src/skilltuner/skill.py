"""Three-layer skill packages stored as a directory tree.

Layout on disk: ``<root>/SKILL.md`` holding a ``---``-delimited front-matter
header followed by the always-loaded body, plus conditionally loaded
resources under ``<root>/references/*.md``. Packages are immutable values
after load; edits construct new packages.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from skilltuner.errors import (
    IllegalResourcePathError,
    MalformedFrontMatterError,
    MissingBodyError,
)

BODY_FILENAME = "SKILL.md"
RESOURCE_DIR = "references"
FRONT_MATTER_DELIMITER = "---"

_RESOURCE_PATH_RE = re.compile(r"^references/[^/\\]+\.md$")
_HEADER_KEY_RE = re.compile(r"^([A-Za-z0-9_][A-Za-z0-9_.-]*):(?:\s(.*))?$")


@dataclass(frozen=True)
class HeaderField:
    """One front-matter entry, keeping its verbatim source lines."""

    key: str
    value: str
    raw: str


@dataclass(frozen=True)
class Metadata:
    """Ordered front-matter header; unknown keys survive untouched."""

    fields: tuple[HeaderField, ...] = ()

    @property
    def name(self) -> str:
        return self.get("name")

    @property
    def description(self) -> str:
        return self.get("description")

    @property
    def extra(self) -> dict[str, str]:
        """Keys other than name/description, in source order."""
        return {
            f.key: f.value for f in self.fields if f.key not in ("name", "description")
        }

    def get(self, key: str, default: str = "") -> str:
        for f in self.fields:
            if f.key == key:
                return f.value
        return default

    def has(self, key: str) -> bool:
        return any(f.key == key for f in self.fields)

    def with_field(self, key: str, value: str) -> "Metadata":
        """Return a copy with ``key`` set; replaced fields get canonical form."""
        canonical = HeaderField(key, value, f"{key}: {value}")
        if self.has(key):
            return Metadata(
                tuple(canonical if f.key == key else f for f in self.fields)
            )
        return Metadata(self.fields + (canonical,))

    def serialize(self) -> str:
        lines = [FRONT_MATTER_DELIMITER]
        lines.extend(f.raw for f in self.fields)
        lines.append(FRONT_MATTER_DELIMITER)
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Resource:
    """One conditionally loaded reference file."""

    path: str
    text: str


@dataclass(frozen=True)
class SkillPackage:
    """The optimizable artifact: header, always-loaded body, resource set."""

    header: Metadata
    body: str
    resources: tuple[Resource, ...] = ()

    def resource_map(self) -> dict[str, str]:
        return {r.path: r.text for r in self.resources}

    def get_resource(self, path: str) -> str | None:
        for r in self.resources:
            if r.path == path:
                return r.text
        return None


@dataclass(frozen=True)
class LayerMetrics:
    """Size of each layer; words are maximal non-whitespace runs."""

    l2_lines: int = 0
    l2_words: int = 0
    l2_chars: int = 0
    l3_files: int = 0
    l3_words: int = 0
    l3_chars: int = 0


@dataclass(frozen=True)
class Violation:
    """One broken package invariant, naming the offending element."""

    code: str
    detail: str

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}"


def _normalize(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def parse_header(lines: list[str]) -> Metadata:
    """Parse front-matter lines into ordered fields.

    Lines that do not start a ``key: value`` pair attach verbatim to the
    previous field, so multi-line values round-trip byte-identically.
    """
    fields: list[HeaderField] = []
    for line in lines:
        match = _HEADER_KEY_RE.match(line)
        if match:
            fields.append(HeaderField(match.group(1), match.group(2) or "", line))
        elif fields:
            prev = fields[-1]
            fields[-1] = HeaderField(
                prev.key, prev.value + "\n" + line, prev.raw + "\n" + line
            )
        elif not line.strip():
            continue
        else:
            raise MalformedFrontMatterError(
                f"front matter line is not a key: value pair: {line!r}"
            )
    return Metadata(tuple(fields))


def parse_skill_file(text: str) -> tuple[Metadata, str]:
    """Split a SKILL.md file into header and body."""
    text = _normalize(text)
    lines = text.split("\n")
    if not lines or lines[0] != FRONT_MATTER_DELIMITER:
        raise MalformedFrontMatterError("body file does not start with '---'")
    for i in range(1, len(lines)):
        if lines[i] == FRONT_MATTER_DELIMITER:
            header = parse_header(lines[1:i])
            body = "\n".join(lines[i + 1 :])
            return header, body
    raise MalformedFrontMatterError("front matter '---' delimiter is unterminated")


def serialize_skill_file(pkg: SkillPackage) -> str:
    return pkg.header.serialize() + pkg.body


def check_resource_path(path: str) -> str | None:
    """Return a reason the path is illegal, or None."""
    parts = path.replace("\\", "/").split("/")
    if ".." in parts or "." in parts:
        return "contains a relative directory segment"
    if not _RESOURCE_PATH_RE.match(path):
        return f"must match {RESOURCE_DIR}/<name>.md"
    return None


def load_package(directory: Path | str) -> SkillPackage:
    """Load a package from its directory tree."""
    directory = Path(directory)
    body_path = directory / BODY_FILENAME
    if not body_path.is_file():
        raise MissingBodyError(f"no {BODY_FILENAME} under {directory}")
    header, body = parse_skill_file(body_path.read_text(encoding="utf-8"))

    resources: list[Resource] = []
    resource_root = directory / RESOURCE_DIR
    if resource_root.is_dir():
        for path in sorted(resource_root.rglob("*.md")):
            rel = path.relative_to(directory).as_posix()
            if check_resource_path(rel):
                raise IllegalResourcePathError(
                    f"{rel}: resources must live directly under {RESOURCE_DIR}/"
                )
            resources.append(
                Resource(rel, _normalize(path.read_text(encoding="utf-8")))
            )
    return SkillPackage(header, body, tuple(resources))


def save_package(pkg: SkillPackage, directory: Path | str) -> None:
    """Write the package tree; stale resource files are removed.

    Serialization is deterministic: UTF-8, LF line endings, resources
    sorted by path.
    """
    for resource in pkg.resources:
        reason = check_resource_path(resource.path)
        if reason:
            raise IllegalResourcePathError(f"{resource.path}: {reason}")
    seen: set[str] = set()
    for resource in pkg.resources:
        if resource.path in seen:
            raise IllegalResourcePathError(f"{resource.path}: duplicate resource path")
        seen.add(resource.path)

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / BODY_FILENAME).write_text(
        _normalize(serialize_skill_file(pkg)), encoding="utf-8"
    )
    resource_root = directory / RESOURCE_DIR
    if resource_root.is_dir():
        for stale in resource_root.glob("*.md"):
            if stale.relative_to(directory).as_posix() not in seen:
                stale.unlink()
    if pkg.resources:
        resource_root.mkdir(exist_ok=True)
    for resource in sorted(pkg.resources, key=lambda r: r.path):
        (directory / resource.path).write_text(
            _normalize(resource.text), encoding="utf-8"
        )


def _words(text: str) -> int:
    return len(text.split())


def layer_metrics(pkg: SkillPackage) -> LayerMetrics:
    """Count lines/words/chars per layer; front matter is excluded from L2."""
    l3_words = sum(_words(r.text) for r in pkg.resources)
    l3_chars = sum(len(r.text) for r in pkg.resources)
    return LayerMetrics(
        l2_lines=len(pkg.body.splitlines()),
        l2_words=_words(pkg.body),
        l2_chars=len(pkg.body),
        l3_files=len(pkg.resources),
        l3_words=l3_words,
        l3_chars=l3_chars,
    )


def validate(pkg: SkillPackage) -> list[Violation]:
    """Check every package invariant; violations are data, not errors."""
    violations: list[Violation] = []
    if not pkg.header.name.strip():
        violations.append(Violation("missing-header-field", "name"))
    if not pkg.header.description.strip():
        violations.append(Violation("missing-header-field", "description"))
    if not pkg.body.strip():
        violations.append(Violation("empty-body", BODY_FILENAME))
    seen: set[str] = set()
    for resource in pkg.resources:
        reason = check_resource_path(resource.path)
        if reason:
            violations.append(Violation("illegal-resource-path", resource.path))
        if resource.path in seen:
            violations.append(Violation("duplicate-resource", resource.path))
        seen.add(resource.path)
    return violations
