"""Chat-completion providers: tool calling, usage accounting, templates.

One uniform ``complete(request)`` surface backed either by an
OpenAI-compatible HTTP endpoint or by a deterministic scripted mock for
offline runs. Every call appends one entry to the shared usage log.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass
from decimal import Decimal
from importlib import resources as importlib_resources
from pathlib import Path

import requests

from skilltuner.errors import (
    MalformedResponseError,
    ScriptExhaustedError,
    TransportError,
    UnboundPlaceholderError,
    UnknownModelError,
)

logger = logging.getLogger(__name__)

ROLE_TAGS = (
    "executor",
    "failure_diagnoser",
    "contrastive_diagnoser",
    "momentum",
    "patcher",
)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str
    parameters: tuple[tuple[str, str], ...] = ()
    """(argument name, description) pairs; all arguments are strings."""


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: str
    """Opaque argument text; the caller, not the provider, parses it."""


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    role_tag: str
    messages: tuple[Message, ...]
    tools: tuple[ToolSchema, ...] = ()
    temperature: float | None = None
    """Per-request override; None defers to the provider's configured default."""
    max_output_tokens: int | None = None

    def __post_init__(self) -> None:
        if self.role_tag not in ROLE_TAGS:
            raise ValueError(f"unknown role_tag {self.role_tag!r}")
        if not self.messages:
            raise ValueError("messages must be non-empty")

    def turn(self) -> int:
        """1-based turn number: one more than the assistant messages so far."""
        return 1 + sum(1 for m in self.messages if m.role == "assistant")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    tool_calls: tuple[ToolCall, ...] = ()
    usage: Usage = Usage()


@dataclass(frozen=True)
class UsageEntry:
    iteration: int
    stage: str
    role_tag: str
    model: str
    usage: Usage


class UsageLog:
    """Append-only concurrent sink labeling each call with its stage."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[UsageEntry] = []
        self._iteration = 0
        self._stage = ""

    def set_context(self, iteration: int, stage: str) -> None:
        with self._lock:
            self._iteration = iteration
            self._stage = stage

    def record(self, role_tag: str, model: str, usage: Usage) -> None:
        with self._lock:
            self._entries.append(
                UsageEntry(self._iteration, self._stage, role_tag, model, usage)
            )

    def entries(self) -> tuple[UsageEntry, ...]:
        with self._lock:
            return tuple(self._entries)


class Provider:
    """Base chat provider; subclasses implement ``_complete``."""

    model = "unknown"

    def __init__(self, usage_log: UsageLog | None = None) -> None:
        self.usage_log = usage_log

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self._complete(request)
        if self.usage_log is not None:
            self.usage_log.record(request.role_tag, self.model, response.usage)
        known = {tool.name for tool in request.tools}
        for call in response.tool_calls:
            if call.name not in known:
                raise MalformedResponseError(
                    f"response calls unknown tool {call.name!r}"
                )
        return response

    def _complete(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError


@dataclass(frozen=True)
class ScriptEntry:
    """One mock matcher: all given criteria must hold; first match wins."""

    content: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    usage: Usage | None = None
    role: str | None = None
    contains: str | None = None
    prompt_contains: str | None = None
    turn: int | None = None

    def matches(self, request: ChatRequest) -> bool:
        if self.role is not None and request.role_tag != self.role:
            return False
        if self.turn is not None and request.turn() != self.turn:
            return False
        if self.contains is not None and self.contains not in request.messages[-1].content:
            return False
        if self.prompt_contains is not None and not any(
            self.prompt_contains in m.content for m in request.messages
        ):
            return False
        return True


def _default_usage(request: ChatRequest, entry: ScriptEntry) -> Usage:
    prompt = sum(len(m.content) for m in request.messages) // 4
    completion = (
        len(entry.content) + sum(len(c.arguments) for c in entry.tool_calls)
    ) // 4
    return Usage(prompt, completion)


class MockProvider(Provider):
    """Deterministic scripted provider for offline runs and tests.

    Matching is a pure function of the request, so the same script and the
    same request sequence always produce the same response sequence.
    """

    model = "mock"

    def __init__(self, entries: list[ScriptEntry], usage_log: UsageLog | None = None):
        super().__init__(usage_log)
        self.entries = list(entries)
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Path | str, usage_log: UsageLog | None = None) -> "MockProvider":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = [script_entry_from_dict(e) for e in raw["entries"]]
        return cls(entries, usage_log)

    def _complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(request)
            for entry in self.entries:
                if entry.matches(request):
                    usage = entry.usage or _default_usage(request, entry)
                    return ChatResponse(entry.content, entry.tool_calls, usage)
        raise ScriptExhaustedError(
            f"no scripted reply for role={request.role_tag} turn={request.turn()}"
        )


def script_entry_from_dict(raw: dict) -> ScriptEntry:
    calls = tuple(
        ToolCall(c["name"], c.get("arguments", "{}")) for c in raw.get("tool_calls", ())
    )
    usage = None
    if "usage" in raw:
        usage = Usage(
            raw["usage"].get("prompt_tokens", 0),
            raw["usage"].get("completion_tokens", 0),
        )
    return ScriptEntry(
        content=raw.get("content", ""),
        tool_calls=calls,
        usage=usage,
        role=raw.get("role"),
        contains=raw.get("contains"),
        prompt_contains=raw.get("prompt_contains"),
        turn=raw.get("turn"),
    )


def script_entry_to_dict(entry: ScriptEntry) -> dict:
    raw: dict = {}
    for key in ("role", "contains", "prompt_contains", "turn"):
        value = getattr(entry, key)
        if value is not None:
            raw[key] = value
    if entry.content:
        raw["content"] = entry.content
    if entry.tool_calls:
        raw["tool_calls"] = [
            {"name": c.name, "arguments": c.arguments} for c in entry.tool_calls
        ]
    if entry.usage is not None:
        raw["usage"] = {
            "prompt_tokens": entry.usage.prompt_tokens,
            "completion_tokens": entry.usage.completion_tokens,
        }
    return raw


def save_script(entries: list[ScriptEntry], path: Path | str) -> None:
    payload = {"entries": [script_entry_to_dict(e) for e in entries]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class HttpConfig:
    base_url: str
    model: str
    api_key: str = ""
    temperature: float = 0.0
    max_output_tokens: int | None = None
    retries: int = 3
    backoff: float = 0.5
    timeout: float = 120.0


class HttpProvider(Provider):
    """OpenAI-compatible chat-completions client with function calling."""

    def __init__(self, config: HttpConfig, usage_log: UsageLog | None = None):
        super().__init__(usage_log)
        self.config = config
        self.model = config.model
        self._session = requests.Session()

    def _payload(self, request: ChatRequest) -> dict:
        temperature = (
            request.temperature
            if request.temperature is not None
            else self.config.temperature
        )
        payload: dict = {
            "model": self.config.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": temperature,
        }
        max_tokens = request.max_output_tokens or self.config.max_output_tokens
        if max_tokens is not None:
            payload["max_tokens"] = max_tokens
        if request.tools:
            payload["tools"] = [
                {
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": {
                            "type": "object",
                            "properties": {
                                name: {"type": "string", "description": desc}
                                for name, desc in t.parameters
                            },
                            "required": [name for name, _ in t.parameters],
                        },
                    },
                }
                for t in request.tools
            ]
        return payload

    def _complete(self, request: ChatRequest) -> ChatResponse:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.config.retries + 1):
            if attempt:
                time.sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                http = self._session.post(
                    url,
                    json=self._payload(request),
                    headers=headers,
                    timeout=self.config.timeout,
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if http.status_code >= 500 or http.status_code == 429:
                last_error = TransportError(f"HTTP {http.status_code}: {http.text[:200]}")
                continue
            if http.status_code != 200:
                raise TransportError(f"HTTP {http.status_code}: {http.text[:200]}")
            return self._parse(http)
        raise TransportError(f"gave up after {self.config.retries + 1} attempts: {last_error}")

    def _parse(self, http: requests.Response) -> ChatResponse:
        try:
            data = http.json()
            message = data["choices"][0]["message"]
        except (ValueError, KeyError, IndexError) as exc:
            raise MalformedResponseError(f"unparseable completion payload: {exc}")
        calls = []
        for call in message.get("tool_calls") or ():
            function = call.get("function", {})
            if "name" not in function:
                raise MalformedResponseError("tool call without a function name")
            arguments = function.get("arguments", "{}")
            if not isinstance(arguments, str):
                arguments = json.dumps(arguments)
            calls.append(ToolCall(function["name"], arguments))
        usage_raw = data.get("usage") or {}
        usage = Usage(
            int(usage_raw.get("prompt_tokens", 0)),
            int(usage_raw.get("completion_tokens", 0)),
        )
        return ChatResponse(message.get("content") or "", tuple(calls), usage)


# -- templates ---------------------------------------------------------------

_PLACEHOLDER_RE = re.compile(r"\{\{([A-Za-z0-9_]+)\}\}")


def render_template(template: str, bindings: dict[str, str]) -> str:
    """Substitute ``{{name}}`` placeholders; every placeholder must bind."""
    names = set(_PLACEHOLDER_RE.findall(template))
    missing = sorted(names - bindings.keys())
    if missing:
        raise UnboundPlaceholderError(f"unbound placeholders: {', '.join(missing)}")
    unused = sorted(bindings.keys() - names)
    if unused:
        logger.warning("unused template bindings: %s", ", ".join(unused))
    return _PLACEHOLDER_RE.sub(lambda m: bindings[m.group(1)], template)


def load_template(role: str, prompts_dir: Path | str | None = None) -> str:
    """Load the prompt template for a role, preferring an override directory."""
    if prompts_dir is not None:
        override = Path(prompts_dir) / f"{role}.txt"
        if override.is_file():
            return override.read_text(encoding="utf-8")
    ref = importlib_resources.files("skilltuner") / "prompts" / f"{role}.txt"
    return ref.read_text(encoding="utf-8")


# -- pricing -----------------------------------------------------------------

@dataclass(frozen=True)
class Price:
    prompt_per_million: Decimal
    completion_per_million: Decimal

    def __post_init__(self) -> None:
        if self.prompt_per_million < 0 or self.completion_per_million < 0:
            raise ValueError("prices must be non-negative")


class PriceTable:
    """USD per 1M tokens, keyed by role tag or model name."""

    def __init__(self, prices: dict[str, Price]):
        self.prices = dict(prices)

    @classmethod
    def from_dict(cls, raw: dict) -> "PriceTable":
        return cls(
            {
                key: Price(
                    Decimal(str(spec["prompt_per_million"])),
                    Decimal(str(spec["completion_per_million"])),
                )
                for key, spec in raw.items()
            }
        )

    @classmethod
    def from_file(cls, path: Path | str) -> "PriceTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {
            key: {
                "prompt_per_million": str(price.prompt_per_million),
                "completion_per_million": str(price.completion_per_million),
            }
            for key, price in self.prices.items()
        }

    def lookup(self, *keys: str) -> Price:
        for key in keys:
            if key in self.prices:
                return self.prices[key]
        if "default" in self.prices:
            return self.prices["default"]
        raise UnknownModelError(f"no price for any of: {', '.join(keys)}")


def cost_of(usage: Usage, prices: PriceTable, *keys: str) -> Decimal:
    """Exact-decimal USD cost of one usage record."""
    price = prices.lookup(*keys)
    million = Decimal(1_000_000)
    return (
        Decimal(usage.prompt_tokens) * price.prompt_per_million
        + Decimal(usage.completion_tokens) * price.completion_per_million
    ) / million
