"""Uniform access to chat-completion models.

Three backends share one interface: a real HTTP chat endpoint, a deterministic
scripted mock for offline tests, and a record/replay cassette layer. Every
call is metered into a Usage ledger (prompt tokens, completion tokens, wall
time, per-stage call counts).
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import httpx

from .errors import (
    BackendUnavailable,
    BudgetExceeded,
    ConfigInvalid,
    MalformedResponse,
    ReplayMismatch,
    ScriptExhausted,
)


class Stage(str, Enum):
    CHECKLIST_BUILD = "CHECKLIST_BUILD"
    CHECKLIST_ANSWER = "CHECKLIST_ANSWER"
    ANSWER_GRADE = "ANSWER_GRADE"
    REQ_SYNTHESIS = "REQ_SYNTHESIS"
    CODE_GEN = "CODE_GEN"
    MASK_PROPOSE = "MASK_PROPOSE"
    MASK_RECOVER = "MASK_RECOVER"
    RECOVERY_GRADE = "RECOVERY_GRADE"


# Code generation runs greedy; every other stage gets a little freedom.
CODE_GEN_TEMPERATURE = 0.0
DEFAULT_TEMPERATURE = 0.2


def stage_temperature(stage: Stage, overrides: Mapping[Stage, float] | None = None) -> float:
    if overrides and stage in overrides:
        return overrides[stage]
    return CODE_GEN_TEMPERATURE if stage is Stage.CODE_GEN else DEFAULT_TEMPERATURE


@dataclass(frozen=True)
class Message:
    role: str  # "system" | "user" | "assistant"
    content: str


@dataclass(frozen=True)
class ChatRequest:
    stage: Stage
    messages: tuple[Message, ...]
    temperature: float
    max_output_tokens: int = 4096
    problem_id: str | None = None  # scopes scripted-mock and cassette lookups

    @classmethod
    def for_stage(
        cls,
        stage: Stage,
        messages: list[Message] | tuple[Message, ...],
        *,
        problem_id: str | None = None,
        max_output_tokens: int = 4096,
        temperature_overrides: Mapping[Stage, float] | None = None,
    ) -> "ChatRequest":
        return cls(
            stage=stage,
            messages=tuple(messages),
            temperature=stage_temperature(stage, temperature_overrides),
            max_output_tokens=max_output_tokens,
            problem_id=problem_id,
        )


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: int
    backend_id: str
    estimated_usage: bool = False  # True when token counts came from the fallback estimator


def estimate_tokens(text: str) -> int:
    """Fallback token estimator for backends that omit usage: ceil(chars / 4)."""
    return math.ceil(len(text) / 4)


def _estimate_prompt_tokens(messages: tuple[Message, ...]) -> int:
    return sum(estimate_tokens(m.content) for m in messages)


@dataclass
class Usage:
    total_prompt_tokens: int = 0
    total_completion_tokens: int = 0
    total_wall_ms: int = 0
    calls_by_stage: dict[str, int] = field(default_factory=dict)

    def record(self, stage: Stage, response: ChatResponse) -> None:
        self.total_prompt_tokens += response.prompt_tokens
        self.total_completion_tokens += response.completion_tokens
        self.total_wall_ms += response.latency_ms
        self.calls_by_stage[stage.value] = self.calls_by_stage.get(stage.value, 0) + 1

    def snapshot(self) -> "Usage":
        return Usage(
            self.total_prompt_tokens,
            self.total_completion_tokens,
            self.total_wall_ms,
            dict(self.calls_by_stage),
        )

    @property
    def total_tokens(self) -> int:
        return self.total_prompt_tokens + self.total_completion_tokens

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_prompt_tokens": self.total_prompt_tokens,
            "total_completion_tokens": self.total_completion_tokens,
            "total_wall_ms": self.total_wall_ms,
            "calls_by_stage": dict(sorted(self.calls_by_stage.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Usage":
        return cls(
            int(data.get("total_prompt_tokens", 0)),
            int(data.get("total_completion_tokens", 0)),
            int(data.get("total_wall_ms", 0)),
            dict(data.get("calls_by_stage", {})),
        )


class BackendKind(str, Enum):
    HTTP_CHAT = "HTTP_CHAT"
    SCRIPTED_MOCK = "SCRIPTED_MOCK"
    REPLAY = "REPLAY"


@dataclass
class GatewayConfig:
    kind: BackendKind = BackendKind.SCRIPTED_MOCK
    endpoint: str | None = None
    model: str | None = None
    timeout_s: float = 60.0
    max_retries: int = 3
    session_token_budget: int | None = None
    api_key_env: str = "CHAT_API_KEY"
    script_path: str | None = None
    script: Mapping[str, Any] | None = None  # inline alternative to script_path
    cassette_path: str | None = None
    record_path: str | None = None
    temperature_overrides: dict[Stage, float] = field(default_factory=dict)


def request_digest(request: ChatRequest) -> str:
    payload = {
        "stage": request.stage.value,
        "messages": [[m.role, m.content] for m in request.messages],
        "temperature": request.temperature,
        "max_output_tokens": request.max_output_tokens,
        "problem_id": request.problem_id,
    }
    raw = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()


class Gateway:
    """Base class: validation, budget enforcement, and usage accounting."""

    backend_id = "base"

    def __init__(self, config: GatewayConfig):
        self._config = config
        self._usage = Usage()
        self._lock = threading.Lock()

    @property
    def usage(self) -> Usage:
        with self._lock:
            return self._usage.snapshot()

    @property
    def config(self) -> GatewayConfig:
        return self._config

    def complete(self, request: ChatRequest) -> ChatResponse:
        if not request.messages:
            raise MalformedResponse("chat request carries no messages")
        budget = self._config.session_token_budget
        with self._lock:
            if budget is not None and self._usage.total_tokens >= budget:
                raise BudgetExceeded(
                    f"session token budget {budget} exhausted "
                    f"({self._usage.total_tokens} tokens used)"
                )
        response = self._complete(request)
        if not response.content.strip():
            raise MalformedResponse(f"backend returned empty content for stage {request.stage.value}")
        with self._lock:
            self._usage.record(request.stage, response)
        return response

    def _complete(self, request: ChatRequest) -> ChatResponse:  # pragma: no cover - abstract
        raise NotImplementedError

    def close(self) -> None:
        pass


class HttpChatGateway(Gateway):
    """Chat-completion JSON over HTTP (the de facto hosted-model interface).

    Retries transport errors and 429/5xx responses with 1s/2s/4s backoff.
    """

    backend_id = "http"

    _RETRYABLE_STATUS = {429, 500, 502, 503, 504}

    def __init__(self, config: GatewayConfig, client: httpx.Client | None = None):
        super().__init__(config)
        if not config.endpoint:
            raise ConfigInvalid("HTTP_CHAT backend requires an endpoint")
        if not config.model:
            raise ConfigInvalid("HTTP_CHAT backend requires a model name")
        api_key = os.environ.get(config.api_key_env, "")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=config.timeout_s, headers=headers)

    def _complete(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self._config.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        last_error: Exception | None = None
        attempts = max(1, self._config.max_retries)
        for attempt in range(attempts):
            started = time.monotonic()
            try:
                http_response = self._client.post(self._config.endpoint, json=payload)
            except httpx.TransportError as exc:
                last_error = exc
                if attempt < attempts - 1:
                    time.sleep(2**attempt)
                continue
            latency_ms = int((time.monotonic() - started) * 1000)
            if http_response.status_code in self._RETRYABLE_STATUS:
                last_error = BackendUnavailable(f"HTTP {http_response.status_code}")
                if attempt < attempts - 1:
                    time.sleep(2**attempt)
                continue
            if http_response.status_code != 200:
                raise BackendUnavailable(
                    f"HTTP {http_response.status_code}: {http_response.text[:200]}"
                )
            return self._parse(http_response.json(), request, latency_ms)
        raise BackendUnavailable(f"chat endpoint unreachable after {attempts} attempts: {last_error}")

    def _parse(self, body: Mapping[str, Any], request: ChatRequest, latency_ms: int) -> ChatResponse:
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected chat completion shape: {exc}") from exc
        usage = body.get("usage") or {}
        prompt_tokens = usage.get("prompt_tokens")
        completion_tokens = usage.get("completion_tokens")
        estimated = prompt_tokens is None or completion_tokens is None
        if estimated:
            prompt_tokens = _estimate_prompt_tokens(request.messages)
            completion_tokens = estimate_tokens(content or "")
        return ChatResponse(
            content=content or "",
            prompt_tokens=int(prompt_tokens),
            completion_tokens=int(completion_tokens),
            latency_ms=latency_ms,
            backend_id=self.backend_id,
            estimated_usage=estimated,
        )

    def close(self) -> None:
        self._client.close()


def _script_key(problem_id: str | None, stage: Stage) -> tuple[str, str]:
    return (problem_id or "", stage.value)


class ScriptedMockGateway(Gateway):
    """Serves pre-authored responses keyed by (problem_id, stage, occurrence).

    A script is ``{"responses": [{"problem_id", "stage", "index", "content",
    ...}]}`` where ``index`` is the 0-based occurrence of that (problem, stage)
    pair, or ``"*"`` for a catch-all once explicit indices are exhausted.
    Token counts may be declared per entry; otherwise the mock declares
    deterministic counts derived from the text, so accounting stays exact.
    """

    backend_id = "mock"

    def __init__(self, config: GatewayConfig):
        super().__init__(config)
        if config.script is not None:
            script: Mapping[str, Any] = config.script
        elif config.script_path:
            script = json.loads(Path(config.script_path).read_text(encoding="utf-8"))
        else:
            raise ConfigInvalid("SCRIPTED_MOCK backend requires script or script_path")
        self._exact: dict[tuple[str, str, int], dict[str, Any]] = {}
        self._catch_all: dict[tuple[str, str], dict[str, Any]] = {}
        entries = script.get("responses")
        if not isinstance(entries, list):
            raise ConfigInvalid("mock script must carry a 'responses' list")
        for pos, entry in enumerate(entries):
            try:
                stage = Stage(entry["stage"])
                key = _script_key(entry.get("problem_id"), stage)
                index = entry.get("index", 0)
                entry["content"]
            except (KeyError, ValueError) as exc:
                raise ConfigInvalid(f"mock script entry {pos} invalid: {exc}") from exc
            if index == "*":
                self._catch_all[key] = entry
            else:
                self._exact[(*key, int(index))] = entry
        self._counters: dict[tuple[str, str], int] = {}

    def _complete(self, request: ChatRequest) -> ChatResponse:
        key = _script_key(request.problem_id, request.stage)
        with self._lock:
            occurrence = self._counters.get(key, 0)
            self._counters[key] = occurrence + 1
        entry = self._exact.get((*key, occurrence)) or self._catch_all.get(key)
        if entry is None:
            raise ScriptExhausted(
                f"no scripted response for problem={request.problem_id!r} "
                f"stage={request.stage.value} occurrence={occurrence}"
            )
        content = str(entry["content"])
        return ChatResponse(
            content=content,
            prompt_tokens=int(entry.get("prompt_tokens", _estimate_prompt_tokens(request.messages))),
            completion_tokens=int(entry.get("completion_tokens", estimate_tokens(content))),
            latency_ms=int(entry.get("latency_ms", 0)),
            backend_id=self.backend_id,
        )


class ReplayGateway(Gateway):
    """Plays back a cassette recorded from a previous run; never touches the network."""

    backend_id = "replay"

    def __init__(self, config: GatewayConfig):
        super().__init__(config)
        if not config.cassette_path:
            raise ConfigInvalid("REPLAY backend requires cassette_path")
        path = Path(config.cassette_path)
        if not path.exists():
            raise ConfigInvalid(f"cassette not found: {path}")
        self._records: dict[tuple[str, str, int], dict[str, Any]] = {}
        for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                key = record["key"]
                lookup = (key["problem_id"] or "", key["stage"], int(key["index"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigInvalid(f"cassette line {line_no} invalid: {exc}") from exc
            self._records[lookup] = record
        self._counters: dict[tuple[str, str], int] = {}

    def _complete(self, request: ChatRequest) -> ChatResponse:
        key = _script_key(request.problem_id, request.stage)
        with self._lock:
            occurrence = self._counters.get(key, 0)
            self._counters[key] = occurrence + 1
        record = self._records.get((*key, occurrence))
        if record is None:
            raise ReplayMismatch(
                f"cassette has no record for problem={request.problem_id!r} "
                f"stage={request.stage.value} occurrence={occurrence}"
            )
        if record.get("request_digest") != request_digest(request):
            raise ReplayMismatch(
                f"request digest mismatch at problem={request.problem_id!r} "
                f"stage={request.stage.value} occurrence={occurrence}"
            )
        body = record["response"]
        return ChatResponse(
            content=body["content"],
            prompt_tokens=int(body["prompt_tokens"]),
            completion_tokens=int(body["completion_tokens"]),
            latency_ms=int(body["latency_ms"]),
            backend_id=self.backend_id,
            estimated_usage=bool(body.get("estimated_usage", False)),
        )


class RecordingGateway(Gateway):
    """Wraps another gateway and appends one JSON record per call to a cassette."""

    def __init__(self, inner: Gateway, record_path: str | Path):
        super().__init__(inner.config)
        self._inner = inner
        self._path = Path(record_path)
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._path.write_text("", encoding="utf-8")
        self._counters: dict[tuple[str, str], int] = {}
        self.backend_id = inner.backend_id

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self._inner.complete(request)
        key = _script_key(request.problem_id, request.stage)
        with self._lock:
            occurrence = self._counters.get(key, 0)
            self._counters[key] = occurrence + 1
            self._usage.record(request.stage, response)
            record = {
                "key": {
                    "problem_id": request.problem_id,
                    "stage": request.stage.value,
                    "index": occurrence,
                },
                "request_digest": request_digest(request),
                "response": {
                    "content": response.content,
                    "prompt_tokens": response.prompt_tokens,
                    "completion_tokens": response.completion_tokens,
                    "latency_ms": response.latency_ms,
                    "estimated_usage": response.estimated_usage,
                },
            }
            with self._path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record, ensure_ascii=False) + "\n")
        return response

    def close(self) -> None:
        self._inner.close()


def with_backend(kind: BackendKind | str, config: GatewayConfig) -> Gateway:
    """Build a gateway of the requested kind, validating config for it."""
    kind = BackendKind(kind)
    config = replace(config, kind=kind)
    if kind is BackendKind.HTTP_CHAT:
        gateway: Gateway = HttpChatGateway(config)
    elif kind is BackendKind.SCRIPTED_MOCK:
        gateway = ScriptedMockGateway(config)
    elif kind is BackendKind.REPLAY:
        gateway = ReplayGateway(config)
    else:  # pragma: no cover - exhaustive enum
        raise ConfigInvalid(f"unsupported backend kind {kind}")
    if config.record_path:
        return RecordingGateway(gateway, config.record_path)
    return gateway
