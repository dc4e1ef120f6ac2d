"""Uniform access to chat-completion and embedding providers.

Three backends share one protocol: a live HTTP client speaking the de-facto
chat-completions wire format, a deterministic scripted backend for offline
tests and replays, and (for embeddings) a term-frequency hashing embedder
that needs no network at all. A TokenLedger accumulates usage per run.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import numpy as np
import requests
import yaml

from .errors import BackendError, ChainforgeError, ScriptExhaustedError

ENV_BASE_URL = "CHAINFORGE_BASE_URL"
ENV_MODEL = "CHAINFORGE_MODEL"
ENV_API_KEY = "CHAINFORGE_API_KEY"

VALID_ROLES = ("system", "user", "assistant")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_TERM_RE = re.compile(r"[a-z0-9_]+")


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion call.

    ``tags`` carries routing metadata (task/phase/subtask/round/speaker) so a
    keyed scripted backend can pick the right canned response; live backends
    ignore it. An empty ``model`` means "backend default".
    """

    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.2
    model: str = ""
    tags: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.messages:
            raise BackendError("chat request has an empty message list")
        if self.messages[0][0] != "system":
            raise BackendError("first chat message must have role 'system'")
        for role, _ in self.messages:
            if role not in VALID_ROLES:
                raise BackendError(f"invalid message role {role!r}")


@dataclass(frozen=True)
class ChatResult:
    content: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    latency: float = 0.0


@dataclass(frozen=True)
class EmbeddingResult:
    vector: np.ndarray
    dimension: int


class Backend(Protocol):
    deterministic: bool

    def complete(self, request: ChatRequest) -> ChatResult: ...

    def clone(self) -> "Backend": ...


def count_tokens(text: str) -> int:
    """Whitespace-plus-punctuation token approximation.

    Words (``\\w+`` runs) and individual punctuation characters each count as
    one token. Used only when a provider reports no usage; such totals are
    labeled approximate in reports.
    """
    if not text:
        return 0
    return len(_TOKEN_RE.findall(text))


class TokenLedger:
    """Per-run usage accumulator; never shared across runs."""

    def __init__(self) -> None:
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.calls = 0
        self.approximate = False

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def record(self, request: ChatRequest, result: ChatResult) -> None:
        self.calls += 1
        if result.prompt_tokens is None or result.completion_tokens is None:
            self.approximate = True
            self.prompt_tokens += sum(count_tokens(c) for _, c in request.messages)
            self.completion_tokens += count_tokens(result.content)
        else:
            self.prompt_tokens += result.prompt_tokens
            self.completion_tokens += result.completion_tokens


def complete_chat(backend: Backend, request: ChatRequest, ledger: TokenLedger | None = None) -> ChatResult:
    """Validate, dispatch to the backend, and account for usage."""
    request.validate()
    result = backend.complete(request)
    if ledger is not None:
        ledger.record(request, result)
    return result


# --- scripted backend -------------------------------------------------------

@dataclass
class ScriptEntry:
    content: str
    task: str | None = None
    phase: str | None = None
    subtask: str | None = None
    round: int | None = None
    speaker: str | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def keyed(self) -> bool:
        return any(v is not None for v in (self.task, self.phase, self.subtask, self.round, self.speaker))

    def matches(self, tags: dict[str, Any], with_task: bool) -> bool:
        if with_task and self.task is not None and self.task != tags.get("task"):
            return False
        if not with_task and self.task is not None:
            return False
        for attr, tag in (("phase", "phase"), ("subtask", "subtask"), ("round", "round"), ("speaker", "speaker")):
            want = getattr(self, attr)
            if want is not None and want != tags.get(tag):
                return False
        return True


class ScriptedBackend:
    """Deterministic canned responses, keyed or sequential.

    Keyed entries match on (task, phase, subtask, round, speaker); repeated
    keys are consumed first-in-first-out, which is how one round's several
    assistant calls (clarifications, then the conclusive reply) line up.
    Running out of matching entries raises ScriptExhaustedError.
    """

    deterministic = True

    def __init__(self, entries: list[ScriptEntry]):
        self._entries = list(entries)
        self._consumed = [False] * len(self._entries)
        self._cursor = 0
        self._keyed = any(e.keyed for e in self._entries)

    @classmethod
    def from_responses(cls, responses: list[str]) -> "ScriptedBackend":
        return cls([ScriptEntry(content=r) for r in responses])

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(load_script(path))

    def clone(self) -> "ScriptedBackend":
        return ScriptedBackend(self._entries)

    def complete(self, request: ChatRequest) -> ChatResult:
        entry = self._next_entry(request.tags)
        return ChatResult(
            content=entry.content,
            prompt_tokens=entry.prompt_tokens,
            completion_tokens=entry.completion_tokens,
            latency=0.0,
        )

    def _next_entry(self, tags: dict[str, Any]) -> ScriptEntry:
        if not self._keyed:
            if self._cursor >= len(self._entries):
                raise ScriptExhaustedError(
                    f"script exhausted after {len(self._entries)} responses"
                )
            entry = self._entries[self._cursor]
            self._cursor += 1
            return entry
        for with_task in (True, False):
            for idx, entry in enumerate(self._entries):
                if self._consumed[idx]:
                    continue
                if entry.matches(tags, with_task=with_task):
                    self._consumed[idx] = True
                    return entry
        key = {k: tags.get(k) for k in ("task", "phase", "subtask", "round", "speaker")}
        raise ScriptExhaustedError(f"no scripted response left for {key}")


def load_script(path: str | Path) -> list[ScriptEntry]:
    """Load a script file: a mapping with a ``responses`` list.

    Each item is either a bare string (sequential mode) or a mapping with
    ``content`` plus optional ``task``/``phase``/``subtask``/``round``/
    ``speaker`` keys and optional token counts.
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ChainforgeError(f"cannot parse script file {path}: {exc}") from exc
    if isinstance(data, list):
        items = data
    elif isinstance(data, dict) and isinstance(data.get("responses"), list):
        items = data["responses"]
    else:
        raise ChainforgeError(f"script file {path} must hold a 'responses' list")
    entries = []
    for i, item in enumerate(items):
        if isinstance(item, str):
            entries.append(ScriptEntry(content=item))
            continue
        if not isinstance(item, dict) or "content" not in item:
            raise ChainforgeError(f"script entry {i} in {path} lacks a 'content' key")
        entries.append(
            ScriptEntry(
                content=str(item["content"]),
                task=item.get("task"),
                phase=item.get("phase"),
                subtask=item.get("subtask"),
                round=int(item["round"]) if "round" in item and item["round"] is not None else None,
                speaker=item.get("speaker"),
                prompt_tokens=int(item.get("prompt_tokens", 0)),
                completion_tokens=int(item.get("completion_tokens", 0)),
            )
        )
    return entries


# --- live HTTP backend ------------------------------------------------------

class HttpBackend:
    """Client for the POST {base_url}/chat/completions wire protocol.

    Transient transport failures (connection errors, timeouts, 429, 5xx) are
    retried with exponential backoff: delay = backoff_base * 2**attempt.
    """

    deterministic = False

    RETRYABLE_STATUS = {429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        model: str = "",
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._session = requests.Session()

    @classmethod
    def from_env(cls, **kwargs) -> "HttpBackend":
        base_url = os.environ.get(ENV_BASE_URL)
        if not base_url:
            raise BackendError(f"{ENV_BASE_URL} is not set; cannot reach a live backend")
        return cls(
            base_url=base_url,
            model=os.environ.get(ENV_MODEL, ""),
            api_key=os.environ.get(ENV_API_KEY),
            **kwargs,
        )

    def clone(self) -> "HttpBackend":
        return HttpBackend(
            self.base_url, self.model, self.api_key, self.timeout,
            self.max_retries, self.backoff_base, self._sleep,
        )

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, endpoint: str, payload: dict) -> dict:
        url = f"{self.base_url}{endpoint}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                response = self._session.post(
                    url, json=payload, headers=self._headers(), timeout=self.timeout
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
            else:
                if response.status_code == 200:
                    return response.json()
                if response.status_code not in self.RETRYABLE_STATUS:
                    raise BackendError(
                        f"provider error {response.status_code}: {response.text[:500]}"
                    )
                last_error = BackendError(
                    f"provider error {response.status_code}: {response.text[:200]}"
                )
            if attempt < self.max_retries:
                self._sleep(self.backoff_base * (2 ** attempt))
        raise BackendError(f"backend unreachable after {self.max_retries + 1} attempts: {last_error}")

    def complete(self, request: ChatRequest) -> ChatResult:
        payload = {
            "model": request.model or self.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
        }
        started = time.monotonic()
        data = self._post("/chat/completions", payload)
        latency = time.monotonic() - started
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat-completions response: {exc}") from exc
        usage = data.get("usage") or {}
        return ChatResult(
            content=content,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
            latency=latency,
        )

    def embed(self, text: str) -> EmbeddingResult:
        data = self._post("/embeddings", {"model": self.model, "input": text})
        try:
            vector = np.asarray(data["data"][0]["embedding"], dtype=float)
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed embeddings response: {exc}") from exc
        if not np.all(np.isfinite(vector)):
            raise BackendError("embedding vector contains non-finite components")
        return EmbeddingResult(vector=vector, dimension=vector.shape[0])


# --- offline embedder -------------------------------------------------------

class HashingEmbedder:
    """Deterministic bag-of-terms embedder.

    Terms are lowercase ``[a-z0-9_]+`` runs; each term's count lands at index
    sha256(term) mod dimension. Word order never matters, and with a sparse
    enough vocabulary relative to the dimension the cosine of two vectors
    equals the plain term-frequency cosine exactly.
    """

    def __init__(self, dimension: int = 2 ** 18):
        if dimension <= 0:
            raise ChainforgeError("embedding dimension must be positive")
        self.dimension = dimension

    @staticmethod
    def terms(text: str) -> Counter:
        return Counter(_TERM_RE.findall(text.lower()))

    def term_index(self, term: str) -> int:
        digest = hashlib.sha256(term.encode("utf-8")).hexdigest()
        return int(digest[:16], 16) % self.dimension

    def embed(self, text: str) -> EmbeddingResult:
        if not text or not text.strip():
            raise ChainforgeError("cannot embed empty text")
        vector = np.zeros(self.dimension, dtype=float)
        for term, count in self.terms(text).items():
            vector[self.term_index(term)] += count
        return EmbeddingResult(vector=vector, dimension=self.dimension)


def embed_text(embedder, text: str) -> EmbeddingResult:
    """Embed non-empty text with whichever provider is configured."""
    if not text or not text.strip():
        raise ChainforgeError("cannot embed empty text")
    return embedder.embed(text)


def resolve_backend(spec: str, sleep: Callable[[float], None] = time.sleep) -> Backend:
    """Turn a ``scripted:PATH`` or ``http`` selector into a backend."""
    if spec.startswith("scripted:"):
        return ScriptedBackend.from_file(spec.split(":", 1)[1])
    if spec == "http":
        return HttpBackend.from_env(sleep=sleep)
    raise BackendError(f"unknown backend selector {spec!r} (use scripted:PATH or http)")
