"""Chat-completion backends and call accounting.

Every model call in the system goes through a ``Backend``. Two implementations
ship here: ``HttpBackend`` speaks the common chat-completions JSON protocol
over HTTP with rate limiting and retries, and ``MockBackend`` replays an
ordered fixture queue for deterministic offline runs and tests.

Call accounting is the caller's ledger, not the backend's: callers pass a
``CallLedger`` into ``complete`` and the backend appends one entry per network
attempt (retries included, flagged as such), so ``total_calls`` reflects what
was actually spent.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence, runtime_checkable

from .errors import (
    BackendError,
    FixtureError,
    FixtureExhaustedError,
    FixtureOrderError,
    InputError,
    LedgerInvariantError,
    PreconditionError,
    ProtocolError,
    RetriesExhaustedError,
)
from .util import canonical_json, sha256_hex

_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    """One turn of a chat prompt."""

    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise PreconditionError(f"unknown message role: {self.role!r}")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    """A fully-specified completion request.

    ``sample_count`` asks the backend for that many independent completions of
    the same prompt in one call (the n parameter of chat-completions APIs).
    """

    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    sample_count: int = 1
    stop: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "stop", tuple(self.stop))
        if not self.messages:
            raise PreconditionError("request needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise PreconditionError(f"temperature out of range: {self.temperature}")
        if self.max_tokens < 1:
            raise PreconditionError(f"max_tokens must be positive: {self.max_tokens}")
        if self.sample_count < 1:
            raise PreconditionError(f"sample_count must be positive: {self.sample_count}")

    def digest(self) -> str:
        payload = {
            "messages": [m.to_dict() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "sample_count": self.sample_count,
            "stop": list(self.stop),
        }
        return sha256_hex(canonical_json(payload))


@dataclass(frozen=True)
class ChatResponse:
    """Completions returned for one request."""

    completions: tuple[str, ...]
    model: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "completions", tuple(self.completions))
        if not self.completions:
            raise ProtocolError("response carried no completions")


@dataclass(frozen=True)
class LedgerEntry:
    """One backend attempt: which stage asked, for what, how long it took."""

    stage: str
    digest: str
    latency: float
    retry: bool = False


class CallLedger:
    """Append-only record of backend attempts, safe for concurrent writers."""

    def __init__(self) -> None:
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def append(self, entry: LedgerEntry) -> None:
        if not entry.stage:
            raise LedgerInvariantError("ledger entry needs a stage label")
        if entry.latency < 0:
            raise LedgerInvariantError(f"negative latency: {entry.latency}")
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    @property
    def total_calls(self) -> int:
        with self._lock:
            return len(self._entries)

    def stage_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for entry in self.entries:
            counts[entry.stage] = counts.get(entry.stage, 0) + 1
        return counts


@runtime_checkable
class Backend(Protocol):
    """Anything that can answer a ChatRequest."""

    supports_batch: bool

    def complete(
        self,
        request: ChatRequest,
        *,
        stage: str,
        ledger: CallLedger | None = None,
    ) -> ChatResponse: ...


def sample_completions(
    backend: Backend,
    request: ChatRequest,
    *,
    stage: str,
    ledger: CallLedger | None = None,
) -> list[str]:
    """Collect ``request.sample_count`` completions, batching when possible.

    A batching backend answers the whole request in one call. Otherwise the
    request is replayed sequentially with ``sample_count=1``, which costs one
    ledger entry per sample; the accounting stays honest either way.
    """
    if backend.supports_batch:
        response = backend.complete(request, stage=stage, ledger=ledger)
        if len(response.completions) != request.sample_count:
            raise ProtocolError(
                f"asked for {request.sample_count} completions, "
                f"got {len(response.completions)}"
            )
        return list(response.completions)

    single = ChatRequest(
        messages=request.messages,
        temperature=request.temperature,
        max_tokens=request.max_tokens,
        sample_count=1,
        stop=request.stop,
    )
    out: list[str] = []
    for _ in range(request.sample_count):
        response = backend.complete(single, stage=stage, ledger=ledger)
        out.append(response.completions[0])
    return out


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for ``HttpBackend``.

    The API key is never stored here: ``api_key_env`` names the environment
    variable it is read from at connection time.
    """

    base_url: str
    model: str
    api_key_env: str = "PSYCHE_API_KEY"
    timeout_seconds: float = 120.0
    max_retries: int = 3
    rate_limit_per_minute: int = 60

    def __post_init__(self) -> None:
        if not self.base_url:
            raise InputError("backend config needs a base_url")
        if not self.model:
            raise InputError("backend config needs a model")
        if self.timeout_seconds <= 0:
            raise InputError("timeout_seconds must be positive")
        if self.max_retries < 0:
            raise InputError("max_retries cannot be negative")
        if self.rate_limit_per_minute < 1:
            raise InputError("rate_limit_per_minute must be positive")


_CONFIG_FIELDS = {
    "base_url",
    "model",
    "api_key_env",
    "timeout_seconds",
    "max_retries",
    "rate_limit_per_minute",
}


def load_backend_config(path: str | Path) -> BackendConfig:
    """Read a BackendConfig from a JSON file, rejecting unknown keys."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read backend config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InputError(f"backend config {path} must be a JSON object")
    unknown = set(raw) - _CONFIG_FIELDS
    if unknown:
        raise InputError(f"unknown backend config keys: {sorted(unknown)}")
    return BackendConfig(**raw)


class _TokenBucket:
    """Classic token bucket: ``rate`` tokens per minute, burst up to ``rate``."""

    def __init__(
        self,
        rate_per_minute: int,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self._rate = rate_per_minute / 60.0
        self._capacity = float(rate_per_minute)
        self._tokens = float(rate_per_minute)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self._clock()
            self._tokens = min(self._capacity, self._tokens + (now - self._last) * self._rate)
            self._last = now
            if self._tokens >= 1.0:
                self._tokens -= 1.0
                return
            wait = (1.0 - self._tokens) / self._rate
            self._tokens = 0.0
        self._sleep(wait)


class HttpBackend:
    """Chat-completions client over HTTP.

    Talks the widely-used ``POST {base_url}/chat/completions`` JSON protocol.
    Rate limiting, timeouts, and bounded retries with exponential backoff are
    built in; every attempt (retries included) is written to the caller's
    ledger so spend is visible even when calls fail.
    """

    supports_batch = True

    _RETRY_STATUS = frozenset({408, 429, 500, 502, 503, 504})

    def __init__(
        self,
        config: BackendConfig,
        *,
        session: Any = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        import requests

        api_key = os.environ.get(config.api_key_env, "")
        if not api_key:
            raise BackendError(
                f"no API key: set the {config.api_key_env} environment variable"
            )
        self.config = config
        self._session = session if session is not None else requests.Session()
        self._session.headers.update(
            {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
        )
        self._clock = clock
        self._sleep = sleep
        self._bucket = _TokenBucket(config.rate_limit_per_minute, clock=clock, sleep=sleep)

    def _payload(self, request: ChatRequest) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "model": self.config.model,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "n": request.sample_count,
        }
        if request.stop:
            payload["stop"] = list(request.stop)
        return payload

    def _parse(self, body: Any, expected: int) -> ChatResponse:
        try:
            choices = body["choices"]
            completions = tuple(choice["message"]["content"] for choice in choices)
            model = body.get("model", "")
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {exc}") from exc
        if len(completions) != expected:
            raise ProtocolError(
                f"asked for {expected} completions, got {len(completions)}"
            )
        return ChatResponse(completions=completions, model=model)

    def complete(
        self,
        request: ChatRequest,
        *,
        stage: str,
        ledger: CallLedger | None = None,
    ) -> ChatResponse:
        import requests

        url = self.config.base_url.rstrip("/") + "/chat/completions"
        payload = self._payload(request)
        digest = request.digest()
        attempts = self.config.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            self._bucket.acquire()
            started = self._clock()
            try:
                response = self._session.post(
                    url, json=payload, timeout=self.config.timeout_seconds
                )
            except requests.RequestException as exc:
                last_error = exc
                self._record(ledger, stage, digest, started, retry=attempt > 0)
                self._backoff(attempt, attempts)
                continue
            self._record(ledger, stage, digest, started, retry=attempt > 0)
            if response.status_code == 200:
                return self._parse(response.json(), request.sample_count)
            if response.status_code in self._RETRY_STATUS:
                last_error = BackendError(f"HTTP {response.status_code}")
                self._backoff(attempt, attempts)
                continue
            raise BackendError(f"HTTP {response.status_code}: {response.text[:200]}")
        raise RetriesExhaustedError(
            f"gave up after {attempts} attempts: {last_error}", attempts=attempts
        )

    def _record(
        self,
        ledger: CallLedger | None,
        stage: str,
        digest: str,
        started: float,
        *,
        retry: bool,
    ) -> None:
        if ledger is not None:
            latency = max(0.0, self._clock() - started)
            ledger.append(LedgerEntry(stage=stage, digest=digest, latency=latency, retry=retry))

    def _backoff(self, attempt: int, attempts: int) -> None:
        if attempt + 1 < attempts:
            self._sleep(min(30.0, 1.0 * 2**attempt))


@dataclass
class _Fixture:
    stage: str
    completions: tuple[str, ...]


class MockBackend:
    """Replays a scripted queue of completions, strictly in order.

    The queue is a sequence of ``(stage, completions)`` pairs. Each
    ``complete`` call consumes exactly one fixture; a stage mismatch or an
    exhausted queue is an error rather than a silent wrong answer, so a test
    that drives the pipeline out of its expected call order fails loudly.
    Latency is recorded as 0.0 to keep transcripts byte-identical.
    """

    supports_batch = True

    def __init__(
        self,
        fixtures: Iterable[tuple[str, Sequence[str]]],
        *,
        supports_batch: bool = True,
    ) -> None:
        self._queue = [
            _Fixture(stage=stage, completions=tuple(completions))
            for stage, completions in fixtures
        ]
        self._served = 0
        self._lock = threading.Lock()
        self.supports_batch = supports_batch

    @property
    def remaining(self) -> int:
        with self._lock:
            return len(self._queue) - self._served

    def assert_exhausted(self) -> None:
        left = self.remaining
        if left:
            raise FixtureError(f"{left} fixture(s) left unconsumed")

    def complete(
        self,
        request: ChatRequest,
        *,
        stage: str,
        ledger: CallLedger | None = None,
    ) -> ChatResponse:
        with self._lock:
            if self._served >= len(self._queue):
                raise FixtureExhaustedError(f"no fixture left for stage {stage!r}")
            fixture = self._queue[self._served]
            if fixture.stage != stage:
                raise FixtureOrderError(expected=fixture.stage, got=stage)
            if len(fixture.completions) != request.sample_count:
                raise FixtureError(
                    f"fixture for {stage!r} has {len(fixture.completions)} "
                    f"completions, request wants {request.sample_count}"
                )
            self._served += 1
        if ledger is not None:
            ledger.append(
                LedgerEntry(stage=stage, digest=request.digest(), latency=0.0, retry=False)
            )
        return ChatResponse(completions=fixture.completions, model="mock")


def mock_from_json(path: str | Path) -> MockBackend:
    """Build a MockBackend from a JSON fixture file.

    Format: a list of ``{"stage": ..., "completions": [...]}`` objects, in the
    order the pipeline is expected to call them.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read fixtures {path}: {exc}") from exc
    if not isinstance(raw, list):
        raise InputError(f"fixture file {path} must be a JSON list")
    fixtures: list[tuple[str, Sequence[str]]] = []
    for i, item in enumerate(raw):
        if not isinstance(item, Mapping) or "stage" not in item or "completions" not in item:
            raise InputError(f"fixture {i} in {path} needs 'stage' and 'completions'")
        fixtures.append((item["stage"], list(item["completions"])))
    return MockBackend(fixtures)
