"""Inference endpoint clients: OpenAI-style HTTP (chat/completions) and a scripted mock."""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal
from urllib.parse import urlparse

import httpx

from radlabel.prompts import PromptBundle

log = logging.getLogger(__name__)

TRANSIENT_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


class ClientError(RuntimeError):
    pass


class AuthMissingError(ClientError):
    pass


class ModeMismatchError(ClientError):
    pass


class ExhaustedRetriesError(ClientError):
    def __init__(self, attempts: int, last_status: int | str | None):
        self.attempts = attempts
        self.last_status = last_status
        super().__init__(f"exhausted retries after {attempts} attempt(s); last status: {last_status}")


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    top_p: float = 0.95
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    wire_mode: Literal["chat", "completion"] = "chat"
    auth_env_var: str | None = None
    timeout: float = 120.0
    max_retries: int = 4
    backoff_initial: float = 1.0
    backoff_multiplier: float = 2.0
    requests_per_second: float | None = None
    params: GenerationParams = field(default_factory=GenerationParams)
    mock: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        if self.wire_mode not in ("chat", "completion"):
            raise ValueError(f"wire_mode must be chat or completion, got {self.wire_mode!r}")
        parsed = urlparse(self.base_url)
        if parsed.scheme not in ("http", "https", "mock") or not (parsed.netloc or parsed.scheme == "mock"):
            raise ValueError(f"malformed base_url {self.base_url!r}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EndpointConfig:
        data = dict(data)
        backoff = data.pop("backoff", None) or {}
        params = GenerationParams(**data.pop("generation", {}))
        return cls(
            backoff_initial=backoff.get("initial", 1.0),
            backoff_multiplier=backoff.get("multiplier", 2.0),
            params=params,
            **data,
        )

    def to_dict(self) -> dict[str, Any]:
        """Serializable form. Holds the credential variable name, never its value."""
        return {
            "base_url": self.base_url,
            "model_name": self.model_name,
            "wire_mode": self.wire_mode,
            "auth_env_var": self.auth_env_var,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "backoff": {"initial": self.backoff_initial, "multiplier": self.backoff_multiplier},
            "requests_per_second": self.requests_per_second,
            "generation": self.params.to_dict(),
            **({"mock": dict(self.mock)} if self.mock is not None else {}),
        }


def load_endpoint(path: str | Path) -> EndpointConfig:
    return EndpointConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class BackendResponse:
    raw_text: str | None
    finish_reason: str | None
    latency_ms: float
    attempt_count: int
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.raw_text is not None

    @property
    def truncated(self) -> bool:
        return self.finish_reason == "length"


class TokenBucket:
    """Thread-safe token bucket; ``acquire`` blocks until a token is free."""

    def __init__(self, rate: float, burst: int = 1, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = max(1, burst)
        self._tokens = float(self.capacity)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


def build_payload(endpoint: EndpointConfig, params: GenerationParams, prompt: PromptBundle) -> dict[str, Any]:
    body: dict[str, Any] = {"model": endpoint.model_name}
    if endpoint.wire_mode == "chat":
        body["messages"] = [{"role": r, "content": c} for r, c in prompt.chat_messages or ()]
    else:
        body["prompt"] = prompt.raw_text
    body.update(
        temperature=params.temperature,
        top_p=params.top_p,
        frequency_penalty=params.frequency_penalty,
        presence_penalty=params.presence_penalty,
        max_tokens=params.max_tokens,
    )
    return body


def _first_choice(data: Mapping[str, Any], wire_mode: str) -> tuple[str, str | None]:
    choice = data["choices"][0]
    if wire_mode == "chat":
        text = choice["message"]["content"]
    else:
        text = choice["text"]
    return text if text is not None else "", choice.get("finish_reason")


class HttpBackend:
    """Client for OpenAI-compatible ``/chat/completions`` and ``/completions`` servers.

    Shareable across worker threads; retry state is per call.
    """

    def __init__(
        self,
        endpoint: EndpointConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        env: Mapping[str, str] | None = None,
    ):
        self.endpoint = endpoint
        self._sleep = sleep
        env = os.environ if env is None else env
        headers = {"Content-Type": "application/json"}
        if endpoint.auth_env_var:
            token = env.get(endpoint.auth_env_var)
            if not token:
                raise AuthMissingError(f"auth missing: environment variable {endpoint.auth_env_var} is not set")
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=endpoint.base_url.rstrip("/"),
            headers=headers,
            timeout=endpoint.timeout,
            transport=transport,
        )
        self._bucket = (
            TokenBucket(endpoint.requests_per_second, burst=4, sleep=sleep)
            if endpoint.requests_per_second
            else None
        )

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> HttpBackend:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def generate(self, prompt: PromptBundle, params: GenerationParams | None = None) -> BackendResponse:
        ep = self.endpoint
        params = params or ep.params
        if prompt.wire_mode != ep.wire_mode:
            raise ModeMismatchError(f"mode mismatch: prompt is {prompt.wire_mode}, endpoint is {ep.wire_mode}")
        path = "/chat/completions" if ep.wire_mode == "chat" else "/completions"
        # serialized once so every retry sends identical bytes
        body = json.dumps(build_payload(ep, params, prompt), ensure_ascii=False).encode("utf-8")
        start = time.monotonic()
        delay = ep.backoff_initial
        last_status: int | str | None = None
        attempts = ep.max_retries + 1
        for attempt in range(1, attempts + 1):
            if self._bucket is not None:
                self._bucket.acquire()
            try:
                resp = self._client.post(path, content=body)
            except httpx.TimeoutException:
                last_status = "timeout"
            except httpx.TransportError as exc:
                last_status = type(exc).__name__
            else:
                if resp.status_code == 200:
                    text, finish = _first_choice(resp.json(), ep.wire_mode)
                    latency = (time.monotonic() - start) * 1000
                    log.info("report=%s status=200 attempts=%d latency_ms=%.0f finish=%s",
                             prompt.report_id, attempt, latency, finish)
                    return BackendResponse(text, finish, latency, attempt)
                last_status = resp.status_code
                if resp.status_code not in TRANSIENT_STATUS:
                    break
            log.info("report=%s attempt=%d/%d failed status=%s", prompt.report_id, attempt, attempts, last_status)
            if attempt < attempts:
                self._sleep(delay)
                delay *= ep.backoff_multiplier
        raise ExhaustedRetriesError(attempt, last_status)


class MockBackend:
    """Deterministic backend answering from a report-id -> text script."""

    def __init__(self, script: Mapping[str, str], default: str = "{}", finish_reasons: Mapping[str, str] | None = None):
        self.script = dict(script)
        self.default = default
        self.finish_reasons = dict(finish_reasons or {})

    @classmethod
    def from_config(cls, mock: Mapping[str, Any] | None, base_dir: Path | None = None) -> MockBackend:
        mock = mock or {}
        script: dict[str, str] = dict(mock.get("answers", {}))
        finish: dict[str, str] = {}
        path = mock.get("script")
        if path:
            p = Path(path)
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            with open(p, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        script[str(rec["id"])] = rec["text"]
                        if rec.get("finish_reason"):
                            finish[str(rec["id"])] = rec["finish_reason"]
        return cls(script, mock.get("default", "{}"), finish)

    def generate(self, prompt: PromptBundle, params: GenerationParams | None = None) -> BackendResponse:
        return mock_generate(self.script, prompt, default=self.default, finish_reasons=self.finish_reasons)

    def close(self) -> None:
        pass


def mock_generate(
    script: Mapping[str, str],
    prompt: PromptBundle,
    default: str = "{}",
    finish_reasons: Mapping[str, str] | None = None,
) -> BackendResponse:
    rid = prompt.report_id
    if rid is None:
        raise ValueError("mock backend needs the report id in prompt metadata")
    text = script.get(rid, default)
    finish = (finish_reasons or {}).get(rid, "stop")
    return BackendResponse(text, finish, 0.0, 1)
