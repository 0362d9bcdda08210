"""LLM provider clients: deterministic mocks, trace replay, and a generic HTTP completion client."""

from __future__ import annotations

import hashlib
import inspect
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .errors import (DataError, ProviderBusy, ProviderError, ProviderHTTPError, ProviderTimeout,
                     RetriesExhausted, UnknownQuery)
from .money import Money, ProviderKind, ProviderSpec, Usage, parse_money
from .trace import TraceRecord


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: float = 0.1  # seconds before the 2nd attempt; doubles each retry

    def __post_init__(self):
        if self.max_attempts < 1:
            raise DataError("max_attempts must be >= 1")


@dataclass(frozen=True)
class CompletionRequest:
    llm_id: str
    prompt: str
    max_output_tokens: int = 256
    timeout: float = 30.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self):
        if self.max_output_tokens < 1:
            raise DataError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    usage: Usage
    latency: float = 0.0
    provider_reported_cost: Money | None = None
    attempts: int = 1


@dataclass(frozen=True)
class HealthStatus:
    healthy: bool
    reason: str = ""
    checked_at: float = 0.0


class Provider:
    spec: ProviderSpec

    @property
    def llm_id(self) -> str:
        return self.spec.llm_id

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        raise NotImplementedError

    def health_check(self) -> HealthStatus:
        return HealthStatus(True, "ok", time.time())


def last_word(prompt: str) -> str:
    words = prompt.split()
    return words[-1] if words else ""


def hashed_choice(labels: Sequence[str], seed: int = 0) -> Callable[[str, str], str]:
    """Rule picking a label from a digest of (seed, llm_id, prompt)."""
    def rule(llm_id: str, prompt: str) -> str:
        h = hashlib.blake2b(f"{seed}\x1f{llm_id}\x1f{prompt}".encode(), digest_size=8).digest()
        return labels[int.from_bytes(h, "big") % len(labels)]
    return rule


class MockProvider(Provider):
    """Deterministic provider: ``rule(llm_id, prompt)`` or ``rule(prompt)`` gives the text.

    Usage defaults to whitespace token counts of prompt and answer unless
    ``usage`` is a fixed Usage or a callable (prompt, text) -> Usage.
    """

    def __init__(self, spec: ProviderSpec, rule: Callable | None = None,
                 usage: Usage | Callable[[str, str], Usage] | None = None):
        self.spec = spec
        self.rule = rule or last_word
        self._two_arg = len(inspect.signature(self.rule).parameters) >= 2
        self.usage = usage
        self.calls = 0
        self._lock = threading.Lock()

    def _text(self, prompt: str) -> str:
        if self._two_arg:
            return self.rule(self.spec.llm_id, prompt)
        return self.rule(prompt)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            self.calls += 1
        text = self._text(request.prompt)
        if isinstance(self.usage, Usage):
            usage = self.usage
        elif callable(self.usage):
            usage = self.usage(request.prompt, text)
        else:
            usage = Usage(len(request.prompt.split()), len(text.split()))
        return CompletionResponse(text, usage)


class TraceReplayProvider(Provider):
    """Serves one LLM's recorded answers, looked up by exact query text."""

    def __init__(self, spec: ProviderSpec, records: Iterable[TraceRecord]):
        self.spec = spec
        self._by_query = {}
        for rec in records:
            resp = rec.responses.get(spec.llm_id)
            if resp is not None:
                self._by_query.setdefault(rec.query_text, resp)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        try:
            resp = self._by_query[request.prompt]
        except KeyError:
            raise UnknownQuery(f"{self.spec.llm_id}: query not in trace: {request.prompt[:80]!r}") from None
        return CompletionResponse(resp.answer_text, resp.usage)


def env_prefix(provider_name: str) -> str:
    return "FRUGAL_" + re.sub(r"[^A-Za-z0-9]+", "_", provider_name).strip("_").upper()


_TRANSIENT = {408, 425, 429, 500, 502, 503, 504}


class HttpProvider(Provider):
    """Generic completion client: POST {base}/v1/completions {model, prompt, max_tokens}.

    Expects {"text", "usage": {"prompt_tokens", "completion_tokens"}} back, with
    an optional "cost_usd". Connection errors, timeouts, 408/425/429 and 5xx
    are retried with exponential backoff; other statuses fail at once.
    """

    def __init__(self, spec: ProviderSpec, base_url: str | None = None, api_key: str | None = None,
                 max_in_flight: int = 4, block: bool = True, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.spec = spec
        prefix = env_prefix(spec.provider or spec.llm_id)
        self.base_url = (base_url or os.environ.get(prefix + "_BASE_URL", "")).rstrip("/")
        if not self.base_url:
            raise DataError(f"{spec.llm_id}: no base URL (set {prefix}_BASE_URL)")
        self._api_key = api_key if api_key is not None else os.environ.get(prefix + "_API_KEY")
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._block = block
        self._client = client or httpx.Client()
        self._sleep = sleep
        self._lock = threading.Lock()
        self.telemetry = {"requests": 0, "attempts": 0, "failures": 0}

    def _headers(self) -> dict:
        h = {"content-type": "application/json"}
        if self._api_key:
            h["authorization"] = f"Bearer {self._api_key}"
        return h

    def _attempt(self, request: CompletionRequest) -> CompletionResponse:
        body = json.dumps({"model": request.llm_id, "prompt": request.prompt,
                           "max_tokens": request.max_output_tokens}, ensure_ascii=False)
        t0 = time.perf_counter()
        try:
            r = self._client.post(self.base_url + "/v1/completions", content=body.encode("utf-8"),
                                  headers=self._headers(), timeout=request.timeout)
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(f"{self.spec.llm_id}: timed out after {request.timeout}s") from exc
        except httpx.TransportError as exc:
            raise ProviderError(f"{self.spec.llm_id}: transport error: {exc}") from exc
        if r.status_code != 200:
            raise ProviderHTTPError(r.status_code, r.text[:200])
        try:
            payload = r.json()
            usage = payload["usage"]
            resp_usage = Usage(int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
            text = payload["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderHTTPError(r.status_code, f"malformed completion body: {exc}") from None
        reported = parse_money(str(payload["cost_usd"])) if payload.get("cost_usd") is not None else None
        return CompletionResponse(text, resp_usage, time.perf_counter() - t0, reported)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        if not self._slots.acquire(blocking=self._block):
            raise ProviderBusy(f"{self.spec.llm_id}: too many requests in flight")
        try:
            with self._lock:
                self.telemetry["requests"] += 1
            last: Exception | None = None
            for attempt in range(1, request.retry.max_attempts + 1):
                with self._lock:
                    self.telemetry["attempts"] += 1
                try:
                    resp = self._attempt(request)
                    return CompletionResponse(resp.text, resp.usage, resp.latency,
                                              resp.provider_reported_cost, attempt)
                except ProviderHTTPError as exc:
                    if exc.status not in _TRANSIENT:
                        raise
                    last = exc
                except ProviderError as exc:
                    last = exc
                if attempt < request.retry.max_attempts:
                    self._sleep(request.retry.backoff * 2 ** (attempt - 1))
            with self._lock:
                self.telemetry["failures"] += 1
            raise RetriesExhausted(request.retry.max_attempts, last)
        finally:
            self._slots.release()

    def health_check(self) -> HealthStatus:
        try:
            r = self._client.get(self.base_url + "/v1/healthz", timeout=2.0, headers=self._headers())
        except httpx.HTTPError as exc:
            return HealthStatus(False, f"unreachable: {exc.__class__.__name__}", time.time())
        if r.status_code == 200:
            return HealthStatus(True, "ok", time.time())
        return HealthStatus(False, f"HTTP {r.status_code}", time.time())

    def close(self) -> None:
        self._client.close()


def complete(provider: Provider, request: CompletionRequest) -> CompletionResponse:
    return provider.complete(request)


def health_check(provider: Provider) -> HealthStatus:
    return provider.health_check()


def build_providers(marketplace: Mapping[str, ProviderSpec], records: Sequence[TraceRecord] | None = None,
                    mock_rule: Callable | None = None, **http_kwargs) -> dict[str, Provider]:
    """One provider per marketplace entry, by its declared kind."""
    out: dict[str, Provider] = {}
    for llm_id, spec in marketplace.items():
        if spec.provider_kind is ProviderKind.MOCK:
            out[llm_id] = MockProvider(spec, mock_rule)
        elif spec.provider_kind is ProviderKind.TRACE_REPLAY:
            if records is None:
                raise DataError(f"{llm_id} is a trace_replay provider but no trace was given")
            out[llm_id] = TraceReplayProvider(spec, records)
        else:
            out[llm_id] = HttpProvider(spec, **http_kwargs)
    return out
