"""Uniform client layer for external model services.

Every adapter (VLM instructor/judge, LLM paraphraser, editing experts,
aesthetic scorer, detector) is called through one wire protocol: a single
request record in, a single response record out. Image content travels by
digest; bytes live in a shared blob store. The client adds retries with
exponential backoff, per-adapter rate limiting, and a content-addressed
on-disk response cache so pipelines can run fully offline against
deterministic mocks.
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import httpx

from .store import BlobStore
from .util import canonical_json, digest_of

logger = logging.getLogger(__name__)

REQUEST_KINDS = frozenset(
    {
        "vlm_instruct",
        "vlm_judge",
        "llm_text",
        "expert_edit",
        "expert_train",
        "expert_infer",
        "aesthetic",
        "detect",
    }
)

STATUS_OK = "ok"
STATUS_RETRYABLE = "retryable_error"
STATUS_FATAL = "fatal_error"
STATUS_SECURITY_FILTERED = "security_filtered"

ENV_URL = "EDITFORGE_ADAPTER_{id}_URL"
ENV_TOKEN = "EDITFORGE_ADAPTER_{id}_TOKEN"


class AdapterConfigError(Exception):
    """Misconfiguration: unknown adapter, duplicate registration, bad kind."""


@dataclass(frozen=True)
class AdapterRequest:
    adapter_id: str
    kind: str
    payload: dict
    request_digest: str = field(init=False)

    def __post_init__(self):
        if self.kind not in REQUEST_KINDS:
            raise AdapterConfigError(f"unknown request kind: {self.kind}")
        object.__setattr__(
            self,
            "request_digest",
            digest_of(
                {"adapter_id": self.adapter_id, "kind": self.kind, "payload": self.payload}
            ),
        )

    def to_record(self) -> dict:
        return {
            "adapter_id": self.adapter_id,
            "kind": self.kind,
            "payload": self.payload,
            "request_digest": self.request_digest,
        }


@dataclass
class AdapterResponse:
    status: str
    body: Optional[dict] = None
    latency_ms: int = 0
    attempt: int = 0

    def __post_init__(self):
        if self.status == STATUS_SECURITY_FILTERED:
            self.body = None

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    def to_record(self) -> dict:
        return {
            "status": self.status,
            "body": self.body,
            "latency_ms": self.latency_ms,
            "attempt": self.attempt,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AdapterResponse":
        return cls(
            status=rec["status"],
            body=rec.get("body"),
            latency_ms=rec.get("latency_ms", 0),
            attempt=rec.get("attempt", 0),
        )


class RateLimiter:
    """Token bucket: `rate` requests/second with a `burst` allowance."""

    def __init__(self, rate: float, burst: int):
        self.rate = rate
        self.burst = burst
        self._tokens = float(burst)
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class HttpTransport:
    """POST the request record to <base_url>/v1/call."""

    def __init__(self, base_url: str, token: str = ""):
        self.base_url = base_url.rstrip("/")
        self.token = token

    def send(self, request: AdapterRequest) -> dict:
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        resp = httpx.post(
            f"{self.base_url}/v1/call", json=request.to_record(), headers=headers, timeout=60.0
        )
        resp.raise_for_status()
        return resp.json()


class SubprocessTransport:
    """One request record line on stdin, one response record line on stdout."""

    def __init__(self, argv: list[str]):
        self.argv = argv

    def send(self, request: AdapterRequest) -> dict:
        proc = subprocess.run(
            self.argv,
            input=canonical_json(request.to_record()) + "\n",
            capture_output=True,
            text=True,
            check=True,
        )
        return json.loads(proc.stdout.splitlines()[0])


class MockTransport:
    """Wraps a deterministic behavior callable; counts calls for tests."""

    def __init__(self, behavior: Callable[[AdapterRequest], dict]):
        self.behavior = behavior
        self.call_count = 0

    def send(self, request: AdapterRequest) -> dict:
        self.call_count += 1
        result = self.behavior(request)
        if "status" not in result:
            result = {"status": STATUS_OK, "body": result}
        return result


class AdapterClient:
    """Shared entry point for all adapter calls.

    Safe for concurrent callers; the cache and rate limiters are shared.
    Only status=ok responses are cached, keyed by the request digest, so a
    replay is only ever served for a byte-identical canonical payload.
    """

    def __init__(
        self,
        cache_dir: Path | str,
        blobs: Optional[BlobStore] = None,
        retry_cap: int = 3,
        backoff_base: float = 0.5,
    ):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.blobs = blobs
        self.retry_cap = retry_cap
        self.backoff_base = backoff_base
        self._transports: dict[str, object] = {}
        self._limiters: dict[str, RateLimiter] = {}
        self._lock = threading.Lock()

    def register(self, adapter_id: str, transport, rate_limit: Optional[tuple[float, int]] = None):
        with self._lock:
            if adapter_id in self._transports:
                raise AdapterConfigError(f"adapter already registered: {adapter_id}")
            self._transports[adapter_id] = transport
            if rate_limit is not None:
                self._limiters[adapter_id] = RateLimiter(*rate_limit)
        return transport

    def register_mock(
        self,
        adapter_id: str,
        behavior: Callable[[AdapterRequest], dict],
        rate_limit: Optional[tuple[float, int]] = None,
    ) -> MockTransport:
        return self.register(adapter_id, MockTransport(behavior), rate_limit)

    def register_from_env(self, adapter_id: str, rate_limit=None):
        url = os.environ.get(ENV_URL.format(id=adapter_id.upper()))
        if not url:
            raise AdapterConfigError(
                f"no URL configured for adapter {adapter_id} "
                f"(set {ENV_URL.format(id=adapter_id.upper())})"
            )
        token = os.environ.get(ENV_TOKEN.format(id=adapter_id.upper()), "")
        return self.register(adapter_id, HttpTransport(url, token), rate_limit)

    def is_registered(self, adapter_id: str) -> bool:
        return adapter_id in self._transports

    def call(self, adapter_id: str, kind: str, payload: dict) -> AdapterResponse:
        if adapter_id not in self._transports:
            raise AdapterConfigError(f"adapter not registered: {adapter_id}")
        request = AdapterRequest(adapter_id=adapter_id, kind=kind, payload=payload)

        cache_path = self.cache_dir / f"{request.request_digest}.json"
        if cache_path.exists():
            cached = AdapterResponse.from_record(json.loads(cache_path.read_text()))
            cached.attempt = 0
            return cached

        limiter = self._limiters.get(adapter_id)
        transport = self._transports[adapter_id]

        response = AdapterResponse(status=STATUS_FATAL)
        for attempt in range(1, self.retry_cap + 1):
            if limiter is not None:
                limiter.acquire()
            start = time.monotonic()
            try:
                raw = transport.send(request)
                response = AdapterResponse.from_record(raw)
            except Exception as exc:  # transport failure is retryable
                logger.warning("adapter %s attempt %d failed: %s", adapter_id, attempt, exc)
                response = AdapterResponse(status=STATUS_RETRYABLE, body={"error": str(exc)})
            response.latency_ms = int((time.monotonic() - start) * 1000)
            response.attempt = attempt
            if response.status != STATUS_RETRYABLE:
                break
            if attempt < self.retry_cap:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))

        if response.status == STATUS_RETRYABLE:
            response = AdapterResponse(
                status=STATUS_FATAL,
                body={"error": "retry cap exceeded"},
                latency_ms=response.latency_ms,
                attempt=response.attempt,
            )
        if response.ok:
            tmp = cache_path.with_suffix(".tmp")
            tmp.write_text(canonical_json(response.to_record()))
            tmp.rename(cache_path)
        return response
