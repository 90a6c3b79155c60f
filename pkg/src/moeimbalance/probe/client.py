"""Black-box TTFT probing of a chat-completion endpoint.

Requests are sequential and capped by a hard budget; the tool measures latency
amplification and never sustains load.
"""

from __future__ import annotations

import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import httpx

from ..prompts import PromptSpec, chat_messages
from .stats import INCONCLUSIVE, classify_ratio, r_api_ci

log = logging.getLogger(__name__)

DEFAULT_AUTH_ENV = "MOEIMBALANCE_API_KEY"


class ProbeError(RuntimeError):
    pass


class BudgetExhausted(ProbeError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    auth_token: str | None = field(default=None, repr=False)
    max_new_tokens: int = 1
    request_timeout: float = 120.0
    inter_request_delay: float = 0.0
    max_requests: int = 50
    stream: bool = True
    max_retries: int = 1

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.max_requests < 0:
            raise ValueError("max_requests must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "EndpointConfig":
        """Config-file form. The token is read from the env var named by ``auth_env``."""
        for f in ("base_url", "model_name"):
            if f not in d:
                raise ValueError(f"endpoint config missing field {f!r}")
        token = os.environ.get(d.get("auth_env", DEFAULT_AUTH_ENV))
        keys = set(cls.__dataclass_fields__) - {"auth_token"}
        return cls(auth_token=token, **{k: d[k] for k in keys if k in d})

    @classmethod
    def from_file(cls, path) -> "EndpointConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"

    def headers(self) -> dict:
        h = {"Content-Type": "application/json"}
        if self.auth_token:
            h["Authorization"] = f"Bearer {self.auth_token}"
        return h


class RequestBudget:
    def __init__(self, limit: int):
        self.limit = limit
        self.used = 0

    @property
    def remaining(self) -> int:
        return self.limit - self.used

    def take(self):
        if self.used >= self.limit:
            raise BudgetExhausted(f"request budget of {self.limit} exhausted")
        self.used += 1


def _payload(endpoint: EndpointConfig, messages: list[dict]) -> dict:
    return {
        "model": endpoint.model_name,
        "messages": messages,
        "max_tokens": endpoint.max_new_tokens,
        "stream": endpoint.stream,
    }


def measure_ttft(
    endpoint: EndpointConfig,
    prompt: str | list[dict],
    client: httpx.Client | None = None,
    budget: RequestBudget | None = None,
) -> float:
    """One TTFT sample in seconds.

    Streaming: request start to the first ``data:`` event. Non-streaming: request start
    to the end of the response body. Failures raise :class:`ProbeError`.
    """
    messages = [{"role": "user", "content": prompt}] if isinstance(prompt, str) else prompt
    if budget is not None:
        budget.take()
    own = client is None
    client = client or httpx.Client(timeout=endpoint.request_timeout)
    try:
        t0 = time.perf_counter()
        if endpoint.stream:
            with client.stream("POST", endpoint.url, json=_payload(endpoint, messages), headers=endpoint.headers()) as r:
                if r.status_code != 200:
                    r.read()
                    raise ProbeError(f"HTTP {r.status_code}: {r.text[:200]}")
                for line in r.iter_lines():
                    if line.startswith("data:") and line[5:].strip() != "[DONE]":
                        return time.perf_counter() - t0
                raise ProbeError("stream ended without a data event")
        r = client.post(endpoint.url, json=_payload(endpoint, messages), headers=endpoint.headers())
        elapsed = time.perf_counter() - t0
        if r.status_code != 200:
            raise ProbeError(f"HTTP {r.status_code}: {r.text[:200]}")
        return elapsed
    except httpx.HTTPError as exc:
        raise ProbeError(f"{type(exc).__name__}: {exc}") from exc
    finally:
        if own:
            client.close()


@dataclass
class ProbeReport:
    attack_ttft: list[float] = field(default_factory=list)  # seconds
    normal_ttft: list[float] = field(default_factory=list)
    r_api_point: float | None = None
    r_api_lower95: float | None = None
    verdict: str = INCONCLUSIVE
    failures: list[dict] = field(default_factory=list)
    valid: bool = False
    invalid_reason: str | None = None
    mode: str = "streaming"
    confidence: float = 0.95
    requests_made: int = 0
    budget: int = 0
    not_sent: int = 0
    started_at: str | None = None
    finished_at: str | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "valid": self.valid,
            "invalid_reason": self.invalid_reason,
            "verdict": self.verdict,
            "r_api_point": self.r_api_point,
            "r_api_lower95": self.r_api_lower95,
            "confidence": self.confidence,
            "attack_ttft_ms": [t * 1000 for t in self.attack_ttft],
            "normal_ttft_ms": [t * 1000 for t in self.normal_ttft],
            "failures": self.failures,
            "requests_made": self.requests_made,
            "budget": self.budget,
            "not_sent": self.not_sent,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }


def interleave(attack: Sequence, normal: Sequence) -> list[tuple[str, int]]:
    """attack, normal, attack, ... then whatever remains of the longer arm."""
    order = []
    for i in range(max(len(attack), len(normal))):
        if i < len(attack):
            order.append(("attack", i))
        if i < len(normal):
            order.append(("normal", i))
    return order


def run_probe(
    endpoint: EndpointConfig,
    attack_specs: Sequence[PromptSpec],
    normal_specs: Sequence[PromptSpec],
    raw_path=None,
    confidence: float = 0.95,
    seed: int = 0,
    moe_threshold: float | None = None,
    dense_threshold: float | None = None,
    client: httpx.Client | None = None,
) -> ProbeReport:
    """Send interleaved attack/normal prompts and summarize the TTFT ratio.

    Each sample or failure is appended to ``raw_path`` (JSON Lines) as it happens.
    """
    if len(attack_specs) != len(normal_specs):
        warnings.warn("attack and normal arms have different sizes", stacklevel=2)
    report = ProbeReport(
        mode="streaming" if endpoint.stream else "non-streaming",
        confidence=confidence,
        budget=endpoint.max_requests,
        started_at=_now(),
    )
    budget = RequestBudget(endpoint.max_requests)
    arms = {"attack": attack_specs, "normal": normal_specs}
    samples = {"attack": report.attack_ttft, "normal": report.normal_ttft}
    failed = {"attack": 0, "normal": 0}
    sent = {"attack": 0, "normal": 0}
    raw = open(raw_path, "a", encoding="utf-8") if raw_path else None

    def persist(rec):
        if raw:
            raw.write(json.dumps(rec) + "\n")
            raw.flush()
            os.fsync(raw.fileno())

    own = client is None
    client = client or httpx.Client(timeout=endpoint.request_timeout)
    try:
        order = interleave(attack_specs, normal_specs)
        for n, (arm, i) in enumerate(order):
            if budget.remaining <= 0:
                report.not_sent = len(order) - n
                log.warning("budget exhausted; %d prompts not sent", report.not_sent)
                break
            messages = chat_messages(arms[arm][i])
            sent[arm] += 1
            ok = False
            for attempt in range(endpoint.max_retries + 1):
                if budget.remaining <= 0:
                    break
                try:
                    t = measure_ttft(endpoint, messages, client=client, budget=budget)
                except ProbeError as exc:
                    fail = {"arm": arm, "index": i, "attempt": attempt, "error": str(exc), "at": _now()}
                    report.failures.append(fail)
                    persist({"type": "failure", **fail})
                    continue
                samples[arm].append(t)
                persist({"type": "sample", "arm": arm, "index": i, "ttft_ms": t * 1000, "mode": report.mode, "at": _now()})
                ok = True
                break
            if not ok:
                failed[arm] += 1
            if endpoint.inter_request_delay and n + 1 < len(order):
                time.sleep(endpoint.inter_request_delay)
    finally:
        if own:
            client.close()
        if raw:
            raw.close()

    report.requests_made = budget.used
    assert budget.used <= endpoint.max_requests
    report.finished_at = _now()

    reasons = []
    for arm in ("attack", "normal"):
        if not samples[arm]:
            reasons.append(f"no {arm} samples")
        elif failed[arm] > 0.5 * sent[arm]:
            reasons.append(f"{failed[arm]}/{sent[arm]} {arm} prompts failed")
    if reasons:
        report.invalid_reason = "; ".join(reasons)
        return report

    report.valid = True
    report.r_api_point, report.r_api_lower95 = r_api_ci(report.attack_ttft, report.normal_ttft, confidence, seed=seed)
    kw = {}
    if moe_threshold is not None:
        kw["moe_threshold"] = moe_threshold
    if dense_threshold is not None:
        kw["dense_threshold"] = dense_threshold
    report.verdict = classify_ratio(report.r_api_point, report.r_api_lower95, **kw)
    return report


def write_report(report: ProbeReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
