"""Loopback chat-completion server with scriptable latency, for offline probe tests.

Requests whose user message scores below ``ppl_threshold`` on the unigram proxy are
treated as attack prompts and delayed ``attack_ratio`` times longer than the rest.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from ..defense import ppl_proxy


@dataclass
class MockLog:
    index: int
    kind: str  # "attack" | "normal"
    stream: bool
    latency: float
    status: int


@dataclass
class MockConfig:
    base_latency: float = 0.05
    attack_ratio: float = 3.0
    noise: float = 0.0  # std-dev of the multiplicative latency factor
    seed: int = 0
    ppl_threshold: float = 2.0
    model: str = "mock-moe"
    expected_token: str | None = None
    # request index -> HTTP status to return instead of a completion
    fail_statuses: dict[int, int] = field(default_factory=dict)


def _user_text(body: dict) -> str:
    msgs = body.get("messages") or []
    users = [m.get("content", "") for m in msgs if isinstance(m, dict) and m.get("role") == "user"]
    return users[-1] if users else ""


class _Handler(BaseHTTPRequestHandler):
    server_version = "MockMoE/0.1"
    protocol_version = "HTTP/1.0"

    def log_message(self, *args):  # keep test output quiet
        pass

    def _json(self, status: int, obj: dict):
        data = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path.rstrip("/").endswith("/models"):
            self._json(200, {"object": "list", "data": [{"id": self.server.mock.config.model, "object": "model"}]})
        else:
            self._json(404, {"error": "not found"})

    def do_POST(self):
        mock: MockEndpoint = self.server.mock
        cfg = mock.config
        if not self.path.rstrip("/").endswith("/chat/completions"):
            self._json(404, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self._json(400, {"error": "invalid json"})
            return
        units = _user_text(body).split()
        kind = "attack" if units and ppl_proxy(units) < cfg.ppl_threshold else "normal"
        stream = bool(body.get("stream"))
        index, factor = mock._next(kind)

        if cfg.expected_token is not None and self.headers.get("Authorization") != f"Bearer {cfg.expected_token}":
            mock._record(MockLog(index, kind, stream, 0.0, 401))
            self._json(401, {"error": "unauthorized"})
            return
        if index in cfg.fail_statuses:
            status = cfg.fail_statuses[index]
            mock._record(MockLog(index, kind, stream, 0.0, status))
            self._json(status, {"error": "scripted failure"})
            return

        latency = cfg.base_latency * (cfg.attack_ratio if kind == "attack" else 1.0) * factor
        mock._record(MockLog(index, kind, stream, latency, 200))
        time.sleep(latency)
        created = int(time.time())
        try:
            if stream:
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                self.end_headers()
                chunk = {
                    "id": f"chatcmpl-{index}",
                    "object": "chat.completion.chunk",
                    "created": created,
                    "model": cfg.model,
                    "choices": [{"index": 0, "delta": {"role": "assistant", "content": "ok"}, "finish_reason": None}],
                }
                self.wfile.write(f"data: {json.dumps(chunk)}\n\n".encode())
                self.wfile.flush()
                chunk["choices"][0].update(delta={}, finish_reason="length")
                self.wfile.write(f"data: {json.dumps(chunk)}\n\ndata: [DONE]\n\n".encode())
            else:
                self._json(200, {
                    "id": f"chatcmpl-{index}",
                    "object": "chat.completion",
                    "created": created,
                    "model": cfg.model,
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": "ok"}, "finish_reason": "length"}],
                    "usage": {"prompt_tokens": len(units), "completion_tokens": 1, "total_tokens": len(units) + 1},
                })
        except (BrokenPipeError, ConnectionResetError):
            pass


class MockEndpoint:
    """Context manager running the server on an ephemeral loopback port."""

    def __init__(self, config: MockConfig | None = None, host: str = "127.0.0.1", port: int = 0, **kwargs):
        self.config = config or MockConfig(**kwargs)
        self._rng = np.random.default_rng(self.config.seed)
        self._lock = threading.Lock()
        self._count = 0
        self.log: list[MockLog] = []
        self._server = ThreadingHTTPServer((host, port), _Handler)
        self._server.daemon_threads = True
        self._server.mock = self
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1"

    def _next(self, kind: str) -> tuple[int, float]:
        with self._lock:
            i = self._count
            self._count += 1
            f = 1.0
            if self.config.noise:
                f = max(0.1, 1.0 + self.config.noise * self._rng.standard_normal())
            return i, f

    def _record(self, entry: MockLog):
        with self._lock:
            self.log.append(entry)

    @property
    def request_count(self) -> int:
        return self._count

    def kinds(self) -> list[str]:
        return [e.kind for e in sorted(self.log, key=lambda e: e.index)]

    def start(self) -> "MockEndpoint":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def serve_forever(self):
        self._server.serve_forever()
