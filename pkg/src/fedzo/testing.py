"""Loopback HTTP oracle server used by the test-suite and local demos."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable


def echo_zero(item: dict) -> float:
    return 0.0


def input_hash(item: dict) -> float:
    """Deterministic per-input value in [0, 1) so tests can check ordering."""
    digest = hashlib.sha256(json.dumps(item, sort_keys=True).encode()).digest()
    return int.from_bytes(digest[:6], "big") / float(1 << 48)


class LoopbackOracleServer:
    """Serve ``POST /evaluate`` on 127.0.0.1 with a per-input scoring function.

    ``mode`` injects faults: ``"short"`` drops the last loss, ``"slow"``
    sleeps ``delay`` seconds, ``"error"`` answers 500, ``"garbage"`` sends
    non-JSON.
    """

    def __init__(self, score: Callable[[dict], float] = echo_zero, mode: str = "ok", delay: float = 0.0):
        self.score = score
        self.mode = mode
        self.delay = delay
        self.requests: list[dict] = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                if self.path != "/evaluate":
                    self.send_error(404)
                    return
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                server.requests.append({"body": body, "auth": self.headers.get("Authorization")})
                if server.mode == "slow":
                    time.sleep(server.delay)
                if server.mode == "error":
                    self._reply(500, b"boom")
                    return
                if server.mode == "garbage":
                    self._reply(200, b"not json")
                    return
                losses = [server.score(item) for item in body["inputs"]]
                if server.mode == "short":
                    losses = losses[:-1]
                self._reply(200, json.dumps({"losses": losses}).encode())

            def _reply(self, status, payload):
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                except (BrokenPipeError, ConnectionResetError):
                    pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._httpd.shutdown()
        self._httpd.server_close()
