"""In-process inference server speaking the remote scoring protocol.

Used as the contract fixture for :mod:`ccshap_audit.remote_client` and for
offline demos. Each route delegates to a plain Python callable:

* ``classify(prompt, labels) -> {label: logprob}``
* ``generate(prompt) -> str``
* ``logprob(prompt, continuation) -> [token logprobs]``

The server counts requests and records the peak number of concurrent
requests, and can be told to fail the first few calls with HTTP 503.
"""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable


class MockInferenceServer:
    def __init__(
        self,
        classify: Callable | None = None,
        generate: Callable | None = None,
        logprob: Callable | None = None,
        *,
        delay: float = 0.0,
        fail_first: int = 0,
        raw_response: bytes | None = None,
    ):
        self.classify = classify or (lambda prompt, labels: {l: 0.0 for l in labels})
        self.generate = generate or (lambda prompt: "")
        self.logprob = logprob or (lambda prompt, continuation: [0.0])
        self.delay = delay
        self.fail_first = fail_first
        self.raw_response = raw_response
        self.requests: list[tuple[str, dict]] = []
        self.in_flight = 0
        self.peak_in_flight = 0
        self.headers_seen: list[dict] = []
        self._lock = threading.Lock()
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, status: int, body: bytes):
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                rid = self.headers.get("X-Request-Id")
                if rid is not None:
                    self.send_header("X-Request-Id", rid)
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                with server._lock:
                    server.requests.append((self.path, payload))
                    server.headers_seen.append(dict(self.headers))
                    server.in_flight += 1
                    server.peak_in_flight = max(server.peak_in_flight, server.in_flight)
                    failing = server.fail_first > 0
                    if failing:
                        server.fail_first -= 1
                try:
                    if server.delay:
                        time.sleep(server.delay)
                    if failing:
                        self._reply(503, b'{"error": "unavailable"}')
                        return
                    if server.raw_response is not None:
                        self._reply(200, server.raw_response)
                        return
                    if self.path == "/v1/score":
                        out = {"label_logprobs": server.classify(payload["prompt"], payload["labels"])}
                    elif self.path == "/v1/generate":
                        out = {"text": server.generate(payload["prompt"])}
                    elif self.path == "/v1/logprob":
                        out = {"token_logprobs": server.logprob(payload["prompt"], payload["continuation"])}
                    else:
                        self._reply(404, b'{"error": "no such route"}')
                        return
                    self._reply(200, json.dumps(out).encode("utf-8"))
                finally:
                    with server._lock:
                        server.in_flight -= 1

        return Handler

    def start(self) -> "MockInferenceServer":
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, args=(0.05,), daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
