"""In-process stub inference server for exercising the HTTP wire contract.

Serves the /chat and /embed routes with scripted responses, records every
request body for assertions, and can inject delays, status codes, and
malformed payloads. Intended for tests; nothing here is production serving.
"""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any


class StubInferenceServer:
    """Context-managed HTTP stub bound to an ephemeral localhost port.

    Behavior knobs (set attributes between requests):
      chat_responses / embed_responses: FIFO queues consumed per request,
        falling back to the corresponding default;
      delay_seconds: sleep before answering;
      status_code: forced HTTP status;
      raw_body: verbatim bytes to return instead of JSON.
    """

    def __init__(self) -> None:
        self.requests: list[tuple[str, dict[str, Any]]] = []
        self.chat_responses: list[dict[str, Any]] = []
        self.embed_responses: list[dict[str, Any]] = []
        self.default_chat_response: dict[str, Any] = {"text": ""}
        self.default_embed_response: dict[str, Any] = {"embedding": [1.0, 0.0]}
        self.delay_seconds: float = 0.0
        self.status_code: int | None = None
        self.raw_body: bytes | None = None
        self._lock = threading.Lock()
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        assert self._server is not None, "server not started"
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def _next_response(self, route: str) -> dict[str, Any]:
        with self._lock:
            if route == "/chat":
                return self.chat_responses.pop(0) if self.chat_responses else self.default_chat_response
            return self.embed_responses.pop(0) if self.embed_responses else self.default_embed_response

    def __enter__(self) -> "StubInferenceServer":
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:  # noqa: N802 (http.server API)
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length) or b"{}")
                with stub._lock:
                    stub.requests.append((self.path, payload))
                if stub.delay_seconds:
                    time.sleep(stub.delay_seconds)
                if stub.raw_body is not None:
                    body = stub.raw_body
                else:
                    body = json.dumps(stub._next_response(self.path)).encode("utf-8")
                try:
                    self.send_response(stub.status_code or 200)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    pass  # client timed out and went away; expected in tests

            def log_message(self, *args: Any) -> None:
                pass

            def handle_one_request(self) -> None:
                try:
                    super().handle_one_request()
                except (BrokenPipeError, ConnectionResetError):
                    pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc_info: Any) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
