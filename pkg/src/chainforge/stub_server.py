"""A tiny chat-completions/embeddings stub server.

Serves the same wire protocol the live HTTP backend speaks, with canned
content and fixed usage numbers, so a full chain run can be smoke-tested
against real HTTP without any external provider. Also runnable standalone:

    python -m chainforge.stub_server --port 8830
"""

from __future__ import annotations

import argparse
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

DEFAULT_CHAT_CONTENT = (
    "<SOLUTION> Acknowledged.\n\n"
    "main.py\n"
    "```python\n"
    "print('ok')\n"
    "```\n"
)
DEFAULT_USAGE = (12, 7)
DEFAULT_EMBEDDING_DIM = 16


class _Handler(BaseHTTPRequestHandler):
    server_version = "ChainforgeStub/0.1"

    def log_message(self, *args):  # keep test output quiet
        pass

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b"{}"
        try:
            return json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError:
            return {}

    def _send_json(self, payload: dict, status: int = 200) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):  # noqa: N802 (http.server API)
        stub: "StubServer" = self.server.stub  # type: ignore[attr-defined]
        body = self._read_body()
        with stub.lock:
            stub.requests.append({"path": self.path, "body": body})
            if stub.fail_next > 0:
                stub.fail_next -= 1
                self._send_json({"error": "transient failure injected"}, status=500)
                return
            if self.path.rstrip("/").endswith("/chat/completions"):
                content = stub.responder(body)
                prompt_tokens, completion_tokens = stub.usage
                stub.prompt_tokens_served += prompt_tokens
                stub.completion_tokens_served += completion_tokens
                stub.chat_calls += 1
                self._send_json({
                    "choices": [{"message": {"role": "assistant", "content": content}}],
                    "usage": {
                        "prompt_tokens": prompt_tokens,
                        "completion_tokens": completion_tokens,
                        "total_tokens": prompt_tokens + completion_tokens,
                    },
                })
                return
            if self.path.rstrip("/").endswith("/embeddings"):
                text = str(body.get("input", ""))
                vector = [float((len(text) + i) % 7) for i in range(DEFAULT_EMBEDDING_DIM)]
                stub.embedding_calls += 1
                self._send_json({"data": [{"embedding": vector}]})
                return
        self._send_json({"error": f"unknown endpoint {self.path}"}, status=404)


class StubServer:
    """Threaded stub; use as a context manager or call start()/stop()."""

    def __init__(
        self,
        responder: Callable[[dict], str] | None = None,
        usage: tuple[int, int] = DEFAULT_USAGE,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.responder = responder or (lambda body: DEFAULT_CHAT_CONTENT)
        self.usage = usage
        self.lock = threading.Lock()
        self.requests: list[dict] = []
        self.chat_calls = 0
        self.embedding_calls = 0
        self.prompt_tokens_served = 0
        self.completion_tokens_served = 0
        self.fail_next = 0  # inject N transient 500s for retry tests
        self._server = ThreadingHTTPServer((host, port), _Handler)
        self._server.stub = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def tokens_served(self) -> int:
        return self.prompt_tokens_served + self.completion_tokens_served

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Run the chainforge stub LLM server")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8830)
    args = parser.parse_args(argv)
    server = StubServer(host=args.host, port=args.port)
    print(f"stub server listening on {server.base_url}")
    try:
        server._server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
