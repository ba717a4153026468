"""JSON-lines query endpoint over a local TCP socket.

Each request is one JSON object per line::

    {"user_id": "u0042", "strategy": "pairnn", "M": 500, "N": 50}

and each response is one JSON object per line::

    {"ok": true, "results": [["p0913", 0.8123], ...], "latency_ms": 1.9}
    {"ok": false, "error": "N must be an integer >= 1, got 0"}

``strategy``, ``M`` and ``N`` are optional (defaults pairnn / 500 / 50);
``before`` (a timestamp) is optional too. The retriever is shared
read-only across handler threads, so the read path takes no locks.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
import time

from .retrieval import DEFAULT_M, DEFAULT_N, RetrievalError, RetrievalRequest, Retriever

logger = logging.getLogger(__name__)

MAX_LINE = 64 * 1024


def parse_request(payload: dict) -> RetrievalRequest:
    if not isinstance(payload, dict):
        raise RetrievalError("request must be a JSON object")
    unknown = set(payload) - {"user_id", "strategy", "M", "N", "before"}
    if unknown:
        raise RetrievalError(f"unknown request field(s): {', '.join(sorted(unknown))}")
    user_id = payload.get("user_id")
    if not isinstance(user_id, str):
        raise RetrievalError("user_id must be a string")
    before = payload.get("before")
    if before is not None and (isinstance(before, bool) or not isinstance(before, (int, float))):
        raise RetrievalError("before must be a number")
    return RetrievalRequest(
        user_id=user_id,
        M=payload.get("M", DEFAULT_M),
        N=payload.get("N", DEFAULT_N),
        strategy=payload.get("strategy", "pairnn"),
        before=None if before is None else float(before),
    )


def handle_line(retriever: Retriever, line: bytes | str) -> dict:
    """Answer one request line; never raises."""
    start = time.perf_counter()
    try:
        payload = json.loads(line)
        hits = retriever.retrieve(parse_request(payload))
    except (ValueError, TypeError) as exc:  # JSON errors and RetrievalError are ValueErrors
        return {"ok": False, "error": str(exc)}
    except Exception as exc:  # keep serving whatever goes wrong
        logger.exception("query failed")
        return {"ok": False, "error": f"internal error: {exc}"}
    latency = (time.perf_counter() - start) * 1000
    return {"ok": True, "results": [[h.product_id, h.score] for h in hits], "latency_ms": round(latency, 3)}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        retriever = self.server.retriever
        while True:
            line = self.rfile.readline(MAX_LINE + 1)
            if not line:
                return
            if len(line) > MAX_LINE:
                reply = {"ok": False, "error": f"request line longer than {MAX_LINE} bytes"}
                self.wfile.write(json.dumps(reply).encode() + b"\n")
                return
            if not line.strip():
                continue
            reply = handle_line(retriever, line)
            self.wfile.write(json.dumps(reply).encode() + b"\n")
            self.wfile.flush()


class QueryServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, retriever: Retriever, host: str = "127.0.0.1", port: int = 0):
        self.retriever = retriever
        super().__init__((host, port), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="pairnn-server", daemon=True)
        t.start()
        return t


class Client:
    """Blocking JSON-lines client holding one connection."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.file = self.sock.makefile("rwb")

    def send_raw(self, line: bytes) -> dict:
        self.file.write(line.rstrip(b"\n") + b"\n")
        self.file.flush()
        reply = self.file.readline()
        if not reply:
            raise ConnectionError("server closed the connection")
        return json.loads(reply)

    def query(self, **request) -> dict:
        return self.send_raw(json.dumps(request).encode())

    def close(self) -> None:
        self.file.close()
        self.sock.close()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
