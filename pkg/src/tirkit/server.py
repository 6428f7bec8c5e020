"""Socket front-end for the sandbox gateway.

Exposes open/exec/close over a local TCP socket using the worker frame
format prefixed by a session field: one JSON object per line in each
direction.  Requests carry {id, op, session?, code?, timeout_ms?}; replies
echo the id (and session where applicable) with ExecResult fields.
"""

from __future__ import annotations

import json
import socketserver
import threading

from .records import dumps_canonical
from .sandbox import (
    CapacityError,
    SandboxGateway,
    SessionPoisonedError,
    UnknownSessionError,
)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        gateway: SandboxGateway = self.server.gateway  # type: ignore[attr-defined]
        opened: list[str] = []
        try:
            for raw in self.rfile:
                line = raw.decode("utf-8").strip()
                if not line:
                    continue
                reply = _dispatch(gateway, line, opened)
                self.wfile.write((dumps_canonical(reply) + "\n").encode("utf-8"))
                self.wfile.flush()
        finally:
            # Sessions are per-connection; drop whatever the client left open.
            for session_id in opened:
                try:
                    gateway.close_session(session_id)
                except UnknownSessionError:
                    pass


def _dispatch(gateway: SandboxGateway, line: str, opened: list[str]) -> dict:
    try:
        frame = json.loads(line)
    except json.JSONDecodeError:
        return _error(None, "protocol_error", "frame is not valid JSON")
    if not isinstance(frame, dict):
        return _error(None, "protocol_error", "frame must be a JSON object")
    frame_id = frame.get("id")
    op = frame.get("op")

    if op == "ping":
        return {"id": frame_id, "status": "ok"}

    if op == "open":
        try:
            session_id = gateway.open_session()
        except CapacityError as exc:
            return _error(frame_id, "capacity", str(exc))
        opened.append(session_id)
        return {"id": frame_id, "status": "ok", "session": session_id}

    if op == "exec":
        session_id = frame.get("session")
        code = frame.get("code")
        if not isinstance(session_id, str) or not isinstance(code, str):
            return _error(frame_id, "protocol_error",
                          "exec requires session and code fields")
        try:
            result = gateway.execute(session_id, code,
                                     timeout_ms=frame.get("timeout_ms"))
        except UnknownSessionError as exc:
            return _error(frame_id, "unknown_session", str(exc))
        except SessionPoisonedError as exc:
            return _error(frame_id, "session_poisoned", str(exc))
        reply = result.to_dict()
        reply["id"] = frame_id
        reply["session"] = session_id
        return reply

    if op == "close":
        session_id = frame.get("session")
        if not isinstance(session_id, str):
            return _error(frame_id, "protocol_error", "close requires a session field")
        try:
            gateway.close_session(session_id)
        except UnknownSessionError as exc:
            return _error(frame_id, "unknown_session", str(exc))
        if session_id in opened:
            opened.remove(session_id)
        return {"id": frame_id, "status": "ok"}

    return _error(frame_id, "protocol_error", f"unknown op: {op!r}")


def _error(frame_id, error_type: str, detail: str) -> dict:
    return {"id": frame_id, "status": "error", "error_type": error_type,
            "detail": detail}


class SandboxServer(socketserver.ThreadingTCPServer):
    """Serves one gateway over localhost TCP."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, gateway: SandboxGateway, host: str = "127.0.0.1",
                 port: int = 0):
        super().__init__((host, port), _Handler)
        self.gateway = gateway

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def serve_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
