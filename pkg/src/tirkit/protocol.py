"""Wire protocol spoken between the sandbox gateway and its workers.

Frames travel over the worker's stdin/stdout as newline-delimited JSON:
one complete object per line, UTF-8, no pretty-printing.  Payload newlines
are escaped by JSON itself, so a frame never spans lines.

Request frames carry a per-worker monotonically increasing integer id and
an op.  Every request gets exactly one response frame echoing that id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

OPS = ("exec", "reset", "ping", "shutdown")
STATUSES = ("ok", "error", "timeout")

ERROR_WORKER_CRASHED = "worker_crashed"
ERROR_PROTOCOL = "protocol_error"

# Appended in place of the removed tail when a stream hits the output cap.
TRUNCATION_MARKER = "...[output truncated]"

DEFAULT_OUTPUT_CAP_BYTES = 8192


class ProtocolError(ValueError):
    """A frame that does not satisfy the wire contract."""


@dataclass(frozen=True)
class WorkerFrame:
    """One request to a worker."""

    id: int
    op: str
    code: str | None = None
    timeout_ms: int | None = None

    def __post_init__(self) -> None:
        if self.op not in OPS:
            raise ProtocolError(f"unknown op: {self.op!r}")
        if (self.op == "exec") != (self.code is not None):
            raise ProtocolError("code must be present iff op=exec")
        if self.op == "exec" and (self.timeout_ms is None or self.timeout_ms <= 0):
            raise ProtocolError("exec requires a positive timeout_ms")

    def to_dict(self) -> dict:
        frame: dict = {"id": self.id, "op": self.op}
        if self.code is not None:
            frame["code"] = self.code
        if self.timeout_ms is not None:
            frame["timeout_ms"] = self.timeout_ms
        return frame


@dataclass(frozen=True)
class ExecResult:
    """One observation from a worker: captured streams plus outcome."""

    id: int
    status: str
    stdout: str = ""
    stderr: str = ""
    error_type: str = ""
    duration_ms: int = 0
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ProtocolError(f"unknown status: {self.status!r}")
        if self.status == "error" and not self.error_type:
            raise ProtocolError("status=error requires a non-empty error_type")
        if self.duration_ms < 0:
            raise ProtocolError("duration_ms must be non-negative")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "status": self.status,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "error_type": self.error_type,
            "duration_ms": self.duration_ms,
            "truncated": self.truncated,
        }


def encode_frame(frame: WorkerFrame | ExecResult) -> str:
    """Serialize a frame to its single-line wire form (no trailing newline)."""
    return json.dumps(frame.to_dict(), separators=(",", ":"), ensure_ascii=False)


def decode_request(line: str) -> WorkerFrame:
    obj = _parse_line(line)
    try:
        return WorkerFrame(
            id=_require_int(obj, "id"),
            op=obj.get("op", ""),
            code=obj.get("code"),
            timeout_ms=obj.get("timeout_ms"),
        )
    except ProtocolError:
        raise
    except (TypeError, KeyError) as exc:
        raise ProtocolError(f"malformed request frame: {exc}") from exc


def decode_response(line: str) -> ExecResult:
    obj = _parse_line(line)
    try:
        return ExecResult(
            id=_require_int(obj, "id"),
            status=obj.get("status", ""),
            stdout=obj.get("stdout", ""),
            stderr=obj.get("stderr", ""),
            error_type=obj.get("error_type", ""),
            duration_ms=int(obj.get("duration_ms", 0)),
            truncated=bool(obj.get("truncated", False)),
        )
    except ProtocolError:
        raise
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed response frame: {exc}") from exc


def cap_stream(text: str, cap_bytes: int) -> tuple[str, bool]:
    """Tail-truncate one stream to at most `cap_bytes` of UTF-8.

    When capping occurs the marker replaces the tail, and the capped
    stream (marker included) still fits the byte budget.
    """
    encoded = text.encode("utf-8")
    if len(encoded) <= cap_bytes:
        return text, False
    marker = TRUNCATION_MARKER.encode("utf-8")
    keep = max(cap_bytes - len(marker), 0)
    head = encoded[:keep].decode("utf-8", errors="ignore")
    return head + TRUNCATION_MARKER[: max(cap_bytes - len(head.encode("utf-8")), 0)], True


def _parse_line(line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"frame is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame must be a JSON object")
    return obj


def _require_int(obj: dict, key: str) -> int:
    value = obj.get(key)
    if not isinstance(value, int) or isinstance(value, bool):
        raise ProtocolError(f"frame field {key!r} must be an integer")
    return value
