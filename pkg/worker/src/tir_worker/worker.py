"""Interpreter worker: persistent-namespace exec over line-delimited JSON.

Wire format, both directions: one JSON object per line, UTF-8, no pretty
printing.  Requests carry {id, op, code?, timeout_ms?} with op one of
exec / reset / ping / shutdown; ids must strictly increase for the life of
the process.  Every request gets exactly one response with the echoed id:
{id, status, stdout, stderr, error_type, duration_ms, truncated}.

Snippets run on the main thread under a wall-clock itimer, so a runaway
pure-Python loop is interrupted and reported as status=timeout.  Code that
blocks inside C and ignores the signal will hang the request; the process
owner is expected to enforce its own deadline and kill the worker, which
is why crash containment lives one level up.
"""

from __future__ import annotations

import argparse
import ast
import builtins
import io
import json
import os
import signal
import sys
import time
import traceback
from contextlib import redirect_stderr, redirect_stdout

DEFAULT_OUTPUT_CAP_BYTES = 8192
OUTPUT_CAP_ENV = "TIR_WORKER_OUTPUT_CAP"
TRUNCATION_MARKER = "...[output truncated]"

_OPS = ("exec", "reset", "ping", "shutdown")


class _Timeout(BaseException):
    """Raised by the itimer handler; BaseException so user-level
    `except Exception` blocks cannot swallow it."""


def _on_timer(signum, frame):
    raise _Timeout()


class Worker:
    def __init__(self, output_cap_bytes: int = DEFAULT_OUTPUT_CAP_BYTES):
        self.output_cap_bytes = output_cap_bytes
        self.namespace: dict = {}
        self._reset_namespace()
        self._last_id: int | None = None

    def _reset_namespace(self) -> None:
        self.namespace.clear()
        self.namespace["__name__"] = "__main__"
        self.namespace["__builtins__"] = builtins

    def handle_line(self, line: str) -> dict:
        """One request frame in, one response frame out."""
        try:
            frame = json.loads(line)
        except json.JSONDecodeError as exc:
            return self._respond(-1, "error", error_type="protocol_error",
                                 stderr=f"frame is not valid JSON: {exc}")
        if not isinstance(frame, dict):
            return self._respond(-1, "error", error_type="protocol_error",
                                 stderr="frame must be a JSON object")

        frame_id = frame.get("id")
        if not isinstance(frame_id, int) or isinstance(frame_id, bool):
            return self._respond(-1, "error", error_type="protocol_error",
                                 stderr="id must be an integer")
        if self._last_id is not None and frame_id <= self._last_id:
            return self._respond(frame_id, "error", error_type="protocol_error",
                                 stderr="request ids must strictly increase")
        self._last_id = frame_id

        op = frame.get("op")
        if op not in _OPS:
            return self._respond(frame_id, "error", error_type="protocol_error",
                                 stderr=f"unknown op: {op!r}")
        if op == "ping":
            return self._respond(frame_id, "ok")
        if op == "reset":
            self._reset_namespace()
            return self._respond(frame_id, "ok")
        if op == "shutdown":
            return self._respond(frame_id, "ok", shutdown=True)

        code = frame.get("code")
        timeout_ms = frame.get("timeout_ms")
        if not isinstance(code, str):
            return self._respond(frame_id, "error", error_type="protocol_error",
                                 stderr="exec requires a code string")
        if not isinstance(timeout_ms, int) or timeout_ms <= 0:
            return self._respond(frame_id, "error", error_type="protocol_error",
                                 stderr="exec requires a positive timeout_ms")
        return self._execute(frame_id, code, timeout_ms)

    def _execute(self, frame_id: int, code: str, timeout_ms: int) -> dict:
        out_buffer = io.StringIO()
        err_buffer = io.StringIO()
        status = "ok"
        error_type = ""
        started = time.monotonic()

        old_handler = signal.signal(signal.SIGALRM, _on_timer)
        signal.setitimer(signal.ITIMER_REAL, timeout_ms / 1000.0)
        try:
            with redirect_stdout(out_buffer), redirect_stderr(err_buffer):
                self._run_snippet(code)
        except _Timeout:
            status = "timeout"
        except SyntaxError:
            status = "error"
            error_type = "SyntaxError"
            err_buffer.write(traceback.format_exc(limit=0))
        except BaseException as exc:
            status = "error"
            error_type = type(exc).__name__
            err_buffer.write(traceback.format_exc())
        finally:
            signal.setitimer(signal.ITIMER_REAL, 0.0)
            signal.signal(signal.SIGALRM, old_handler)

        duration_ms = int((time.monotonic() - started) * 1000)
        if status == "timeout":
            duration_ms = max(duration_ms, timeout_ms)

        stdout, cut_out = _cap(out_buffer.getvalue(), self.output_cap_bytes)
        stderr, cut_err = _cap(err_buffer.getvalue(), self.output_cap_bytes)
        return self._respond(frame_id, status, stdout=stdout, stderr=stderr,
                             error_type=error_type, duration_ms=duration_ms,
                             truncated=cut_out or cut_err)

    def _run_snippet(self, code: str) -> None:
        """Exec the snippet; a trailing bare expression echoes its repr,
        matching interactive-cell behavior."""
        tree = ast.parse(code, mode="exec")
        trailing_expr = None
        if tree.body and isinstance(tree.body[-1], ast.Expr):
            trailing_expr = ast.Expression(tree.body.pop().value)
        if tree.body:
            exec(compile(tree, "<cell>", "exec"), self.namespace)
        if trailing_expr is not None:
            value = eval(compile(trailing_expr, "<cell>", "eval"), self.namespace)
            if value is not None:
                print(repr(value))

    @staticmethod
    def _respond(frame_id: int, status: str, stdout: str = "", stderr: str = "",
                 error_type: str = "", duration_ms: int = 0,
                 truncated: bool = False, shutdown: bool = False) -> dict:
        return {
            "id": frame_id,
            "status": status,
            "stdout": stdout,
            "stderr": stderr,
            "error_type": error_type,
            "duration_ms": duration_ms,
            "truncated": truncated,
            "_shutdown": shutdown,
        }


def _cap(text: str, cap_bytes: int) -> tuple[str, bool]:
    """Tail-truncate to the byte budget, marker included in the budget."""
    encoded = text.encode("utf-8")
    if len(encoded) <= cap_bytes:
        return text, False
    marker = TRUNCATION_MARKER.encode("utf-8")
    keep = max(cap_bytes - len(marker), 0)
    head = encoded[:keep].decode("utf-8", errors="ignore")
    room = max(cap_bytes - len(head.encode("utf-8")), 0)
    return head + TRUNCATION_MARKER[:room], True


def serve(worker: Worker, stdin=None, stdout=None) -> int:
    """Process frames until shutdown or EOF.  Returns the exit code."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        response = worker.handle_line(line)
        shutdown = response.pop("_shutdown", False)
        stdout.write(json.dumps(response, separators=(",", ":"),
                                ensure_ascii=False) + "\n")
        stdout.flush()
        if shutdown:
            return 0
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tir-worker",
        description="Stateful Python interpreter worker over stdin/stdout frames.")
    parser.add_argument(
        "--output-cap-bytes", type=int,
        default=int(os.environ.get(OUTPUT_CAP_ENV, DEFAULT_OUTPUT_CAP_BYTES)),
        help="per-stream byte cap for captured stdout/stderr")
    args = parser.parse_args(argv)

    try:
        signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    except ValueError:
        pass

    return serve(Worker(output_cap_bytes=args.output_cap_bytes))


if __name__ == "__main__":
    sys.exit(main())
