"""Sandbox gateway: session management over a pool of worker processes.

Each open session owns one worker process exclusively, so namespace
isolation between sessions is a process boundary, not a convention.
Workers speak the newline-delimited frame protocol over stdin/stdout; an
in-process fake worker implements the same contract from a response table
so everything above the gateway can be tested without spawning anything.

A session is poisoned by a timeout or a worker crash: its interpreter
state can no longer be trusted or reconstructed, so the gateway refuses
further execution instead of silently replaying history on a fresh
worker, which would forge observations.
"""

from __future__ import annotations

import os
import queue
import shlex
import subprocess
import threading
import uuid
from dataclasses import dataclass
from typing import Callable

from .protocol import (
    DEFAULT_OUTPUT_CAP_BYTES,
    ERROR_PROTOCOL,
    ERROR_WORKER_CRASHED,
    ExecResult,
    ProtocolError,
    WorkerFrame,
    cap_stream,
    decode_response,
    encode_frame,
)

# Extra wall-clock allowance for the worker to enforce its own timeout and
# report back before the gateway declares it hung.
RESPONSE_GRACE_MS = 5000

OUTPUT_CAP_ENV = "TIR_WORKER_OUTPUT_CAP"


class SandboxError(Exception):
    pass


class CapacityError(SandboxError):
    """Pool exhausted; retriable once a session closes."""


class UnknownSessionError(SandboxError):
    pass


class SessionPoisonedError(SandboxError):
    pass


class WorkerCrashedError(SandboxError):
    """Transport-level failure: the worker died or stopped responding."""


@dataclass(frozen=True)
class SandboxConfig:
    pool_size: int = 4
    default_timeout_ms: int = 10_000
    output_cap_bytes: int = DEFAULT_OUTPUT_CAP_BYTES
    worker_launch_command: str = "python3 -m tir_worker"

    def __post_init__(self) -> None:
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.default_timeout_ms < 1 or self.output_cap_bytes < 1:
            raise ValueError("timeout and output cap must be positive")


class _WorkerOps:
    """Frame construction shared by worker implementations.

    Ids increase strictly per worker process for its whole lifetime,
    including across session recycling.
    """

    # Whether close_session may reset this worker and lease it to a later
    # session instead of discarding it.
    recyclable = True

    def __init__(self) -> None:
        self._id_lock = threading.Lock()
        self._next_id = 0

    def _take_id(self) -> int:
        with self._id_lock:
            self._next_id += 1
            return self._next_id

    def exec(self, code: str, timeout_ms: int) -> ExecResult:
        return self.request(WorkerFrame(id=self._take_id(), op="exec",
                                        code=code, timeout_ms=timeout_ms))

    def reset(self) -> ExecResult:
        return self.request(WorkerFrame(id=self._take_id(), op="reset"))

    def ping(self) -> ExecResult:
        return self.request(WorkerFrame(id=self._take_id(), op="ping"))

    def shutdown(self) -> ExecResult:
        return self.request(WorkerFrame(id=self._take_id(), op="shutdown"))


class FakeWorker(_WorkerOps):
    """Protocol twin of the real worker, driven by a response table.

    The table maps code strings to scripted outcomes; an outcome is a dict
    with any of: stdout, stderr, error_type, status ("ok"/"error"/"timeout"),
    duration_ms, crash (bool).  A list of outcomes is consumed one per
    execution of that code, repeating the last entry once exhausted.
    Unknown code succeeds with empty output, so fixtures only script the
    snippets they care about.  Durations default to 0 for byte-stable
    serialization downstream.

    Fake workers are never recycled across sessions: scripted cursors are
    per-instance state, and reusing them would make a session's transcript
    depend on which worker it happened to land on under concurrency.
    """

    recyclable = False

    def __init__(self, table: dict[str, dict | list[dict]] | None = None,
                 output_cap_bytes: int = DEFAULT_OUTPUT_CAP_BYTES):
        super().__init__()
        self._table: dict[str, list[dict]] = {}
        for code, outcome in (table or {}).items():
            self._table[code] = list(outcome) if isinstance(outcome, list) else [outcome]
        self._cursors: dict[str, int] = {}
        self._cap = output_cap_bytes
        self._alive = True
        self._last_request_id = 0

    @property
    def alive(self) -> bool:
        return self._alive

    def request(self, frame: WorkerFrame) -> ExecResult:
        if not self._alive:
            raise WorkerCrashedError("fake worker is dead")
        if frame.id <= self._last_request_id:
            return ExecResult(id=frame.id, status="error",
                              error_type=ERROR_PROTOCOL,
                              stderr="request ids must strictly increase")
        self._last_request_id = frame.id

        if frame.op == "ping":
            return ExecResult(id=frame.id, status="ok")
        if frame.op == "reset":
            return ExecResult(id=frame.id, status="ok")
        if frame.op == "shutdown":
            self._alive = False
            return ExecResult(id=frame.id, status="ok")

        outcome = self._next_outcome(frame.code)
        if outcome.get("crash"):
            self._alive = False
            raise WorkerCrashedError("fake worker scripted crash")

        status = outcome.get("status", "ok")
        error_type = outcome.get("error_type", "")
        if status == "error" and not error_type:
            error_type = "Exception"
        duration = int(outcome.get("duration_ms", 0))
        if status == "timeout":
            duration = max(duration, frame.timeout_ms or 0)

        stdout, cut_out = cap_stream(outcome.get("stdout", ""), self._cap)
        stderr, cut_err = cap_stream(outcome.get("stderr", ""), self._cap)
        return ExecResult(id=frame.id, status=status, stdout=stdout,
                          stderr=stderr, error_type=error_type,
                          duration_ms=duration, truncated=cut_out or cut_err)

    def close(self) -> None:
        self._alive = False

    def _next_outcome(self, code: str) -> dict:
        entries = self._table.get(code)
        if not entries:
            return {}
        cursor = self._cursors.get(code, 0)
        outcome = entries[min(cursor, len(entries) - 1)]
        self._cursors[code] = cursor + 1
        return outcome


class SubprocessWorker(_WorkerOps):
    """A worker process driven over stdin/stdout pipes.

    One request in flight at a time; a dedicated reader thread feeds
    response lines into a queue so a hung or dead worker surfaces as
    WorkerCrashedError after the request deadline instead of blocking
    forever.
    """

    def __init__(self, command: str | list[str],
                 output_cap_bytes: int = DEFAULT_OUTPUT_CAP_BYTES,
                 response_grace_ms: int = RESPONSE_GRACE_MS):
        super().__init__()
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        env = dict(os.environ)
        env[OUTPUT_CAP_ENV] = str(output_cap_bytes)
        self._proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
            bufsize=1,
            env=env,
        )
        self._grace_ms = response_grace_ms
        self._lock = threading.Lock()
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    @property
    def alive(self) -> bool:
        return self._proc.poll() is None

    def request(self, frame: WorkerFrame) -> ExecResult:
        with self._lock:
            if not self.alive:
                raise WorkerCrashedError("worker process has exited")
            try:
                self._proc.stdin.write(encode_frame(frame) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                self.kill()
                raise WorkerCrashedError(f"failed to send frame: {exc}") from exc

            deadline_s = ((frame.timeout_ms or 0) + self._grace_ms) / 1000.0
            try:
                line = self._lines.get(timeout=deadline_s)
            except queue.Empty:
                self.kill()
                raise WorkerCrashedError(
                    f"no response within {deadline_s:.1f}s; worker killed")
            if line is None:
                raise WorkerCrashedError("worker closed its output stream")
            try:
                result = decode_response(line)
            except ProtocolError as exc:
                self.kill()
                raise WorkerCrashedError(f"undecodable response: {exc}") from exc
            if result.id != frame.id:
                self.kill()
                raise WorkerCrashedError(
                    f"response id {result.id} does not match request {frame.id}")
            return result

    def close(self) -> None:
        if self.alive:
            try:
                self.shutdown()
            except (WorkerCrashedError, ProtocolError):
                pass
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                pass
        self.kill()

    def kill(self) -> None:
        if self._proc.poll() is None:
            self._proc.kill()
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                pass

    def _read_loop(self) -> None:
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        except ValueError:
            pass
        self._lines.put(None)


class _Session:
    def __init__(self, worker):
        self.worker = worker
        self.lock = threading.Lock()
        self.poisoned = False
        self.worker_dead = False


class SandboxGateway:
    """Multiplexes sessions onto dedicated workers and survives crashes.

    Session ids are never reused within a gateway lifetime.  Calls on the
    same session are serialized; calls on distinct sessions run in
    parallel.  A crashed worker poisons only its own session and is
    replaced lazily, so pool capacity is never reduced permanently.
    """

    def __init__(self, config: SandboxConfig | None = None,
                 worker_factory: Callable[[], object] | None = None):
        self.config = config or SandboxConfig()
        if worker_factory is None:
            worker_factory = self._spawn_subprocess_worker
        self._factory = worker_factory
        self._lock = threading.Lock()
        self._sessions: dict[str, _Session] = {}
        self._idle: list = []
        self._closed = False

    def _spawn_subprocess_worker(self) -> SubprocessWorker:
        return SubprocessWorker(self.config.worker_launch_command,
                                output_cap_bytes=self.config.output_cap_bytes)

    def open_session(self) -> str:
        """Bind a fresh namespace to a new session id."""
        with self._lock:
            if self._closed:
                raise SandboxError("gateway is shut down")
            if len(self._sessions) >= self.config.pool_size:
                raise CapacityError(
                    f"all {self.config.pool_size} session slots are in use")
            worker = self._idle.pop() if self._idle else None
            session_id = uuid.uuid4().hex
            self._sessions[session_id] = _Session(worker)
        if worker is None:
            worker = self._factory()
            with self._lock:
                session = self._sessions.get(session_id)
                if session is None:
                    worker.close()
                    raise SandboxError("session closed while opening")
                session.worker = worker
        return session_id

    def execute(self, session_id: str, code: str,
                timeout_ms: int | None = None) -> ExecResult:
        """Run code in the session's namespace; FIFO per session."""
        session = self._get_session(session_id)
        timeout = timeout_ms or self.config.default_timeout_ms
        with session.lock:
            if session.poisoned:
                raise SessionPoisonedError(
                    f"session {session_id} is poisoned; close and reopen")
            try:
                result = session.worker.exec(code, timeout)
            except WorkerCrashedError as exc:
                session.poisoned = True
                session.worker_dead = True
                return ExecResult(id=0, status="error",
                                  error_type=ERROR_WORKER_CRASHED,
                                  stderr=str(exc))
            if result.status == "timeout":
                # Interpreter state after an interrupt is undefined.
                session.poisoned = True
            return result

    def close_session(self, session_id: str) -> None:
        """Release the session: recycle a healthy worker, discard a bad one."""
        with self._lock:
            session = self._sessions.pop(session_id, None)
        if session is None:
            raise UnknownSessionError(f"unknown session: {session_id}")
        with session.lock:
            worker = session.worker
            if worker is None:
                return
            if session.worker_dead or not getattr(worker, "alive", False):
                worker.close()
                return
            if session.poisoned or not getattr(worker, "recyclable", False):
                worker.close()
                return
            try:
                ack = worker.reset()
            except (WorkerCrashedError, ProtocolError):
                worker.close()
                return
            if ack.status != "ok":
                worker.close()
                return
            with self._lock:
                if self._closed:
                    worker.close()
                else:
                    self._idle.append(worker)

    def open_sessions(self) -> int:
        with self._lock:
            return len(self._sessions)

    def shutdown(self) -> None:
        with self._lock:
            self._closed = True
            sessions = list(self._sessions.values())
            self._sessions.clear()
            idle = list(self._idle)
            self._idle.clear()
        for session in sessions:
            if session.worker is not None:
                session.worker.close()
        for worker in idle:
            worker.close()

    def __enter__(self) -> "SandboxGateway":
        return self

    def __exit__(self, *exc_info) -> None:
        self.shutdown()

    def _get_session(self, session_id: str) -> _Session:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSessionError(f"unknown session: {session_id}")
        return session


def fake_worker_factory(table: dict[str, dict | list[dict]],
                        output_cap_bytes: int = DEFAULT_OUTPUT_CAP_BYTES
                        ) -> Callable[[], FakeWorker]:
    """Factory for gateways that should run without any worker process."""
    return lambda: FakeWorker(table, output_cap_bytes=output_cap_bytes)
