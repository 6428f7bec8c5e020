"""Interleaved reasoning rollout engine.

Drives a policy through alternating text and code actions against a
sandbox session.  Code actions are executed exactly once and their
observations are appended to the history before the policy is queried
again, so every continuation is conditioned on everything the sandbox
said so far.  The loop ends when the policy emits a final answer, a
budget runs out, the policy fails, or the sandbox session is poisoned.
"""

from __future__ import annotations

import concurrent.futures
import json
import time
from dataclasses import dataclass, replace
from typing import Sequence

from .policy import PolicyClient, PolicyError
from .protocol import ERROR_WORKER_CRASHED, ExecResult
from .records import dumps_canonical
from .tokenizer import DEFAULT_TOKENIZER, WhitespaceTokenizer

SCHEMA_VERSION = 1

ACTION_TEXT = "text"
ACTION_CODE = "code"
ACTIONS = (ACTION_TEXT, ACTION_CODE)

MODE_TIR = "tir"
MODE_TEXT_ONLY = "text_only"
MODES = (MODE_TIR, MODE_TEXT_ONLY)

STOP_ANSWERED = "answered"
STOP_TOOL_BUDGET = "tool_budget"
STOP_TOKEN_BUDGET = "token_budget"
STOP_POLICY_ERROR = "policy_error"
STOP_SANDBOX_POISONED = "sandbox_poisoned"
STOP_REASONS = (STOP_ANSWERED, STOP_TOOL_BUDGET, STOP_TOKEN_BUDGET,
                STOP_POLICY_ERROR, STOP_SANDBOX_POISONED)

DEFAULT_SYSTEM_PROMPT = (
    "Solve the problem step by step. You may run Python by wrapping code in "
    "{open_tag}...{close_tag}; the execution output will be returned to you, "
    "and variables persist between executions. Give the final answer as "
    "\\boxed{{...}}."
)

_OPEN_RETRY_S = 10.0


class TrajectoryInvariantError(ValueError):
    """A trajectory record that violates its schema invariants."""


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    ground_truth: str = ""
    tools_enabled: bool = True


@dataclass(frozen=True)
class Turn:
    index: int
    action: str
    content: str
    observation: ExecResult | None = None


@dataclass(frozen=True)
class RolloutConfig:
    """Budgets and markup conventions for one rollout run."""

    max_tool_calls: int = 128
    max_tokens: int = 80_000
    tool_open_tag: str = "<code>"
    tool_close_tag: str = "</code>"
    answer_pattern: str = "\\boxed"
    concurrency: int = 4

    def __post_init__(self) -> None:
        if self.max_tool_calls < 1 or self.max_tokens < 1 or self.concurrency < 1:
            raise ValueError("budgets and concurrency must be positive")
        if not self.tool_open_tag or not self.tool_close_tag:
            raise ValueError("tool tags must be non-empty")
        if self.tool_open_tag == self.tool_close_tag:
            raise ValueError("tool tags must be distinct")
        if not self.answer_pattern:
            raise ValueError("answer_pattern must be non-empty")


@dataclass(frozen=True)
class Trajectory:
    problem_id: str
    turns: tuple[Turn, ...]
    final_answer: str | None
    stop_reason: str
    token_count: int
    tool_call_count: int
    mode: str

    def validate(self) -> None:
        """Raise TrajectoryInvariantError naming the first violated invariant."""
        if self.stop_reason not in STOP_REASONS:
            raise TrajectoryInvariantError(f"unknown stop_reason: {self.stop_reason!r}")
        if self.mode not in MODES:
            raise TrajectoryInvariantError(f"unknown mode: {self.mode!r}")
        code_turns = 0
        for position, turn in enumerate(self.turns):
            if turn.index != position:
                raise TrajectoryInvariantError(
                    f"turn indices must be contiguous from 0, got {turn.index} "
                    f"at position {position}")
            if turn.action not in ACTIONS:
                raise TrajectoryInvariantError(f"unknown action: {turn.action!r}")
            if (turn.action == ACTION_CODE) != (turn.observation is not None):
                raise TrajectoryInvariantError(
                    f"turn {turn.index}: observation must be present iff action=code")
            if turn.action == ACTION_CODE:
                code_turns += 1
        if self.tool_call_count != code_turns:
            raise TrajectoryInvariantError(
                f"tool_call_count={self.tool_call_count} but trajectory has "
                f"{code_turns} code turns")
        if self.mode == MODE_TEXT_ONLY and self.tool_call_count != 0:
            raise TrajectoryInvariantError("text_only trajectory has code turns")
        if self.stop_reason == STOP_ANSWERED and self.final_answer is None:
            raise TrajectoryInvariantError("stop_reason=answered without final_answer")
        if self.token_count < 0:
            raise TrajectoryInvariantError("token_count must be non-negative")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "problem_id": self.problem_id,
            "mode": self.mode,
            "stop_reason": self.stop_reason,
            "final_answer": self.final_answer,
            "token_count": self.token_count,
            "tool_call_count": self.tool_call_count,
            "turns": [
                {
                    "index": t.index,
                    "action": t.action,
                    "content": t.content,
                    "observation": _observation_to_dict(t.observation),
                }
                for t in self.turns
            ],
        }


def parse_actions(policy_output: str, config: RolloutConfig) -> list[tuple[str, str]]:
    """Split policy output into maximal text spans and delimited code blocks.

    Total: every input maps to an action list whose contents, concatenated
    (tags of matched blocks excluded), reproduce the input.  An open tag
    without a matching close tag is plain text.
    """
    open_tag, close_tag = config.tool_open_tag, config.tool_close_tag
    actions: list[tuple[str, str]] = []
    pos = 0
    while True:
        start = policy_output.find(open_tag, pos)
        if start < 0:
            break
        end = policy_output.find(close_tag, start + len(open_tag))
        if end < 0:
            break
        if start > pos:
            actions.append((ACTION_TEXT, policy_output[pos:start]))
        actions.append((ACTION_CODE, policy_output[start + len(open_tag):end]))
        pos = end + len(close_tag)
    if pos < len(policy_output):
        actions.append((ACTION_TEXT, policy_output[pos:]))
    return actions


def extract_final_answer(text: str, marker: str = "\\boxed") -> str | None:
    """Content of the last well-formed `marker{...}` with balanced braces."""
    starts = []
    pos = 0
    while True:
        idx = text.find(marker, pos)
        if idx < 0:
            break
        starts.append(idx)
        pos = idx + len(marker)
    for idx in reversed(starts):
        scan = idx + len(marker)
        while scan < len(text) and text[scan].isspace():
            scan += 1
        if scan >= len(text) or text[scan] != "{":
            continue
        depth = 1
        scan += 1
        begin = scan
        while scan < len(text):
            ch = text[scan]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[begin:scan]
            scan += 1
    return None


def render_observation(obs: ExecResult) -> str:
    """Verbatim observation text injected into the policy context."""
    parts = []
    if obs.stdout:
        parts.append(obs.stdout)
    if obs.stderr:
        parts.append(obs.stderr)
    if obs.status == "error" and not obs.stderr:
        parts.append(f"[error] {obs.error_type}")
    if obs.status == "timeout":
        parts.append("[execution timed out]")
    if not parts:
        return "[no output]"
    return "\n".join(parts)


def build_messages(problem: Problem, turns: Sequence[Turn], config: RolloutConfig,
                   system_prompt: str | None = None) -> list[dict]:
    """Policy request for the next turn: exactly the history so far."""
    if system_prompt is None:
        system_prompt = DEFAULT_SYSTEM_PROMPT.format(
            open_tag=config.tool_open_tag, close_tag=config.tool_close_tag)
    messages = []
    if system_prompt:
        messages.append({"role": "system", "content": system_prompt})
    messages.append({"role": "user", "content": problem.statement})
    for turn in turns:
        if turn.action == ACTION_TEXT:
            messages.append({"role": "assistant", "content": turn.content})
        else:
            messages.append({
                "role": "assistant",
                "content": f"{config.tool_open_tag}{turn.content}{config.tool_close_tag}",
            })
            messages.append({"role": "tool",
                             "content": render_observation(turn.observation)})
    return messages


def run_rollout(problem: Problem, policy: PolicyClient, sandbox,
                config: RolloutConfig | None = None,
                tokenizer: WhitespaceTokenizer | None = None,
                system_prompt: str | None = None) -> Trajectory:
    """Roll out one trajectory for `problem` and close its session on return.

    The sandbox handle must provide open_session/execute/close_session as
    the gateway does.  With tools disabled no session is opened and code
    blocks in policy output are retained as plain text.
    """
    config = config or RolloutConfig()
    tokenizer = tokenizer or DEFAULT_TOKENIZER

    turns: list[Turn] = []
    token_count = 0
    tool_calls = 0
    final_answer: str | None = None
    stop_reason: str | None = None

    session = None
    if problem.tools_enabled:
        session = _open_with_retry(sandbox)
    try:
        while stop_reason is None:
            messages = build_messages(problem, turns, config, system_prompt)
            try:
                response = policy.complete(messages, stop=[config.tool_close_tag])
            except PolicyError:
                stop_reason = STOP_POLICY_ERROR
                break
            output = response.text
            if not output:
                # Empty continuation can never make progress; treat as a
                # policy failure rather than loop forever.
                stop_reason = STOP_POLICY_ERROR
                break

            answer: str | None = None
            budget_hit: str | None = None
            for kind, content in parse_actions(output, config):
                if kind == ACTION_TEXT:
                    found = extract_final_answer(content, config.answer_pattern)
                    if found is not None:
                        answer = found
                    token_count, overflow = _append_turn(
                        turns, ACTION_TEXT, content, None, token_count,
                        config.max_tokens, tokenizer)
                    if overflow:
                        budget_hit = STOP_TOKEN_BUDGET
                        break
                    continue

                # Code action.
                if not problem.tools_enabled:
                    token_count, overflow = _append_turn(
                        turns, ACTION_TEXT, content, None, token_count,
                        config.max_tokens, tokenizer)
                    if overflow:
                        budget_hit = STOP_TOKEN_BUDGET
                        break
                    continue
                if tool_calls >= config.max_tool_calls:
                    token_count, overflow = _append_turn(
                        turns, ACTION_TEXT, content, None, token_count,
                        config.max_tokens, tokenizer)
                    budget_hit = STOP_TOKEN_BUDGET if overflow else STOP_TOOL_BUDGET
                    break
                if tokenizer.count(content) > config.max_tokens - token_count:
                    # Not enough budget left to even record the snippet;
                    # it was never executed, so it is kept as text.
                    token_count, _ = _append_turn(
                        turns, ACTION_TEXT, content, None, token_count,
                        config.max_tokens, tokenizer)
                    budget_hit = STOP_TOKEN_BUDGET
                    break
                observation = sandbox.execute(session, code=content)
                # Frame ids are transport-level correlation noise; zero them
                # so serialized trajectories are stable across worker reuse.
                observation = replace(observation, id=0)
                tool_calls += 1
                token_count, _ = _append_turn(
                    turns, ACTION_CODE, content, observation, token_count,
                    config.max_tokens, tokenizer)
                if observation.status == "timeout" or \
                        observation.error_type == ERROR_WORKER_CRASHED:
                    budget_hit = STOP_SANDBOX_POISONED
                    break

            if budget_hit == STOP_SANDBOX_POISONED:
                stop_reason = STOP_SANDBOX_POISONED
            elif answer is not None and budget_hit != STOP_TOKEN_BUDGET:
                final_answer = answer
                stop_reason = STOP_ANSWERED
            elif budget_hit is not None:
                stop_reason = budget_hit
                if answer is not None:
                    final_answer = answer
            elif token_count >= config.max_tokens:
                stop_reason = STOP_TOKEN_BUDGET
    finally:
        if session is not None:
            sandbox.close_session(session)

    trajectory = Trajectory(
        problem_id=problem.id,
        turns=tuple(turns),
        final_answer=final_answer,
        stop_reason=stop_reason,
        token_count=token_count,
        tool_call_count=tool_calls,
        mode=MODE_TIR if problem.tools_enabled else MODE_TEXT_ONLY,
    )
    trajectory.validate()
    return trajectory


def run_batch(jobs: Sequence[tuple[Problem, PolicyClient]], sandbox,
              config: RolloutConfig | None = None,
              tokenizer: WhitespaceTokenizer | None = None,
              system_prompt: str | None = None) -> list[Trajectory]:
    """Run up to config.concurrency rollouts in flight; results in job order."""
    config = config or RolloutConfig()
    if len(jobs) <= 1 or config.concurrency == 1:
        return [run_rollout(p, pol, sandbox, config, tokenizer, system_prompt)
                for p, pol in jobs]
    with concurrent.futures.ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        futures = [pool.submit(run_rollout, p, pol, sandbox, config,
                               tokenizer, system_prompt)
                   for p, pol in jobs]
        return [f.result() for f in futures]


def serialize_trajectory(trajectory: Trajectory) -> str:
    """Canonical single-line record; byte-stable for identical trajectories."""
    return dumps_canonical(trajectory.to_dict())


def deserialize_trajectory(record: str | dict) -> Trajectory:
    """Parse and validate one trajectory record.

    Rejects records violating trajectory invariants with a diagnostic that
    names the violated invariant.
    """
    if isinstance(record, str):
        try:
            obj = json.loads(record)
        except json.JSONDecodeError as exc:
            raise TrajectoryInvariantError(f"record is not valid JSON: {exc}") from exc
    else:
        obj = record
    if not isinstance(obj, dict):
        raise TrajectoryInvariantError("record must be a JSON object")
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise TrajectoryInvariantError(
            f"unsupported schema_version: {obj.get('schema_version')!r}")
    try:
        turns = tuple(
            Turn(
                index=t["index"],
                action=t["action"],
                content=t["content"],
                observation=_observation_from_dict(t.get("observation")),
            )
            for t in obj["turns"]
        )
        trajectory = Trajectory(
            problem_id=obj["problem_id"],
            turns=turns,
            final_answer=obj.get("final_answer"),
            stop_reason=obj["stop_reason"],
            token_count=obj["token_count"],
            tool_call_count=obj["tool_call_count"],
            mode=obj["mode"],
        )
    except (KeyError, TypeError) as exc:
        raise TrajectoryInvariantError(f"malformed trajectory record: {exc}") from exc
    trajectory.validate()
    return trajectory


def _append_turn(turns: list[Turn], action: str, content: str,
                 observation: ExecResult | None, token_count: int,
                 max_tokens: int, tokenizer) -> tuple[int, bool]:
    """Append a turn, truncating content to the remaining token budget.

    Only policy-generated content counts against the budget; observation
    text is environment-injected context (it is also the part masked out
    of training), so it is not charged.
    """
    remaining = max_tokens - token_count
    ntok = tokenizer.count(content)
    overflow = ntok > remaining
    if overflow:
        content = tokenizer.truncate(content, remaining)
        ntok = tokenizer.count(content)
    turns.append(Turn(index=len(turns), action=action, content=content,
                      observation=observation))
    return token_count + ntok, overflow


def _open_with_retry(sandbox):
    from .sandbox import CapacityError
    deadline = time.monotonic() + _OPEN_RETRY_S
    while True:
        try:
            return sandbox.open_session()
        except CapacityError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.05)


def _observation_to_dict(obs: ExecResult | None) -> dict | None:
    if obs is None:
        return None
    return {
        "status": obs.status,
        "stdout": obs.stdout,
        "stderr": obs.stderr,
        "error_type": obs.error_type,
        "duration_ms": obs.duration_ms,
        "truncated": obs.truncated,
    }


def _observation_from_dict(obj: dict | None) -> ExecResult | None:
    if obj is None:
        return None
    if not isinstance(obj, dict):
        raise TrajectoryInvariantError("observation must be an object or null")
    return ExecResult(
        id=0,
        status=obj.get("status", ""),
        stdout=obj.get("stdout", ""),
        stderr=obj.get("stderr", ""),
        error_type=obj.get("error_type", ""),
        duration_ms=obj.get("duration_ms", 0),
        truncated=obj.get("truncated", False),
    )
