"""Rollout engine: action parsing against a brute-force oracle, answer
extraction against a reference scanner, the interaction loop fixtures, and
serialization round-trips."""

from __future__ import annotations

import itertools
import json

import pytest

from tirkit import (
    MockPolicy,
    Problem,
    RolloutConfig,
    SandboxConfig,
    SandboxGateway,
    TrajectoryInvariantError,
    deserialize_trajectory,
    extract_final_answer,
    parse_actions,
    run_batch,
    run_rollout,
    serialize_trajectory,
)
from tirkit.policy import PolicyError
from tirkit.rollout import (
    STOP_ANSWERED,
    STOP_POLICY_ERROR,
    STOP_SANDBOX_POISONED,
    STOP_TOKEN_BUDGET,
    STOP_TOOL_BUDGET,
    build_messages,
)
from tirkit.sandbox import fake_worker_factory

from conftest import THREE_CALL_SCRIPT, THREE_CALL_TABLE

CFG = RolloutConfig(tool_open_tag="<code>", tool_close_tag="</code>")


def reference_parse(text: str, open_tag: str, close_tag: str):
    """Independent recursive splitter used as the oracle."""
    start = text.find(open_tag)
    if start < 0:
        return [("text", text)] if text else []
    end = text.find(close_tag, start + len(open_tag))
    if end < 0:
        return [("text", text)] if text else []
    head = [("text", text[:start])] if text[:start] else []
    code = [("code", text[start + len(open_tag):end])]
    return head + code + reference_parse(text[end + len(close_tag):],
                                         open_tag, close_tag)


def test_parse_actions_examples():
    assert parse_actions("reason... <code>x=2</code>", CFG) == [
        ("text", "reason... "), ("code", "x=2")]
    assert parse_actions("no tags at all", CFG) == [("text", "no tags at all")]
    assert parse_actions("<code>a</code> mid <code>b</code>", CFG) == [
        ("code", "a"), ("text", " mid "), ("code", "b")]


def test_parse_actions_unterminated_open_is_text():
    assert parse_actions("start <code>x=2", CFG) == [("text", "start <code>x=2")]
    assert parse_actions("</code> stray close", CFG) == [
        ("text", "</code> stray close")]


def test_parse_actions_against_brute_force_oracle():
    config = RolloutConfig(tool_open_tag="(", tool_close_tag=")")
    alphabet = ["a", "(", ")"]
    for length in range(0, 8):
        for letters in itertools.product(alphabet, repeat=length):
            text = "".join(letters)
            assert parse_actions(text, config) == reference_parse(text, "(", ")"), text


def test_parse_actions_concatenation_reproduces_input():
    config = RolloutConfig(tool_open_tag="[[", tool_close_tag="]]")
    alphabet = ["x", "[", "]"]
    for length in range(0, 9):
        for letters in itertools.product(alphabet, repeat=length):
            text = "".join(letters)
            rebuilt = "".join(
                content if kind == "text" else f"[[{content}]]"
                for kind, content in parse_actions(text, config))
            assert rebuilt == text


def reference_boxed(text: str, marker: str = "\\boxed"):
    """Reference scanner: last balanced-brace marker content."""
    best = None
    i = 0
    while i < len(text):
        if text.startswith(marker, i):
            j = i + len(marker)
            while j < len(text) and text[j].isspace():
                j += 1
            if j < len(text) and text[j] == "{":
                depth, j = 1, j + 1
                begin = j
                while j < len(text) and depth:
                    if text[j] == "{":
                        depth += 1
                    elif text[j] == "}":
                        depth -= 1
                    j += 1
                if depth == 0:
                    best = text[begin:j - 1]
        i += 1
    return best


def test_extract_final_answer_examples():
    assert extract_final_answer("... obtains $\\boxed{88}$") == "88"
    assert extract_final_answer("no marker here") is None
    assert extract_final_answer("\\boxed{1} then \\boxed{2+2}") == "2+2"


def test_extract_final_answer_nested_and_malformed():
    assert extract_final_answer("\\boxed{\\frac{1}{2}}") == "\\frac{1}{2}"
    assert extract_final_answer("\\boxed{good} \\boxed{unclosed") == "good"
    assert extract_final_answer("\\boxed no brace") is None
    assert extract_final_answer("\\boxed {спаced}") == "спаced"


def test_extract_final_answer_matches_reference():
    pieces = ["", "x", "\\boxed", "{", "}", "{1}", "{2+2}", " "]
    for combo in itertools.product(pieces, repeat=4):
        text = "".join(combo)
        assert extract_final_answer(text) == reference_boxed(text), repr(text)


def _gateway(table=None):
    return SandboxGateway(SandboxConfig(),
                          worker_factory=fake_worker_factory(table or {}))


def test_three_call_fixture(fake_gateway, three_call_policy):
    problem = Problem(id="necklace", statement="count the necklaces",
                      ground_truth="88")
    trajectory = run_rollout(problem, three_call_policy, fake_gateway, CFG)

    assert trajectory.stop_reason == STOP_ANSWERED
    assert trajectory.tool_call_count == 3
    assert trajectory.final_answer == "88"
    assert trajectory.mode == "tir"
    # Hand-enumerated turn structure: text/code pairs, then the answer text.
    actions = [t.action for t in trajectory.turns]
    assert actions == ["text", "code", "text", "code", "text", "code", "text"]
    observations = [t.observation.stdout for t in trajectory.turns
                    if t.action == "code"]
    assert observations == ["2206\n", "544\n", "88\n"]
    trajectory.validate()


def test_three_call_fixture_byte_stable():
    problem = Problem(id="necklace", statement="count the necklaces",
                      ground_truth="88")
    lines = set()
    for _ in range(3):
        gateway = _gateway(THREE_CALL_TABLE)
        try:
            trajectory = run_rollout(problem, MockPolicy(THREE_CALL_SCRIPT),
                                     gateway, CFG)
        finally:
            gateway.shutdown()
        lines.add(serialize_trajectory(trajectory))
    assert len(lines) == 1


def test_causality_prompt_contains_exactly_prior_turns(fake_gateway):
    policy = MockPolicy(THREE_CALL_SCRIPT)
    problem = Problem(id="p", statement="s")
    trajectory = run_rollout(problem, policy, fake_gateway, CFG)
    assert trajectory.stop_reason == STOP_ANSWERED

    # Query i must carry exactly the turns produced by queries < i; each
    # scripted output before the answer yields one text and one code turn.
    for i, request in enumerate(policy.requests):
        expected = build_messages(problem, trajectory.turns[:2 * i], CFG)
        assert request == expected
    # Observation k belongs to code action k, in order.
    code_turns = [t for t in trajectory.turns if t.action == "code"]
    for k, turn in enumerate(code_turns):
        expected_code = THREE_CALL_SCRIPT[k].split("<code>")[1].split("</code>")[0]
        assert turn.content == expected_code


def test_tool_budget_stops_at_exact_limit():
    script = ["a <code>one</code>", "b <code>two</code>", "c <code>three</code>",
              "d <code>four</code>"]
    config = RolloutConfig(max_tool_calls=2, max_tokens=10_000)
    gateway = _gateway({})
    try:
        trajectory = run_rollout(Problem(id="p", statement="s"),
                                 MockPolicy(script), gateway, config)
    finally:
        gateway.shutdown()
    assert trajectory.stop_reason == STOP_TOOL_BUDGET
    assert trajectory.tool_call_count == 2
    # The unexecutable third snippet is retained as text, not silently lost.
    assert trajectory.turns[-1].action == "text"
    assert trajectory.turns[-1].content == "three"


def test_token_budget_truncates_and_stops():
    config = RolloutConfig(max_tool_calls=8, max_tokens=25)
    gateway = _gateway({})
    try:
        trajectory = run_rollout(Problem(id="p", statement="s"),
                                 MockPolicy(["word " * 40], cycle=True),
                                 gateway, config)
    finally:
        gateway.shutdown()
    assert trajectory.stop_reason == STOP_TOKEN_BUDGET
    assert trajectory.token_count == 25


def test_token_budget_across_multiple_queries():
    config = RolloutConfig(max_tokens=30)
    gateway = _gateway({})
    try:
        trajectory = run_rollout(Problem(id="p", statement="s"),
                                 MockPolicy(["ten words " * 5], cycle=True),
                                 gateway, config)
    finally:
        gateway.shutdown()
    assert trajectory.stop_reason == STOP_TOKEN_BUDGET
    assert trajectory.token_count <= 30


def test_tools_disabled_keeps_code_as_text():
    script = ["try <code>x = 1</code> then \\boxed{5}"]
    gateway = _gateway({})
    try:
        trajectory = run_rollout(
            Problem(id="p", statement="s", tools_enabled=False),
            MockPolicy(script), gateway, CFG)
    finally:
        gateway.shutdown()
    assert trajectory.mode == "text_only"
    assert trajectory.tool_call_count == 0
    assert all(t.action == "text" for t in trajectory.turns)
    assert trajectory.stop_reason == STOP_ANSWERED
    assert trajectory.final_answer == "5"
    assert gateway.open_sessions() == 0


def test_policy_error_retains_partial_turns(fake_gateway):
    script = ["some reasoning first <code>valid = count_valid()\nprint(valid)</code>"]
    trajectory = run_rollout(Problem(id="p", statement="s"),
                             MockPolicy(script), fake_gateway, CFG)
    assert trajectory.stop_reason == STOP_POLICY_ERROR
    assert trajectory.tool_call_count == 1
    assert len(trajectory.turns) == 2


def test_policy_transport_failure(fake_gateway):
    class Flaky:
        def complete(self, messages, stop=None):
            raise PolicyError("connection refused")

    trajectory = run_rollout(Problem(id="p", statement="s"), Flaky(),
                             fake_gateway, CFG)
    assert trajectory.stop_reason == STOP_POLICY_ERROR
    assert trajectory.turns == ()


def test_empty_policy_output_is_policy_error(fake_gateway):
    trajectory = run_rollout(Problem(id="p", statement="s"),
                             MockPolicy([""]), fake_gateway, CFG)
    assert trajectory.stop_reason == STOP_POLICY_ERROR


def test_timeout_poisons_and_stops():
    table = {"while True: pass": {"status": "timeout"}}
    gateway = _gateway(table)
    try:
        script = ["run <code>while True: pass</code>", "never reached"]
        trajectory = run_rollout(Problem(id="p", statement="s"),
                                 MockPolicy(script), gateway, CFG)
    finally:
        gateway.shutdown()
    assert trajectory.stop_reason == STOP_SANDBOX_POISONED
    assert trajectory.turns[-1].observation.status == "timeout"


def test_worker_crash_sets_poisoned_stop():
    table = {"boom": {"crash": True}}
    gateway = _gateway(table)
    try:
        trajectory = run_rollout(Problem(id="p", statement="s"),
                                 MockPolicy(["go <code>boom</code>", "tail"]),
                                 gateway, CFG)
    finally:
        gateway.shutdown()
    assert trajectory.stop_reason == STOP_SANDBOX_POISONED
    assert trajectory.turns[-1].observation.error_type == "worker_crashed"


def test_answer_after_exhausting_tools_still_answers():
    script = ["a <code>one</code>", "b <code>two</code>",
              "after tools: \\boxed{7}"]
    config = RolloutConfig(max_tool_calls=2, max_tokens=1000)
    gateway = _gateway({})
    try:
        trajectory = run_rollout(Problem(id="p", statement="s"),
                                 MockPolicy(script), gateway, config)
    finally:
        gateway.shutdown()
    assert trajectory.stop_reason == STOP_ANSWERED
    assert trajectory.final_answer == "7"
    assert trajectory.tool_call_count == 2


def test_run_batch_preserves_job_order(fake_gateway):
    jobs = []
    for i in range(6):
        jobs.append((Problem(id=f"p{i}", statement="s"),
                     MockPolicy([f"answer \\boxed{{{i}}}"])))
    trajectories = run_batch(jobs, fake_gateway, RolloutConfig(concurrency=3))
    assert [t.final_answer for t in trajectories] == [str(i) for i in range(6)]


def test_serialize_roundtrip(fake_gateway, three_call_policy):
    trajectory = run_rollout(Problem(id="p", statement="s"),
                             three_call_policy, fake_gateway, CFG)
    line = serialize_trajectory(trajectory)
    assert deserialize_trajectory(line) == trajectory
    assert serialize_trajectory(deserialize_trajectory(line)) == line


def test_deserialize_rejects_observation_on_text_turn():
    record = _valid_record()
    record["turns"][0]["observation"] = {"status": "ok", "stdout": "", "stderr": "",
                                         "error_type": "", "duration_ms": 0,
                                         "truncated": False}
    with pytest.raises(TrajectoryInvariantError, match="observation"):
        deserialize_trajectory(record)


def test_deserialize_rejects_noncontiguous_indices():
    record = _valid_record()
    record["turns"][1]["index"] = 5
    with pytest.raises(TrajectoryInvariantError, match="contiguous"):
        deserialize_trajectory(record)


def test_deserialize_rejects_wrong_counts_and_modes():
    record = _valid_record()
    record["tool_call_count"] = 5
    with pytest.raises(TrajectoryInvariantError, match="tool_call_count"):
        deserialize_trajectory(record)

    record = _valid_record()
    record["mode"] = "text_only"
    with pytest.raises(TrajectoryInvariantError, match="text_only"):
        deserialize_trajectory(record)

    record = _valid_record()
    record["stop_reason"] = "answered"
    record["final_answer"] = None
    with pytest.raises(TrajectoryInvariantError, match="final_answer"):
        deserialize_trajectory(record)


def test_config_defaults_match_protocol_constants():
    config = RolloutConfig()
    assert config.max_tool_calls == 128
    assert config.max_tokens == 80_000


def test_config_validation():
    with pytest.raises(ValueError):
        RolloutConfig(tool_open_tag="", tool_close_tag="x")
    with pytest.raises(ValueError):
        RolloutConfig(tool_open_tag="same", tool_close_tag="same")
    with pytest.raises(ValueError):
        RolloutConfig(max_tokens=0)


def _valid_record():
    gateway = _gateway(THREE_CALL_TABLE)
    try:
        trajectory = run_rollout(Problem(id="p", statement="s"),
                                 MockPolicy(THREE_CALL_SCRIPT), gateway, CFG)
    finally:
        gateway.shutdown()
    return json.loads(serialize_trajectory(trajectory))
