"""Acceptance gate: every criterion at its stated tolerance, one printed
pass/fail line per criterion (run with -s to see them inline)."""

from __future__ import annotations

import importlib.util
import itertools
import sys
import time
from contextlib import contextmanager
from fractions import Fraction

import pytest

from tirkit import (
    AdvantageConfig,
    MockPolicy,
    Problem,
    RolloutConfig,
    SandboxConfig,
    SandboxGateway,
    StubModelVerifier,
    SubprocessWorker,
    group_advantages,
    logprob_mismatch,
    pass_at_k_exact,
    rule_verify,
    run_rollout,
    serialize_trajectory,
    trajectory_stats,
    truncation_rate,
    verify,
)
from tirkit.curation import (
    CurationRecord,
    difficulty_filter,
    overlong_filter,
    rl_build,
    sft_select,
)
from tirkit.curation import PromptStats
from tirkit.records import dumps_canonical
from tirkit.rollout import (
    STOP_ANSWERED,
    STOP_TOKEN_BUDGET,
    STOP_TOOL_BUDGET,
    Trajectory,
    Turn,
)
from tirkit.sandbox import fake_worker_factory

from conftest import THREE_CALL_SCRIPT, THREE_CALL_TABLE
from test_advantage import oracle_advantages
from test_diagnostics import subset_average_empirical
from test_verify import RATIONAL_CORPUS, _oracle_equal


@contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        print(f"[FAIL] {name}")
        raise
    print(f"[PASS] {name}")


def test_advantage_math_exhaustive():
    with criterion("advantage math: 2^K vectors vs exact oracle, 1e-12"):
        start = time.perf_counter()
        for k in (2, 4, 8):
            for bits in itertools.product((0, 1), repeat=k):
                got = group_advantages(list(bits), AdvantageConfig())
                want = oracle_advantages(list(bits))
                assert all(abs(g - w) < 1e-12 for g, w in zip(got, want)), bits
                if len(set(bits)) == 1:
                    assert got == [0.0] * k
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0, f"took {elapsed:.3f}s"


def test_pass_at_k_estimator_equivalence():
    with criterion("pass@k: unbiased equals exhaustive subset average, exact"):
        start = time.perf_counter()
        n = 8
        for c in range(n + 1):
            flags = [True] * c + [False] * (n - c)
            for k in range(1, n + 1):
                exact = pass_at_k_exact(n, c, k)
                assert isinstance(exact, Fraction)
                assert exact == subset_average_empirical(flags, k), (c, k)
        assert pass_at_k_exact(8, 1, 4) == Fraction(1, 2)
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0, f"took {elapsed:.3f}s"


def _fake_gateway(table):
    return SandboxGateway(SandboxConfig(),
                          worker_factory=fake_worker_factory(table))


def test_rollout_protocol_fixture():
    with criterion("rollout protocol: 3-call fixture, byte-stable, budgets"):
        problem = Problem(id="necklace", statement="count the necklaces",
                          ground_truth="88")
        serialized = set()
        for _ in range(3):
            gateway = _fake_gateway(THREE_CALL_TABLE)
            try:
                trajectory = run_rollout(problem, MockPolicy(THREE_CALL_SCRIPT),
                                         gateway)
            finally:
                gateway.shutdown()
            assert trajectory.tool_call_count == 3
            assert trajectory.stop_reason == STOP_ANSWERED
            serialized.add(serialize_trajectory(trajectory))
        assert len(serialized) == 1, "serialization is not byte-stable"

        # Tool budget: stops at exactly max_tool_calls=2.
        gateway = _fake_gateway({})
        try:
            script = ["a <code>c1</code>", "b <code>c2</code>", "c <code>c3</code>"]
            capped = run_rollout(Problem(id="p", statement="s"),
                                 MockPolicy(script), gateway,
                                 RolloutConfig(max_tool_calls=2))
        finally:
            gateway.shutdown()
        assert capped.stop_reason == STOP_TOOL_BUDGET
        assert capped.tool_call_count == 2

        # Token budget: stops at the configured cap.
        gateway = _fake_gateway({})
        try:
            long_winded = run_rollout(
                Problem(id="p", statement="s"),
                MockPolicy(["many words here " * 30], cycle=True),
                gateway, RolloutConfig(max_tokens=40))
        finally:
            gateway.shutdown()
        assert long_winded.stop_reason == STOP_TOKEN_BUDGET
        assert long_winded.token_count <= 40


def test_verifier_criteria():
    with criterion("verifier: reference pair, 50-pair corpus, short-circuit"):
        assert rule_verify("88", "88").correct
        assert not rule_verify("75", "88").correct

        assert len(RATIONAL_CORPUS) >= 50
        for cand, truth, expected in RATIONAL_CORPUS:
            assert _oracle_equal(cand, truth) == expected
            verdict = rule_verify(cand, truth)
            assert verdict.method == "rule"
            assert verdict.correct == expected, (cand, truth)

        stub = StubModelVerifier(default=True)
        assert verify("88", "88", fallback=stub).method == "rule"
        assert verify("75", "88", fallback=stub).method == "rule"
        assert stub.calls == 0
        assert verify("x+y", "y+x", fallback=stub).method == "model"
        assert stub.calls == 1


def _difficulty_records():
    return [
        CurationRecord(id="c5", statement="Count the kept orbits carefully.",
                       answer="88"),
        CurationRecord(id="c6", statement="Sum the first even squares now.",
                       answer="120"),
    ]


def test_curation_criteria(tmp_path):
    with criterion("curation: determinism, difficulty and overlong boundaries"):
        # Difficulty boundary: 5 of 8 retained, 6 of 8 dropped.
        def runner(record, n):
            correct = 5 if record.id == "c5" else 6
            return [True] * correct + [False] * (n - correct)

        kept = difficulty_filter(_difficulty_records(), runner)
        assert [r.id for r in kept] == ["c5"]

        # Overlong boundary: 15999 retained, 16001 dropped.
        def traj(pid, tokens):
            return Trajectory(problem_id=pid,
                              turns=(Turn(0, "text", " ".join(["w"] * tokens), None),),
                              final_answer="1", stop_reason=STOP_ANSWERED,
                              token_count=tokens, tool_call_count=0, mode="tir")

        kept_t = overlong_filter([traj("short", 15_999), traj("long", 16_001)])
        assert [t.problem_id for t in kept_t] == ["short"]

        # Pipeline determinism, byte-for-byte on canonical serialization.
        def run_rl():
            records = [
                CurationRecord(id="a", statement="Count the lattice points.",
                               answer="13"),
                CurationRecord(id="b", statement="Count the lattice points.",
                               answer="13"),
                CurationRecord(id="c", statement="Prove that it diverges.",
                               answer="1"),
            ]
            kept, manifest = rl_build(records, lambda r, n: [False] * n)
            lines = [dumps_canonical(r.to_dict()) for r in kept]
            return "\n".join(lines) + "\n" + dumps_canonical(manifest)

        def run_sft():
            stats = [PromptStats("s1", 0.75, 0.25, k=8),
                     PromptStats("s2", 0.5, 0.5, k=8)]
            tir = [traj("s1", 100)]
            text = [traj(f"x{i}", 100) for i in range(4)]
            selected, mixed, manifest = sft_select(
                stats, delta=0.25, tir_set=tir, text_set=text,
                text_fraction=0.5, seed=7)
            lines = [dumps_canonical(t.to_dict()) for t in mixed]
            return dumps_canonical(selected) + "\n".join(lines) + \
                dumps_canonical(manifest)

        assert run_rl() == run_rl()
        assert run_sft() == run_sft()


def test_diagnostics_criteria():
    with criterion("diagnostics: 0.44 truncation, fixture stats, offset law"):
        def traj(pid, stop, calls=0, tokens=100):
            turns = [Turn(0, "text", "reasoning " * 5, None)]
            return Trajectory(problem_id=pid, turns=tuple(turns),
                              final_answer="1" if stop == STOP_ANSWERED else None,
                              stop_reason=stop, token_count=tokens,
                              tool_call_count=calls,
                              mode="text_only" if calls == 0 else "tir")

        # 100 trajectories, 44 budget-stopped (token and tool budgets both count).
        fleet = [traj(f"t{i}", STOP_TOKEN_BUDGET) for i in range(30)]
        fleet += [traj(f"u{i}", STOP_TOOL_BUDGET) for i in range(14)]
        fleet += [traj(f"a{i}", STOP_ANSWERED) for i in range(56)]
        assert len(fleet) == 100
        assert truncation_rate(fleet) == pytest.approx(0.44)

        # Hand-enumerated stats fixture: calls [3, 0, 1].
        def traj_calls(pid, calls, tokens):
            turns = []
            for i in range(calls):
                turns.append(Turn(len(turns), "code", "z",
                                  _ok_observation()))
            turns.append(Turn(len(turns), "text", "done", None))
            turns = [Turn(i, t.action, t.content, t.observation)
                     for i, t in enumerate(turns)]
            return Trajectory(problem_id=pid, turns=tuple(turns),
                              final_answer="1", stop_reason=STOP_ANSWERED,
                              token_count=tokens, tool_call_count=calls,
                              mode="tir" if calls else "text_only")

        fixture = [traj_calls("a", 3, 90), traj_calls("b", 0, 30),
                   traj_calls("c", 1, 60)]
        stats = trajectory_stats(fixture)
        assert stats["tool_use_fraction"] == pytest.approx(2 / 3)
        assert stats["mean_tool_calls"] == pytest.approx(4 / 3)
        assert stats["mean_token_count"] == pytest.approx(60.0)

        # Constant-offset law at 1e-12.
        import random
        rng = random.Random(1)
        stream = [rng.uniform(-10, 0) for _ in range(1000)]
        delta = 0.375
        stats = logprob_mismatch(stream, [x + delta for x in stream])
        assert abs(stats["mean_abs_diff"] - delta) < 1e-12
        assert abs(stats["max_abs_diff"] - delta) < 1e-12


def _ok_observation():
    from tirkit.protocol import ExecResult
    return ExecResult(id=0, status="ok", stdout="1\n")


def test_defaults_audit():
    with criterion("defaults audit: max_tool_calls=128, max_tokens=80000"):
        config = RolloutConfig()
        assert config.max_tool_calls == 128
        assert config.max_tokens == 80_000


# ---------------------------------------------------------------------------
# Secondary component: the real interpreter worker.

def _worker_available() -> bool:
    return importlib.util.find_spec("tir_worker") is not None


needs_worker = pytest.mark.skipif(not _worker_available(),
                                  reason="worker package not installed")


@needs_worker
def test_real_worker_statefulness():
    with criterion("real worker: state, fresh namespace, timeout, output cap"):
        start = time.perf_counter()
        config = SandboxConfig(pool_size=2, default_timeout_ms=3000,
                               worker_launch_command=f"{sys.executable} -m tir_worker")
        with SandboxGateway(config) as gateway:
            session = gateway.open_session()
            assert gateway.execute(session, "x=2").status == "ok"
            result = gateway.execute(session, "print(x*3)")
            assert result.stdout == "6\n"
            gateway.close_session(session)

            fresh = gateway.open_session()
            result = gateway.execute(fresh, "print(x)")
            assert result.status == "error"
            assert "NameError" in result.error_type
            gateway.close_session(fresh)

            doomed = gateway.open_session()
            result = gateway.execute(doomed, "while True: pass", timeout_ms=300)
            assert result.status == "timeout"
            assert result.duration_ms >= 300
            from tirkit import SessionPoisonedError
            with pytest.raises(SessionPoisonedError):
                gateway.execute(doomed, "print(1)")
            gateway.close_session(doomed)

            big = gateway.open_session()
            result = gateway.execute(big, "print('x' * (1024 * 1024))")
            assert result.truncated is True
            total = len(result.stdout.encode()) + len(result.stderr.encode())
            assert total <= 2 * config.output_cap_bytes
            gateway.close_session(big)
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0, f"took {elapsed:.3f}s"


@needs_worker
def test_real_worker_protocol_conformance():
    with criterion("real worker: identical frame corpus as the fake"):
        from test_worker_protocol import CORPUS, fake_table
        from tirkit import FakeWorker
        from tirkit.protocol import WorkerFrame

        for factory in (lambda: FakeWorker(fake_table()),
                        lambda: SubprocessWorker([sys.executable, "-m", "tir_worker"])):
            worker = factory()
            try:
                for index, (op, code, checks) in enumerate(CORPUS, start=1):
                    frame = WorkerFrame(id=index, op=op, code=code,
                                        timeout_ms=5000 if op == "exec" else None)
                    result = worker.request(frame)
                    assert result.id == index
                    assert result.status == checks["status"], (op, code, result)
                    if "stdout" in checks:
                        assert result.stdout == checks["stdout"], (op, code, result)
                    if "error_type" in checks:
                        assert checks["error_type"] in result.error_type
            finally:
                worker.close()
