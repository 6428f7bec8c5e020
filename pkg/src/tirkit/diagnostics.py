"""Rollout-set diagnostics: accuracy estimators, trajectory statistics,
probability-mismatch measurement, and checkpoint readiness flags.

All aggregations accumulate in input order before dividing, so results are
bit-stable for a given input file regardless of how callers parallelize
upstream work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .rollout import (
    ACTION_CODE,
    MODE_TIR,
    STOP_TOKEN_BUDGET,
    STOP_TOOL_BUDGET,
    Trajectory,
)
from .tokenizer import DEFAULT_TOKENIZER

ESTIMATOR_EMPIRICAL = "empirical"
ESTIMATOR_UNBIASED = "unbiased"

# Probability below which a token counts as "extremely low probability".
# The threshold is a report parameter, not a law.
DEFAULT_LOW_PROB_THRESHOLD = 1e-4


@dataclass(frozen=True)
class RolloutOutcome:
    correct: bool
    token_count: int = 0
    tool_call_count: int = 0
    truncated: bool = False
    code_token_counts: tuple[int, ...] = ()


@dataclass(frozen=True)
class ProblemOutcomes:
    problem_id: str
    rollouts: tuple[RolloutOutcome, ...]

    def __post_init__(self) -> None:
        if not self.rollouts:
            raise ValueError(f"problem {self.problem_id}: needs at least one rollout")

    @property
    def n(self) -> int:
        return len(self.rollouts)

    @property
    def correct_count(self) -> int:
        return sum(1 for r in self.rollouts if r.correct)


def avg_at_k(outcomes: Sequence[ProblemOutcomes], k: int) -> float:
    """Mean over problems of (correct among the first k) / k."""
    if k < 1:
        raise ValueError("k must be positive")
    total = Fraction(0)
    for problem in outcomes:
        if problem.n < k:
            raise ValueError(
                f"problem {problem.problem_id}: has {problem.n} rollouts, need {k}")
        correct = sum(1 for r in problem.rollouts[:k] if r.correct)
        total += Fraction(correct, k)
    if not outcomes:
        raise ValueError("no outcomes")
    return float(total / len(outcomes))


def pass_at_k_exact(n: int, c: int, k: int) -> Fraction:
    """Unbiased per-problem pass@k as an exact rational: 1 - C(n-c,k)/C(n,k)."""
    if not 0 <= c <= n:
        raise ValueError("need 0 <= c <= n")
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


def pass_at_k(outcomes: Sequence[ProblemOutcomes], k: int,
              estimator: str = ESTIMATOR_UNBIASED) -> float:
    """Probability that at least one of k samples solves a problem.

    empirical: fraction of problems with >= 1 correct among the first k
    rollouts.  unbiased: mean over problems of 1 - C(n-c,k)/C(n,k) with c
    counted over all n rollouts.
    """
    if not outcomes:
        raise ValueError("no outcomes")
    if estimator not in (ESTIMATOR_EMPIRICAL, ESTIMATOR_UNBIASED):
        raise ValueError(f"unknown estimator: {estimator!r}")
    for problem in outcomes:
        if k > problem.n:
            raise ValueError(
                f"problem {problem.problem_id}: k={k} exceeds n={problem.n}")
    if estimator == ESTIMATOR_EMPIRICAL:
        hits = sum(1 for p in outcomes
                   if any(r.correct for r in p.rollouts[:k]))
        return hits / len(outcomes)
    total = Fraction(0)
    for problem in outcomes:
        total += pass_at_k_exact(problem.n, problem.correct_count, k)
    return float(total / len(outcomes))


def trajectory_stats(trajectories: Sequence[Trajectory], tokenizer=None,
                     tir_only: bool = False) -> dict:
    """Mean calls, mean length, mean snippet tokens, and tool-use fraction.

    With tir_only set, calls and length are measured only on TIR-mode
    trajectories.  Snippet length averages over all code turns and is
    reported absent (None), not zero, when there are none.
    """
    if not trajectories:
        raise ValueError("no trajectories")
    tokenizer = tokenizer or DEFAULT_TOKENIZER

    scope = [t for t in trajectories if t.mode == MODE_TIR] if tir_only \
        else list(trajectories)
    snippet_tokens = [tokenizer.count(turn.content)
                      for t in trajectories for turn in t.turns
                      if turn.action == ACTION_CODE]
    return {
        "mean_tool_calls": _mean([t.tool_call_count for t in scope]),
        "mean_token_count": _mean([t.token_count for t in scope]),
        "mean_snippet_tokens": _mean(snippet_tokens) if snippet_tokens else None,
        "tool_use_fraction":
            sum(1 for t in trajectories if t.tool_call_count >= 1)
            / len(trajectories),
        "trajectories": len(trajectories),
        "tir_only": tir_only,
    }


def truncation_rate(trajectories: Sequence[Trajectory]) -> float:
    """Fraction of trajectories stopped by a token or tool budget."""
    if not trajectories:
        raise ValueError("truncation rate is undefined on an empty set")
    stopped = sum(1 for t in trajectories
                  if t.stop_reason in (STOP_TOKEN_BUDGET, STOP_TOOL_BUDGET))
    return stopped / len(trajectories)


def logprob_mismatch(stream_a: Sequence[float], stream_b: Sequence[float],
                     mask: Sequence[int] | None = None,
                     low_prob_threshold: float = DEFAULT_LOW_PROB_THRESHOLD) -> dict:
    """Elementwise statistics between two aligned log-probability streams.

    fraction_below is the share of positions where either stream assigns
    probability under the threshold.  Both streams must be aligned to the
    same token positions under the same mask.
    """
    if len(stream_a) != len(stream_b):
        raise ValueError(
            f"stream lengths differ: {len(stream_a)} vs {len(stream_b)}")
    if mask is not None and len(mask) != len(stream_a):
        raise ValueError("mask length does not match the streams")
    log_threshold = math.log(low_prob_threshold)

    count = 0
    total_abs = 0.0
    max_abs = 0.0
    below = 0
    for position, (a, b) in enumerate(zip(stream_a, stream_b)):
        if mask is not None and not mask[position]:
            continue
        count += 1
        diff = abs(a - b)
        total_abs += diff
        if diff > max_abs:
            max_abs = diff
        if a < log_threshold or b < log_threshold:
            below += 1
    if count == 0:
        raise ValueError("no unmasked positions")
    return {
        "mean_abs_diff": total_abs / count,
        "max_abs_diff": max_abs,
        "fraction_below": below / count,
        "low_prob_threshold": low_prob_threshold,
        "positions": count,
    }


def checkpoint_readiness(reports: Sequence[dict],
                         pass_eps: float = 1e-3,
                         length_growth_threshold: float = 0.10) -> list[dict]:
    """Descriptive flags over a checkpoint sequence; never a selection.

    Each report needs pass_at_k (mapping k to value), mean_token_count,
    truncation_rate, and avg_at_k.  Two signatures are flagged per
    checkpoint relative to its predecessor: pass@k stalling while mean
    length grows, and truncation rising while single-sample accuracy
    falls.
    """
    if len(reports) < 2:
        raise ValueError("need at least 2 checkpoint reports")
    assessments = []
    for index, report in enumerate(reports):
        flags: list[str] = []
        deltas: dict = {}
        if index > 0:
            prev = reports[index - 1]
            pass_prev, pass_cur = _top_pass(prev), _top_pass(report)
            len_prev = prev.get("mean_token_count")
            len_cur = report.get("mean_token_count")
            if None not in (pass_prev, pass_cur, len_prev, len_cur) and len_prev > 0:
                growth = (len_cur - len_prev) / len_prev
                deltas["pass_at_k_delta"] = pass_cur - pass_prev
                deltas["length_growth"] = growth
                if pass_cur - pass_prev <= pass_eps and growth >= length_growth_threshold:
                    flags.append("length_growing_while_passk_flat")
            trunc_prev = prev.get("truncation_rate")
            trunc_cur = report.get("truncation_rate")
            acc_prev = prev.get("avg_at_k")
            acc_cur = report.get("avg_at_k")
            if None not in (trunc_prev, trunc_cur, acc_prev, acc_cur):
                deltas["truncation_delta"] = trunc_cur - trunc_prev
                deltas["accuracy_delta"] = acc_cur - acc_prev
                if trunc_cur > trunc_prev and acc_cur < acc_prev - pass_eps:
                    flags.append("truncation_rising_accuracy_falling")
        assessments.append({
            "index": index,
            "label": report.get("label", str(index)),
            "flags": flags,
            "deltas": deltas,
        })
    return assessments


def _top_pass(report: dict) -> float | None:
    table = report.get("pass_at_k") or {}
    if not table:
        return None
    top_k = max(int(k) for k in table)
    return table.get(top_k, table.get(str(top_k)))


def _mean(values: Sequence[float]) -> float:
    if not values:
        return 0.0
    return sum(values) / len(values)
