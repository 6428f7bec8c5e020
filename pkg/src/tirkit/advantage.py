"""Terminal rewards and group-normalized advantages.

Rewards are strictly binary outcome rewards; there is no format or
tool-use bonus.  A group of K rollouts for the same problem is normalized
to zero-mean advantages, groups whose rewards are all equal carry no
signal and are dropped by the dynamic-sampling filter, and token-level
assignment masks environment-injected tool-return tokens by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .rollout import ACTION_CODE, Trajectory, render_observation
from .tokenizer import DEFAULT_TOKENIZER
from .verify import Verdict, verify

STD_POPULATION = "population"
STD_SAMPLE = "sample"


@dataclass(frozen=True)
class AdvantageConfig:
    """Normalization knobs.

    epsilon guards the zero-variance denominator; std_estimator selects the
    divisor (population: K, sample: K-1); mask_tool_tokens zeroes advantage
    on tool-return tokens, which the policy did not generate.
    """

    epsilon: float = 1e-6
    std_estimator: str = STD_POPULATION
    mask_tool_tokens: bool = True

    def __post_init__(self) -> None:
        # epsilon=0 is permitted for exact-arithmetic comparisons; the
        # all-equal case is handled explicitly so it never divides by zero.
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.std_estimator not in (STD_POPULATION, STD_SAMPLE):
            raise ValueError(f"unknown std_estimator: {self.std_estimator!r}")


@dataclass(frozen=True)
class RewardedGroup:
    """K rewards for one problem plus their normalized advantages."""

    problem_id: str
    rewards: tuple[int, ...]
    advantages: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.rewards) < 2:
            raise ValueError("a group needs at least 2 trajectories")
        if len(self.rewards) != len(self.advantages):
            raise ValueError("rewards and advantages must align")
        if any(r not in (0, 1) for r in self.rewards):
            raise ValueError("rewards must be binary")

    @property
    def degenerate(self) -> bool:
        """True when every reward is equal, i.e. zero advantage signal."""
        return len(set(self.rewards)) == 1

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "rewards": list(self.rewards),
            "advantages": list(self.advantages),
        }


def score_group(trajectories: Sequence[Trajectory], truth: str,
                verifier: Callable[..., Verdict] = verify,
                fallback=None) -> list[int]:
    """Binary reward per trajectory: 1 iff its final answer verifies.

    Trajectories without a final answer score 0 without consulting any
    fallback.  All trajectories must belong to the same problem.
    """
    if len(trajectories) < 2:
        raise ValueError("a group needs at least 2 trajectories")
    ids = {t.problem_id for t in trajectories}
    if len(ids) > 1:
        raise ValueError(f"mixed problem ids in one group: {sorted(ids)}")
    rewards = []
    for t in trajectories:
        if t.final_answer is None:
            rewards.append(0)
            continue
        verdict = verifier(t.final_answer, truth, fallback)
        rewards.append(1 if verdict.correct else 0)
    return rewards


def group_advantages(rewards: Sequence[float],
                     config: AdvantageConfig | None = None) -> list[float]:
    """Normalized advantage per reward: (r - mean) / (std + epsilon).

    All-equal groups yield exactly zero for every entry regardless of
    epsilon; the output has the same length and order as the input.
    """
    config = config or AdvantageConfig()
    k = len(rewards)
    if k < 2:
        raise ValueError("need at least 2 rewards")
    if len(set(rewards)) == 1:
        return [0.0] * k
    mean = sum(rewards) / k
    divisor = k if config.std_estimator == STD_POPULATION else k - 1
    variance = sum((r - mean) ** 2 for r in rewards) / divisor
    denom = math.sqrt(variance) + config.epsilon
    return [(r - mean) / denom for r in rewards]


def rewarded_group(problem_id: str, rewards: Sequence[int],
                   config: AdvantageConfig | None = None) -> RewardedGroup:
    return RewardedGroup(
        problem_id=problem_id,
        rewards=tuple(int(r) for r in rewards),
        advantages=tuple(group_advantages(rewards, config)),
    )


def dynamic_sampling_filter(groups: Sequence[RewardedGroup]) -> list[RewardedGroup]:
    """Drop groups whose rewards are all equal; keep the rest unchanged, in order."""
    return [g for g in groups if not g.degenerate]


def assign_token_advantages(trajectory: Trajectory, advantage: float,
                            config: AdvantageConfig | None = None,
                            tokenizer=None,
                            prompt_tokens: int = 0) -> list[dict]:
    """Per-turn advantage vectors for one trajectory.

    Every policy-generated token position carries the trajectory advantage;
    observation tokens carry 0 when masking is on (they are off-policy
    context, not policy output); prompt tokens are always 0.  Each segment
    reports its turn index, role, 0/1 mask, and advantage vector.
    """
    config = config or AdvantageConfig()
    tokenizer = tokenizer or DEFAULT_TOKENIZER
    segments: list[dict] = []
    if prompt_tokens > 0:
        segments.append(_segment(-1, "prompt", prompt_tokens, 0, 0.0))
    for turn in trajectory.turns:
        n = tokenizer.count(turn.content)
        segments.append(_segment(turn.index, "assistant", n, 1, advantage))
        if turn.action == ACTION_CODE:
            m = tokenizer.count(render_observation(turn.observation))
            if config.mask_tool_tokens:
                segments.append(_segment(turn.index, "tool", m, 0, 0.0))
            else:
                segments.append(_segment(turn.index, "tool", m, 1, advantage))
    return segments


def training_record(ref: str, trajectory: Trajectory, reward: int,
                    advantage: float, config: AdvantageConfig | None = None,
                    tokenizer=None) -> dict:
    """Training-ready record: reference, reward, advantage, per-turn masks."""
    segments = assign_token_advantages(trajectory, advantage, config, tokenizer)
    return {
        "ref": ref,
        "problem_id": trajectory.problem_id,
        "reward": int(reward),
        "advantage": advantage,
        "segments": [
            {"turn": s["turn"], "role": s["role"], "mask": s["mask"]}
            for s in segments
        ],
    }


def _segment(turn: int, role: str, n: int, mask_value: int,
             advantage: float) -> dict:
    return {
        "turn": turn,
        "role": role,
        "mask": [mask_value] * n,
        "advantages": [advantage if mask_value else 0.0] * n,
    }
