"""tirkit: orchestration for tool-integrated reasoning rollouts.

The pieces, bottom to top: a stateful code sandbox behind a session
gateway, a rollout engine that interleaves policy text with executed code,
rule-first answer verification, group-normalized advantage computation,
dataset curation pipelines, and diagnostics for reading training health.
"""

from .advantage import (
    AdvantageConfig,
    RewardedGroup,
    assign_token_advantages,
    dynamic_sampling_filter,
    group_advantages,
    rewarded_group,
    score_group,
    training_record,
)
from .curation import (
    Chunk,
    CurationRecord,
    PromptStats,
    chunk_document,
    dedup,
    difficulty_filter,
    mix_trajectories,
    overlong_filter,
    quality_filter,
    rl_build,
    select_tool_advantaged,
    sft_select,
    verifiability_filter,
)
from .diagnostics import (
    ProblemOutcomes,
    RolloutOutcome,
    avg_at_k,
    checkpoint_readiness,
    logprob_mismatch,
    pass_at_k,
    pass_at_k_exact,
    trajectory_stats,
    truncation_rate,
)
from .policy import HttpPolicyClient, MockPolicy, PolicyError, PolicyResponse
from .protocol import ExecResult, ProtocolError, WorkerFrame
from .rollout import (
    Problem,
    RolloutConfig,
    Trajectory,
    TrajectoryInvariantError,
    Turn,
    deserialize_trajectory,
    extract_final_answer,
    parse_actions,
    run_batch,
    run_rollout,
    serialize_trajectory,
)
from .sandbox import (
    CapacityError,
    FakeWorker,
    SandboxConfig,
    SandboxGateway,
    SessionPoisonedError,
    SubprocessWorker,
    UnknownSessionError,
    WorkerCrashedError,
    fake_worker_factory,
)
from .server import SandboxServer
from .tokenizer import WhitespaceTokenizer
from .verify import StubModelVerifier, Verdict, normalize_answer, rule_verify, verify

__version__ = "0.1.0"
