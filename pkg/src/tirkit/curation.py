"""Dataset curation pipelines over line-oriented record files.

Two workflows: selecting teacher prompts and composing trajectory sets for
supervised fine-tuning, and building a reinforcement-learning problem set
through quality, deduplication, verifiability and difficulty filters.
Every filter is a pure function of (records, config, seed): reruns produce
identical outputs, and records are never edited beyond their filter log.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .rollout import Trajectory
from .verify import normalize_answer

DEFAULT_OVERLONG_TOKENS = 16_000
DEFAULT_JACCARD_THRESHOLD = 0.8
DEFAULT_DIFFICULTY_SAMPLES = 8
DEFAULT_DIFFICULTY_MAX_CORRECT = 6
# "substantially exceeds" is an experiment knob; the chosen value is always
# echoed in run manifests.
DEFAULT_TOOL_ADVANTAGE_DELTA = 0.25
DEFAULT_TEXT_FRACTION = 0.5

_PROOF_OPENERS = (
    "prove", "show that", "demonstrate that", "justify", "explain why",
)
_DIAGRAM_MARKERS = (
    "as shown in the figure", "as shown in the diagram", "see figure",
    "see the figure", "see diagram", "see the diagram", "in the figure",
    "in the diagram", "refer to the figure", "refer to the diagram",
    "shown in the picture",
)


@dataclass
class CurationRecord:
    """One problem with provenance and an append-only filter log."""

    id: str
    statement: str
    answer: str
    source: dict = field(default_factory=dict)
    filter_log: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        start = self.source.get("line_start")
        end = self.source.get("line_end")
        if start is not None and end is not None and start > end:
            raise ValueError(f"record {self.id}: line_start > line_end")

    def log(self, filter_name: str, verdict: str, detail: str = "") -> None:
        self.filter_log.append(
            {"filter": filter_name, "verdict": verdict, "detail": detail})

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "statement": self.statement,
            "answer": self.answer,
            "source": self.source,
            "filter_log": list(self.filter_log),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CurationRecord":
        return cls(
            id=str(obj["id"]),
            statement=obj["statement"],
            answer=obj["answer"],
            source=obj.get("source") or {},
            filter_log=list(obj.get("filter_log") or []),
        )


@dataclass(frozen=True)
class PromptStats:
    """Teacher accuracy for one prompt with and without tool access."""

    prompt_id: str
    acc_tool: float
    acc_text: float
    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be positive")
        for name, acc in (("acc_tool", self.acc_tool), ("acc_text", self.acc_text)):
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
            if abs(acc * self.k - round(acc * self.k)) > 1e-9:
                raise ValueError(f"{name}={acc} is not a multiple of 1/{self.k}")


@dataclass(frozen=True)
class Chunk:
    line_start: int
    line_end: int
    text: str


def select_tool_advantaged(stats: Sequence[PromptStats],
                           delta: float = DEFAULT_TOOL_ADVANTAGE_DELTA) -> list[str]:
    """Prompt ids whose with-tool accuracy beats text-only by >= delta."""
    ks = {s.k for s in stats}
    if len(ks) > 1:
        raise ValueError(f"mismatched rollout counts across stats: {sorted(ks)}")
    return [s.prompt_id for s in stats if s.acc_tool - s.acc_text >= delta]


def overlong_filter(trajectories: Sequence[Trajectory],
                    max_tokens: int = DEFAULT_OVERLONG_TOKENS,
                    tokenizer=None) -> list[Trajectory]:
    """Retain trajectories within the token limit.

    When a tokenizer is supplied, lengths are recounted from turn content
    instead of trusting the recorded token_count.
    """
    retained = []
    for t in trajectories:
        count = t.token_count if tokenizer is None else \
            sum(tokenizer.count(turn.content) for turn in t.turns)
        if count <= max_tokens:
            retained.append(t)
    return retained


def mix_trajectories(tir_set: Sequence[Trajectory], text_set: Sequence[Trajectory],
                     text_fraction: float = DEFAULT_TEXT_FRACTION,
                     seed: int = 0) -> list[Trajectory]:
    """All TIR trajectories plus a seeded sample of text-only ones.

    The sample size solves n = ceil(f * (|tir| + n)) exactly:
    n = ceil(f/(1-f) * |tir|), capped at |text_set|.
    """
    if not 0.0 <= text_fraction <= 1.0:
        raise ValueError("text_fraction must lie in [0, 1]")
    tir_ids = {t.problem_id for t in tir_set}
    text_ids = {t.problem_id for t in text_set}
    overlap = tir_ids & text_ids
    if overlap:
        raise ValueError(f"sets are not disjoint by id: {sorted(overlap)[:5]}")
    if text_fraction == 0.0:
        return list(tir_set)
    if text_fraction == 1.0:
        if tir_set:
            raise ValueError("text_fraction=1 with a non-empty TIR set is unsatisfiable")
        return list(text_set)
    want = math.ceil(text_fraction / (1.0 - text_fraction) * len(tir_set))
    n_text = min(want, len(text_set))
    rng = random.Random(seed)
    sampled = rng.sample(list(text_set), n_text)
    return list(tir_set) + sampled


def quality_filter(records: Sequence[CurationRecord]) -> list[CurationRecord]:
    """Drop malformed records: blank statements or blank answers."""
    retained = []
    for record in records:
        if not record.statement.strip():
            record.log("quality", "dropped", "blank statement")
            continue
        if not record.answer.strip():
            record.log("quality", "dropped", "blank answer")
            continue
        record.log("quality", "retained")
        retained.append(record)
    return retained


def dedup(records: Sequence[CurationRecord],
          jaccard_threshold: float = DEFAULT_JACCARD_THRESHOLD) -> list[CurationRecord]:
    """Exact dedup on normalized statements, then near-dedup by 3-gram Jaccard.

    The earliest record of each duplicate cluster is kept; order is
    preserved and the result is deterministic.
    """
    retained: list[CurationRecord] = []
    seen_exact: set[str] = set()
    kept_shingles: list[set] = []
    for record in records:
        normalized = _normalize_statement(record.statement)
        if normalized in seen_exact:
            record.log("dedup", "dropped", "exact duplicate")
            continue
        shingles = _shingles(normalized)
        duplicate_of = None
        for kept_index, other in enumerate(kept_shingles):
            if _jaccard(shingles, other) >= jaccard_threshold:
                duplicate_of = retained[kept_index].id
                break
        if duplicate_of is not None:
            record.log("dedup", "dropped", f"near duplicate of {duplicate_of}")
            continue
        seen_exact.add(normalized)
        kept_shingles.append(shingles)
        record.log("dedup", "retained")
        retained.append(record)
    return retained


def verifiability_filter(records: Sequence[CurationRecord]) -> list[CurationRecord]:
    """Keep records whose answer normalizes to a stable non-empty form and
    whose statement is not proof-style or diagram-dependent."""
    retained = []
    for record in records:
        if not normalize_answer(record.answer):
            record.log("verifiability", "dropped", "answer normalizes to empty")
            continue
        reason = _exclusion_reason(record.statement)
        if reason:
            record.log("verifiability", "dropped", reason)
            continue
        record.log("verifiability", "retained")
        retained.append(record)
    return retained


def difficulty_filter(records: Sequence[CurationRecord],
                      runner: Callable[[CurationRecord, int], Sequence[bool]],
                      n: int = DEFAULT_DIFFICULTY_SAMPLES,
                      max_correct: int = DEFAULT_DIFFICULTY_MAX_CORRECT
                      ) -> list[CurationRecord]:
    """Retain problems the sampler solves fewer than `max_correct` times in n.

    The runner rolls the problem n times and reports per-attempt verdicts.
    A runner failure retains the record flagged undetermined; problems are
    never silently dropped because the measurement broke.
    """
    retained = []
    for record in records:
        try:
            verdicts = list(runner(record, n))
        except Exception as exc:
            record.log("difficulty", "undetermined", f"runner failed: {exc}")
            retained.append(record)
            continue
        correct = sum(1 for v in verdicts if v)
        if correct < max_correct:
            record.log("difficulty", "retained", f"correct={correct}/{n}")
            retained.append(record)
        else:
            record.log("difficulty", "dropped", f"correct={correct}/{n}")
    return retained


def chunk_document(document: str, chunk_lines: int,
                   overlap_lines: int = 0) -> list[Chunk]:
    """Split a line-indexed document into overlapping chunks.

    Chunks cover every line; consecutive chunks overlap by exactly
    overlap_lines except possibly the final, shorter chunk.  Coordinates
    are 1-based and inclusive for provenance reconstruction.
    """
    if chunk_lines < 1:
        raise ValueError("chunk_lines must be positive")
    if not 0 <= overlap_lines < chunk_lines:
        raise ValueError("overlap_lines must satisfy 0 <= overlap < chunk_lines")
    lines = document.splitlines()
    total = len(lines)
    if total == 0:
        return []
    step = chunk_lines - overlap_lines
    chunks = []
    start = 1
    while True:
        end = min(start + chunk_lines - 1, total)
        chunks.append(Chunk(line_start=start, line_end=end,
                            text="\n".join(lines[start - 1:end])))
        if end >= total:
            return chunks
        start += step


def rl_build(records: Sequence[CurationRecord],
             difficulty_runner: Callable[[CurationRecord, int], Sequence[bool]],
             jaccard_threshold: float = DEFAULT_JACCARD_THRESHOLD,
             n_samples: int = DEFAULT_DIFFICULTY_SAMPLES,
             max_correct: int = DEFAULT_DIFFICULTY_MAX_CORRECT
             ) -> tuple[list[CurationRecord], dict]:
    """Canonical RL dataset pipeline: quality, dedup, verifiability, difficulty.

    Returns the surviving records and a manifest with per-filter counts and
    the ids retained with zero correct attempts (possibly unsolvable or
    mis-keyed; kept by the fewer-than-max rule but worth reviewing).
    """
    counts = {"input": len(records)}
    stage = quality_filter(records)
    counts["quality"] = len(stage)
    stage = dedup(stage, jaccard_threshold)
    counts["dedup"] = len(stage)
    stage = verifiability_filter(stage)
    counts["verifiability"] = len(stage)
    stage = difficulty_filter(stage, difficulty_runner, n_samples, max_correct)
    counts["difficulty"] = len(stage)

    zero_correct = [
        r.id for r in stage
        if any(entry["filter"] == "difficulty"
               and entry["detail"] == f"correct=0/{n_samples}"
               for entry in r.filter_log)
    ]
    manifest = {
        "pipeline": "rl-build",
        "config": {
            "jaccard_threshold": jaccard_threshold,
            "difficulty_samples": n_samples,
            "difficulty_max_correct": max_correct,
        },
        "counts": counts,
        "zero_correct_retained": zero_correct,
    }
    return stage, manifest


def sft_select(stats: Sequence[PromptStats],
               delta: float = DEFAULT_TOOL_ADVANTAGE_DELTA,
               tir_set: Sequence[Trajectory] = (),
               text_set: Sequence[Trajectory] = (),
               text_fraction: float = DEFAULT_TEXT_FRACTION,
               seed: int = 0,
               max_tokens: int = DEFAULT_OVERLONG_TOKENS,
               tokenizer=None) -> tuple[list[str], list[Trajectory], dict]:
    """SFT pipeline: tool-advantaged prompt selection, overlong filtering of
    both trajectory sets, then text-into-TIR mixing."""
    selected = select_tool_advantaged(stats, delta)
    selected_set = set(selected)
    counts = {
        "stats": len(stats),
        "selected_prompts": len(selected),
        "tir_input": len(tir_set),
        "text_input": len(text_set),
    }
    tir_kept = overlong_filter(
        [t for t in tir_set if t.problem_id in selected_set], max_tokens, tokenizer)
    text_kept = overlong_filter(list(text_set), max_tokens, tokenizer)
    counts["tir_after_overlong"] = len(tir_kept)
    counts["text_after_overlong"] = len(text_kept)
    mixed = mix_trajectories(tir_kept, text_kept, text_fraction, seed)
    counts["mixed"] = len(mixed)
    manifest = {
        "pipeline": "sft-select",
        "config": {
            "delta": delta,
            "text_fraction": text_fraction,
            "max_tokens": max_tokens,
            "seed": seed,
        },
        "counts": counts,
        "selected_prompts": selected,
    }
    return selected, mixed, manifest


def _normalize_statement(statement: str) -> str:
    return re.sub(r"\s+", " ", statement).strip().lower()


def _shingles(normalized: str) -> set:
    words = normalized.split()
    if len(words) < 3:
        return {tuple(words)} if words else set()
    return {tuple(words[i:i + 3]) for i in range(len(words) - 2)}


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def _exclusion_reason(statement: str) -> str | None:
    lowered = _normalize_statement(statement)
    for opener in _PROOF_OPENERS:
        if lowered.startswith(opener):
            return f"proof-style opener: {opener!r}"
    for marker in _DIAGRAM_MARKERS:
        if marker in lowered:
            return f"diagram reference: {marker!r}"
    return None
