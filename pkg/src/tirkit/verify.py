"""Verifiable-reward answer checking.

Rule-based equivalence runs first and decides the overwhelming majority of
math answers (integers, fractions, decimals, formatting noise).  Pairs the
rules cannot decide are handed to a pluggable model-verifier client; with
no client configured they are scored unverifiable, never guessed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Protocol

METHOD_RULE = "rule"
METHOD_MODEL = "model"
METHOD_UNVERIFIABLE = "unverifiable"

# Relative tolerance for decimal-vs-decimal comparison.  Benchmarks in this
# domain use exact integer answers, so the tolerance only absorbs formatting
# noise, not genuine approximation.
DECIMAL_REL_TOL = 1e-9

_FRAC_RE = re.compile(r"\\[dt]?frac\s*\{([^{}]*)\}\s*\{([^{}]*)\}")
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d\d\d(?:\D|$))")
_INT_RE = re.compile(r"^[+-]?\d+$")
_RATIO_RE = re.compile(r"^([+-]?\d+)\s*/\s*([+-]?\d+)$")
_DECIMAL_RE = re.compile(r"^[+-]?(?:\d+\.\d*|\.\d+)$")


@dataclass(frozen=True)
class Verdict:
    correct: bool
    method: str
    normalized_candidate: str = ""
    normalized_truth: str = ""
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "correct": self.correct,
            "method": self.method,
            "normalized_candidate": self.normalized_candidate,
            "normalized_truth": self.normalized_truth,
            "note": self.note,
        }


class ModelVerifierClient(Protocol):
    """Boundary to an external model-based verifier.  No model ships here."""

    def judge(self, statement: str, candidate: str, truth: str) -> bool: ...


class StubModelVerifier:
    """Table-driven stand-in for tests: (candidate, truth) -> bool."""

    def __init__(self, table: dict[tuple[str, str], bool] | None = None,
                 default: bool = False):
        self.table = dict(table or {})
        self.default = default
        self.calls = 0

    def judge(self, statement: str, candidate: str, truth: str) -> bool:
        self.calls += 1
        return self.table.get((candidate, truth), self.default)


def normalize_answer(raw: str | None) -> str:
    """Reduce an answer string to a stable canonical form.

    Strips markup wrappers, collapses whitespace, canonicalizes signs and
    leading zeros, reduces integer-valued rationals, and lowercases
    digit-free answers.  Idempotent: normalize(normalize(x)) == normalize(x).
    """
    if raw is None:
        return ""
    s = raw.strip()

    changed = True
    while changed:
        s, changed = _strip_wrappers(s)

    s = _FRAC_RE.sub(lambda m: f"{m.group(1).strip()}/{m.group(2).strip()}", s)
    s = s.replace("\\left", "").replace("\\right", "")
    s = re.sub(r"\\[,;!:]|\\quad|\\qquad", " ", s)
    s = _THOUSANDS_RE.sub("", s)
    s = re.sub(r"\s+", " ", s).strip()

    canonical = _canonical_number(s)
    if canonical is not None:
        return canonical
    if s and not any(ch.isdigit() for ch in s):
        return s.lower()
    return s


def rule_verify(candidate: str, truth: str) -> Verdict:
    """Decide equivalence by rules alone.

    correct iff the normalized forms are identical, or both sides parse as
    exact rationals with equal value, or both parse as finite decimals equal
    within DECIMAL_REL_TOL.  When none of those comparisons is applicable
    the pair is unverifiable by rules.
    """
    nc = normalize_answer(candidate)
    nt = normalize_answer(truth)
    if nc and nc == nt:
        return Verdict(True, METHOD_RULE, nc, nt)

    decided = False
    correct = False

    rc, rt = _try_rational(nc), _try_rational(nt)
    if rc is not None and rt is not None:
        decided = True
        correct = rc == rt

    if not correct:
        fc, ft = _try_finite_float(nc), _try_finite_float(nt)
        if fc is not None and ft is not None:
            decided = True
            correct = math.isclose(fc, ft, rel_tol=DECIMAL_REL_TOL, abs_tol=0.0)

    if decided:
        return Verdict(correct, METHOD_RULE, nc, nt)
    return Verdict(False, METHOD_UNVERIFIABLE, nc, nt)


def verify(candidate: str, truth: str,
           fallback: ModelVerifierClient | None = None,
           statement: str = "") -> Verdict:
    """Rule verdict when rules can decide; otherwise consult the fallback.

    The fallback is never called when the rule layer reached a decision.
    A fallback transport failure yields an unverifiable verdict carrying
    the failure note.
    """
    verdict = rule_verify(candidate, truth)
    if verdict.method == METHOD_RULE:
        return verdict
    if fallback is None:
        return verdict
    try:
        correct = bool(fallback.judge(statement, candidate, truth))
    except Exception as exc:
        return Verdict(False, METHOD_UNVERIFIABLE,
                       verdict.normalized_candidate, verdict.normalized_truth,
                       note=f"model fallback failed: {exc}")
    return Verdict(correct, METHOD_MODEL,
                   verdict.normalized_candidate, verdict.normalized_truth)


def _strip_wrappers(s: str) -> tuple[str, bool]:
    """Peel one enclosing markup layer; report whether anything changed."""
    s = s.strip()
    for open_, close in (("$$", "$$"), ("$", "$"), ("\\(", "\\)"), ("\\[", "\\]")):
        if s.startswith(open_) and s.endswith(close) and len(s) > len(open_) + len(close) - 1:
            return s[len(open_):len(s) - len(close)], True
    for macro in ("\\boxed", "\\text", "\\mathrm", "\\textbf"):
        if s.startswith(macro):
            rest = s[len(macro):].lstrip()
            if rest.startswith("{") and rest.endswith("}") and _braces_balanced(rest[1:-1]):
                return rest[1:-1], True
    if s.startswith("{") and s.endswith("}") and len(s) > 1 and _braces_balanced(s[1:-1]):
        return s[1:-1], True
    if s.endswith(".") and not _DECIMAL_RE.match(s):
        return s[:-1], True
    return s, False


def _braces_balanced(s: str) -> bool:
    depth = 0
    for ch in s:
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth < 0:
                return False
    return depth == 0


def _canonical_number(s: str) -> str | None:
    """Canonical string for integer / ratio / decimal forms, else None."""
    if _INT_RE.match(s):
        return str(int(s))
    m = _RATIO_RE.match(s)
    if m:
        num, den = int(m.group(1)), int(m.group(2))
        if den == 0:
            return None
        value = Fraction(num, den)
        if value.denominator == 1:
            return str(value.numerator)
        return f"{value.numerator}/{value.denominator}"
    if _DECIMAL_RE.match(s):
        sign = "-" if s.lstrip("+").startswith("-") and float(s) != 0 else ""
        digits = s.lstrip("+-")
        whole, _, frac = digits.partition(".")
        whole = whole.lstrip("0") or "0"
        frac = frac.rstrip("0")
        if not frac:
            return f"{sign}{whole}"
        return f"{sign}{whole}.{frac}"
    return None


def _try_rational(s: str) -> Fraction | None:
    if not s:
        return None
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        return None


def _try_finite_float(s: str) -> float | None:
    if not s:
        return None
    try:
        value = float(s)
    except ValueError:
        return None
    return value if math.isfinite(value) else None
