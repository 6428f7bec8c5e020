"""Token counting.

Budgets like the 80K rollout cap or the 16K overlong filter are defined in
tokens of whatever tokenizer the deployment uses.  That tokenizer lives
outside this toolkit, so everything here is written against a minimal
interface with a whitespace-splitting default that is good enough for
budget enforcement and tests.
"""

from __future__ import annotations

from typing import Protocol


class Tokenizer(Protocol):
    def count(self, text: str) -> int: ...

    def split(self, text: str) -> list[str]: ...


class WhitespaceTokenizer:
    """Counts whitespace-delimited tokens.  Deterministic and stateless."""

    def count(self, text: str) -> int:
        return len(text.split())

    def split(self, text: str) -> list[str]:
        return text.split()

    def truncate(self, text: str, max_tokens: int) -> str:
        """Keep the first `max_tokens` tokens, preserving single spacing."""
        tokens = text.split()
        if len(tokens) <= max_tokens:
            return text
        return " ".join(tokens[:max_tokens])


DEFAULT_TOKENIZER = WhitespaceTokenizer()
