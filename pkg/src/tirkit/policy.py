"""Policy clients.

A policy is anything that continues a conversation: the rollout engine
sends an ordered message list (roles: system, user, assistant, tool) plus
stop conditions, and gets back continuation text with optional per-token
log-probabilities.  Two implementations ship: an HTTP endpoint adapter and
a scripted mock for tests and offline pipelines.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import requests


class PolicyError(RuntimeError):
    """Transport or contract failure while querying a policy."""


@dataclass(frozen=True)
class PolicyResponse:
    text: str
    token_logprobs: tuple[float, ...] | None = None


class PolicyClient(Protocol):
    def complete(self, messages: Sequence[dict],
                 stop: Sequence[str] | None = None) -> PolicyResponse: ...


class MockPolicy:
    """Scripted policy for one rollout: returns `outputs` in order.

    Exhausting the script raises PolicyError unless `cycle` is set, in
    which case the script repeats.  Every request is recorded so tests can
    assert exactly what context the policy saw at each turn.
    """

    def __init__(self, outputs: Sequence[str], cycle: bool = False):
        self.outputs = list(outputs)
        self.cycle = cycle
        self.requests: list[list[dict]] = []
        self._cursor = 0

    def complete(self, messages: Sequence[dict],
                 stop: Sequence[str] | None = None) -> PolicyResponse:
        self.requests.append([dict(m) for m in messages])
        if self._cursor >= len(self.outputs):
            if not self.cycle or not self.outputs:
                raise PolicyError("mock policy script exhausted")
            self._cursor = 0
        text = self.outputs[self._cursor]
        self._cursor += 1
        return PolicyResponse(text=text)


class HttpPolicyClient:
    """Adapter for a remote policy endpoint.

    One POST per turn: {"messages": [...], "stop": [...]} in, JSON out with
    a "text" field, optional "token_logprobs", and optional "matched_stop"
    naming the stop sequence the backend consumed.  Backends that swallow
    the stop sequence report it via "matched_stop"; it is re-appended here
    so the engine always sees well-delimited output.

    The credential is read from the named environment variable at call
    time and sent as a bearer token; it never appears in configuration
    echoes or manifests.
    """

    def __init__(self, endpoint: str, credential_env: str | None = None,
                 timeout_s: float = 120.0, max_retries: int = 3,
                 backoff_s: float = 0.5, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.credential_env = credential_env
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._session = session or requests.Session()

    def complete(self, messages: Sequence[dict],
                 stop: Sequence[str] | None = None) -> PolicyResponse:
        body = {"messages": list(messages), "stop": list(stop or [])}
        headers = {}
        if self.credential_env:
            token = os.environ.get(self.credential_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"

        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = self._session.post(self.endpoint, json=body,
                                          headers=headers, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = exc
                time.sleep(self.backoff_s * (attempt + 1))
                continue
            if resp.status_code >= 500:
                last_error = PolicyError(f"endpoint returned {resp.status_code}")
                time.sleep(self.backoff_s * (attempt + 1))
                continue
            if resp.status_code != 200:
                raise PolicyError(f"endpoint returned {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()
                text = data["text"]
            except (ValueError, KeyError) as exc:
                raise PolicyError(f"malformed endpoint response: {exc}") from exc
            if data.get("matched_stop"):
                text += data["matched_stop"]
            logprobs = data.get("token_logprobs")
            return PolicyResponse(
                text=text,
                token_logprobs=tuple(logprobs) if logprobs is not None else None,
            )
        raise PolicyError(f"policy endpoint unreachable after "
                          f"{self.max_retries} attempts: {last_error}")
