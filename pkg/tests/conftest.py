"""Shared fixtures: the scripted three-call rollout and its fake sandbox."""

from __future__ import annotations

import pytest

from tirkit import MockPolicy, RolloutConfig, SandboxConfig, SandboxGateway
from tirkit.sandbox import fake_worker_factory

# A rollout in which the policy interleaves text with three code actions,
# builds on sandbox state, and then answers.  Turn structure is enumerated
# by hand in the tests that consume this.
THREE_CALL_SCRIPT = [
    "First count the raw colorings. <code>valid = count_valid()\nprint(valid)</code>",
    "Now the symmetric ones. <code>sym = count_symmetric(valid)\nprint(sym)</code>",
    "Combine both counts. <code>print((valid_total + sym_total) // 32)</code>",
    "Both routes agree, so the answer is \\boxed{88}.",
]

THREE_CALL_TABLE = {
    "valid = count_valid()\nprint(valid)": {"stdout": "2206\n"},
    "sym = count_symmetric(valid)\nprint(sym)": {"stdout": "544\n"},
    "print((valid_total + sym_total) // 32)": {"stdout": "88\n"},
}


@pytest.fixture
def three_call_policy():
    return MockPolicy(THREE_CALL_SCRIPT)


@pytest.fixture
def fake_gateway():
    gateway = SandboxGateway(
        SandboxConfig(pool_size=4),
        worker_factory=fake_worker_factory(THREE_CALL_TABLE),
    )
    yield gateway
    gateway.shutdown()


@pytest.fixture
def small_config():
    return RolloutConfig(max_tool_calls=8, max_tokens=500)
