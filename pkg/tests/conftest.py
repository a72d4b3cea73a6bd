import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cralloc.core import ActionSpaceSpec  # noqa: E402
from cralloc.simenv import EnvConfig, generate_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_env():
    return EnvConfig(num_requests=600, num_slices=4, seed=5)


@pytest.fixture(scope="session")
def small_requests(small_env):
    return generate_dataset(small_env)


@pytest.fixture(scope="session")
def tiny_space_env():
    return EnvConfig(num_requests=40, num_slices=2, seed=3,
                     action_space=ActionSpaceSpec(channel_count=1, queue_buckets=3, model_count=2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance report -------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, passed, detail)`` records and prints one line, then asserts."""

    def record(n: int, passed: bool, detail: str):
        ACCEPTANCE[n] = (bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {detail}")
        assert passed, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}")
