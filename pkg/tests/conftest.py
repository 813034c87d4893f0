import numpy as np
import pytest

from attention_focus.config import ExperimentConfig, with_overrides


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**changes) -> ExperimentConfig:
    """Default geometry, tiny dataset and schedule so a run takes seconds."""
    base = with_overrides(ExperimentConfig(), data={"samples_per_class": 12}, optim={"epochs": 2, "batch_size": 16})
    return with_overrides(base, **changes) if changes else base


@pytest.fixture
def tiny_cfg():
    return small_config()


# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")
