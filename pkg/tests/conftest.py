from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ivlc.data import synthetic_blobs
from ivlc.intervals import make_spec
from ivlc.models import ModelConfig, TrainConfig, build_model, train

settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

# one line per acceptance criterion, printed after the run (see
# pytest_terminal_summary); populated by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def blob_data():
    return synthetic_blobs(3, 60, 6, 0.08, seed=101)


@pytest.fixture(scope="session")
def tiny_spec():
    return make_spec(0.0, 1.0, 3.0, 3, seed=5)


@pytest.fixture(scope="session")
def tiny_interval_model(blob_data, tiny_spec):
    cfg = ModelConfig(input_shape=(6,), hidden=(16,), head="interval", k=3)
    model = build_model(cfg, seed=2, spec=tiny_spec)
    train(model, blob_data, TrainConfig(epochs=40, lr=0.05, batch_size=8, seed=3))
    return model


@pytest.fixture(scope="session")
def tiny_traditional_model(blob_data):
    cfg = ModelConfig(input_shape=(6,), hidden=(16,), head="traditional", k=3)
    model = build_model(cfg, seed=2)
    train(model, blob_data, TrainConfig(epochs=40, lr=0.1, batch_size=8, seed=3))
    return model
