import numpy as np
import pytest

from fedcbdr.config import DatasetSpec, ExperimentConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    return ExperimentConfig(
        beta=0.5, rounds_per_task=3, lr=0.05, per_task_buffer=20,
        methods=["FedCBDR"], seeds=[0],
        dataset=DatasetSpec(num_classes=6, per_class=60, d_in=8, spread=1.0),
        hidden=[16, 8],
    )


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
