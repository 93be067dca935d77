import numpy as np
import pytest
import torch

from adtransfer.config import ExperimentConfig, default_profiles

torch.set_num_threads(1)


@pytest.fixture
def profiles():
    return default_profiles()


@pytest.fixture
def tiny_cfg():
    """Seconds-scale experiment: small data, small networks, few iterations."""
    cfg = ExperimentConfig(n_source=150, n_target=40, eval_episodes=50)
    cfg = cfg.with_transfer(iterations=60, source_iterations=60, batch_size=32, log_every=20, patience=0)
    cfg.transfer.nsr.hidden = (16, 8)
    cfg.transfer.nsr.M = 8
    cfg.transfer.nsr.max_steps = 20
    cfg.transfer.agent.hidden = (16,)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def report(number, ok, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
