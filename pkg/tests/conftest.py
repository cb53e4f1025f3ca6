import numpy as np
import pytest

from ffidelity.harness import GammaDigitTask, digit_models


@pytest.fixture(scope="session")
def digit_setup():
    """Seed-0 digit task (gamma 0.2) with its original and fine-tuned MLPs."""
    task = GammaDigitTask(gamma=0.2, seed=0)
    tr, ev, model, model_r = digit_models(task, beta=0.1)
    return {"task": task, "train": tr, "eval": ev, "model": model, "model_r": model_r}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
