import copy

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("detkd", deadline=None, max_examples=60)
settings.load_profile("detkd")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "teacher": {"num_levels": 2, "num_classes": 3},
    "student": {"num_levels": 2, "num_classes": 3},
    "scenes": {"height": 32, "width": 32, "num_classes": 3, "size_range": [8, 16], "num_train": 6, "num_eval": 4},
    "proposals": {"per_scene": 16, "eval_per_scene": 8},
    "teacher_optim": {"steps": 30, "lr0": 0.02},
    "optim": {"steps": 8, "lr0": 0.02},
    "ckd": {"queue_size": 32, "num_negatives": 16},
    "analysis": {"num_scenes": 3, "sgfi_steps": 5},
    "mi": {"steps": 5, "k_list": [4, 8], "batch": 16, "eval_batches": 2},
    "seeds": [0, 1],
}


@pytest.fixture
def tiny_doc():
    """A small config that trains in about a second."""
    return copy.deepcopy(TINY)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
