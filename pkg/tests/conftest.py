import numpy as np
import pytest

from hyperedit.diffusion import make_linear_schedule
from hyperedit.env import EditTask, GenConfig
from hyperedit.space import p2p_space


@pytest.fixture
def space():
    return p2p_space()


@pytest.fixture
def sched():
    return make_linear_schedule(10)


@pytest.fixture
def gen():
    return GenConfig()


def make_task(i_src, c_edit, drift, mask, leak=0.3, kappa=0.15, damp=0.7, suppress=0.0, eps=None, seed=0):
    i_src = np.asarray(i_src, dtype=float)
    return EditTask(i_src, c_edit, drift, mask, leak, kappa, damp, suppress,
                    np.zeros_like(i_src) if eps is None else eps, seed)


ACCEPTANCE_LINES = []


def report(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
