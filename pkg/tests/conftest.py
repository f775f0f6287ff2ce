import numpy as np
import pytest

from bayes_lbn.datagen import assign_weights, generate_dag


def random_model(rng, p_max=8, d_M_cap=3, sigma2=None):
    """Random equal-or-given-variance SEM with weights in +-(0.5, 1.0)."""
    p = int(rng.integers(2, p_max + 1))
    dag = generate_dag(p, d_M_cap, rng)
    s2 = np.ones(p) if sigma2 is None else sigma2(rng, p)
    return assign_weights(dag, (0.5, 1.0), rng, sigma2=s2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Store a one-line verdict for the acceptance summary."""

    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
