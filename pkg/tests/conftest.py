import numpy as np
import pytest

from helmschwarz.problem import build_problem


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_problem():
    """k=5, n=8, P1, 2x2 cover with two overlap layers, coarse mesh one level coarser."""
    return build_problem(5.0, 8, p_f=1, p_c=1, coarse_levels=1, n_sub_per_side=2, overlap_layers=2)


@pytest.fixture(scope="session")
def deflated_problem():
    """Coarse space equal to the fine space, 2x2 cover."""
    return build_problem(5.0, 8, p_f=1, p_c=1, coarse_levels=0, n_sub_per_side=2, overlap_layers=2)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
