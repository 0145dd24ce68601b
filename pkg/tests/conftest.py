import numpy as np
import pytest

from greedyctrl.model import build_affine_system, build_heat_system, build_wave_system, kalman_rank


@pytest.fixture(scope="session")
def heat10():
    return build_heat_system(10, 0.1, [(1.0, 2.0)])


@pytest.fixture(scope="session")
def wave10():
    return build_wave_system(5, 3.0, [(1.0, 10.0)])


def random_controllable(rng, N, M=1, T=1.0):
    """Random stable-ish (A, B) pair that passes the Kalman test, plus data."""
    while True:
        A = rng.standard_normal((N, N)) / np.sqrt(N) - 0.5 * np.eye(N)
        B = rng.standard_normal((N, M))
        if kalman_rank(A, B) == N:
            break
    x0 = rng.standard_normal(N)
    x1 = rng.standard_normal(N)
    # One dummy parameter that enters nothing.
    return build_affine_system(A, [], x0, x1, T, [(0.0, 1.0)], B0=B, name="random")


# Lines recorded by the acceptance checks, echoed after the test session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
