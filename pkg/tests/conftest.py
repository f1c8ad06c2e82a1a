import numpy as np
import pytest

from interior_spikes import Domain, build_grid, solve_ground_state


@pytest.fixture(scope="session")
def gs1():
    return solve_ground_state(1, 3.0)


@pytest.fixture(scope="session")
def gs2():
    return solve_ground_state(2, 3.0)


@pytest.fixture(scope="session")
def interval_grid():
    """Unit interval at ε = 0.05, 2000 cells."""
    return build_grid(Domain.interval(0.0, 1.0, 0.05), 0.01)


@pytest.fixture(scope="session")
def square_grid():
    """Unit square at ε = 0.025, 160 x 160 cells."""
    return build_grid(Domain.rectangle((0.0, 1.0), (0.0, 1.0), 0.025), 0.25)


def sech_soliton(r, p=3.0):
    """Closed-form 1D ground state ((p+1)/2)^{1/(p-1)} sech^{2/(p-1)}((p-1) r / 2)."""
    arg = np.minimum(np.abs((p - 1) * np.asarray(r) / 2), 300.0)
    return ((p + 1) / 2) ** (1 / (p - 1)) / np.cosh(arg) ** (2 / (p - 1))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number, title, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
