import pytest

from ymhstab.vortex_linearization import solve_first_correction
from ymhstab.vortex_profile import solve_vortex


@pytest.fixture(scope="session")
def profile1():
    return solve_vortex(1.0, 1)


@pytest.fixture(scope="session")
def profile2():
    return solve_vortex(2.0, 1)


@pytest.fixture(scope="session")
def correction1(profile1):
    return solve_first_correction(profile1)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
