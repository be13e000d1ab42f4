import numpy as np
import pytest

from driftlab import oracle, schedule


@pytest.fixture
def mix():
    return oracle.benchmark_mixture()


@pytest.fixture
def vp2():
    return schedule.vp_constant(2.0)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Records one summary line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str, seconds: float):
        line = (f"acceptance {number:>2} {'PASS' if passed else 'FAIL'} "
                f"[{seconds:6.1f}s] {title}: {detail}")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
