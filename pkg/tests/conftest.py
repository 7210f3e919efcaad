import numpy as np
import pytest

from viflows.problems import build_two_player_game

ACCEPTANCE_RESULTS = []


def record_criterion(num, name, ok, detail=""):
    ACCEPTANCE_RESULTS.append((num, name, bool(ok), detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for num, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        line = f"  criterion {num:2d} [{status}] {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def game():
    return build_two_player_game()


@pytest.fixture(scope="session")
def game_solution():
    return np.array([-0.25, -0.25])
