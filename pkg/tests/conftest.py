import numpy as np
import pytest

from jumpbsde import config

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def scenario():
    """Loader for built-in scenarios with dotted overrides."""

    def load(name, *overrides):
        return config.load_scenario(config.resolve_config(name), overrides)

    return load
