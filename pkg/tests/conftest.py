from __future__ import annotations

import numpy as np
import pytest

from gamehedge.envelope import tangent_coefficients
from gamehedge.market import discount
from gamehedge.payoff import canonical_option


@pytest.fixture
def call_40():
    return canonical_option("call", 100.0, 40.0)


@pytest.fixture
def call_env(call_40):
    return tangent_coefficients(call_40)


def flat_path(values, grid=None, rate=0.0):
    """Path with the given stock values and a constant-rate bank."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if grid is None:
        grid = np.linspace(0.0, 1.0, len(values))
    grid = np.asarray(grid, dtype=float)
    return discount(grid, values, np.exp(rate * grid))


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
