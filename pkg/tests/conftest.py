"""Shared test configuration."""

import numpy as np
import pytest

from otpf.dynamics import lorenz63_field
from otpf.transport import MarginalPair, solve_transport


@pytest.fixture(scope="session", autouse=True)
def warm_compiled_kernels():
    """Trigger JIT compilation once so runtime assertions measure the
    algorithms, not the compiler."""
    solve_transport(
        np.array([[0.0, 1.0], [1.0, 0.0]]),
        MarginalPair(np.array([0.5, 0.5]), np.array([0.5, 0.5])),
    )
    field = lorenz63_field()
    field.fast_propagate(np.ones((3, 2)), 1, 0.01)
