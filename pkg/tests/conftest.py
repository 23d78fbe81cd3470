import numpy as np
import pytest

from refcond.lq_batch import (
    LtiSystem,
    TrackingWeights,
    build_batch_operators,
    tracking_gains,
    zoh_double_integrator,
)


@pytest.fixture(scope="session")
def double_integrator():
    return zoh_double_integrator(Ts=0.1)


@pytest.fixture(scope="session")
def unit_weights():
    return TrackingWeights(Q=[[1.0]], R=[[1.0]])


@pytest.fixture(scope="session")
def di_ops_n50(double_integrator, unit_weights):
    return build_batch_operators(double_integrator, unit_weights, 50)


@pytest.fixture(scope="session")
def di_gains_n50(di_ops_n50):
    return tracking_gains(di_ops_n50)


@pytest.fixture(scope="session")
def mimo_system():
    """Stable 3-state, 2-input, 2-output system for exercising non-scalar paths."""
    A = np.array([[0.9, 0.2, 0.0], [0.0, 0.8, 0.1], [0.05, 0.0, 0.7]])
    B = np.array([[1.0, 0.0], [0.0, 0.5], [0.2, 0.3]])
    C = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    return LtiSystem(A, B, C, Ts=0.5)


@pytest.fixture(scope="session")
def mimo_weights():
    return TrackingWeights(Q=np.diag([1.0, 2.0]), R=np.diag([0.5, 1.0]))
