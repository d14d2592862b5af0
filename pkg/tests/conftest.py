import pytest

from source.collective_spin import build_collective_ops, coherent_state_x
from source.trajectory import generate_wiener, run_trajectory


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long statistical runs at figure scale (deselect with -m 'not slow')")


@pytest.fixture(scope="session")
def qubit_ops():
    return build_collective_ops(1)


@pytest.fixture(scope="session")
def ops5():
    return build_collective_ops(5)


@pytest.fixture
def short_record(qubit_ops):
    """Record of 500 steps at b=1 emitted by the +x coherent qubit."""
    realization = generate_wiener(0.01, 500, seed=11)
    series = run_trajectory(coherent_state_x(qubit_ops), qubit_ops, 1.0, realization, stride=100)
    return series.record
