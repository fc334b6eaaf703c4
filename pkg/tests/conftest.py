import numpy as np
import pytest

from flowcast import flow as flow_mod
from flowcast import ssm as ssm_mod


def pytest_runtest_logreport(report):
    # the acceptance tests each print one PASS/FAIL line with the measured
    # value next to its bound; echo those even when capture is on so a plain
    # `pytest -v` log still records the numbers
    if report.when == "call" and "test_acceptance" in report.nodeid:
        for line in report.capstdout.splitlines():
            if line.startswith(("PASS ", "FAIL ")):
                print(f"\n{line}", end="")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_gru_model():
    """1-series, 2-dim GRU model with mild weights and noise."""
    model = ssm_mod.init_model(
        kind="gru", n_series=1, d_x=2, layers=1, d_z=0, rho=0.8, sigma=0.05, init_scale=0.5, seed=3
    )
    return model


@pytest.fixture
def small_graph_model():
    model = ssm_mod.init_model(
        kind="graph_gru", n_series=3, d_x=2, layers=1, d_z=0, rho=0.8, sigma=0.05, init_scale=0.5, seed=4
    )
    graph = ssm_mod.Graph.from_weights(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 2.0], [1.0, 0.0, 0.0]]))
    return model, graph


@pytest.fixture
def fast_flow():
    return flow_mod.FlowConfig(n_lambda=8)
