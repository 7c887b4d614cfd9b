import numpy as np
import pytest

from mstfgrn import tensor as tt
from mstfgrn.graph import from_edges
from mstfgrn.model import ModelConfig

DTYPES = {"f32": np.float32, "f64": np.float64}


@pytest.fixture(autouse=True)
def fresh_tape():
    tt.reset_tape()
    yield
    tt.reset_tape()


@pytest.fixture(params=["f32", "f64"])
def prec(request):
    """Run a test under both precisions; yields the dtype."""
    with tt.precision(request.param):
        yield DTYPES[request.param]


@pytest.fixture
def small_cfg():
    return ModelConfig(n_nodes=4, horizon=3, input_dim=1, hidden_dim=8, embed_dim=3)


@pytest.fixture
def small_graph():
    return from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 2)])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
