import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def tiny_problem(seed, sizes=(3, 4, 2), batch=6):
    """Random model, parameters and batch for oracle checks."""
    from feddhad import nn

    rng = np.random.default_rng(seed)
    spec = nn.ModelSpec(sizes)
    w = rng.normal(0.0, 0.7, spec.n_params)
    x = rng.normal(size=(batch, sizes[0]))
    y = rng.integers(0, sizes[-1], batch)
    return spec, w, x, y


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
