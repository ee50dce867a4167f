import functools

import numpy as np
import pytest

from tubebem.geometry import TubeGeometry
from tubebem.quadrature import build_mesh
from tubebem.solve import LayerOperators

ACCEPTANCE_LINES = []


@functools.lru_cache(maxsize=None)
def geometry(kind, **params):
    return TubeGeometry(kind, params, 1.0)


@functools.lru_cache(maxsize=None)
def operators(kind, N, d_operator="calderon"):
    """Mesh and lazily assembled operators with default parameters, shared across tests."""
    mesh = build_mesh(geometry(kind), N, N)
    return mesh, LayerOperators(mesh, d_operator)


@pytest.fixture
def report():
    def emit(criterion, ok, detail):
        line = f"{criterion}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return emit


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
