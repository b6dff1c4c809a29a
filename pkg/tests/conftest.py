import numpy as np
import pytest
from hypothesis import settings

from gflsim.graphgen import CsbmParams, Graph, make_layout, sample_data

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_connected_graph(n: int, extra: int, rng: np.random.Generator) -> Graph:
    """Random spanning tree plus ``extra`` random chords."""
    edges = set()
    order = rng.permutation(n)
    for i in range(1, n):
        u, v = int(order[i]), int(order[rng.integers(i)])
        edges.add((min(u, v), max(u, v)))
    for _ in range(extra):
        u, v = rng.integers(n, size=2)
        if u != v:
            edges.add((int(min(u, v)), int(max(u, v))))
    return Graph(n, tuple(sorted(edges)))


@pytest.fixture(scope="session")
def small_dnc():
    prm = CsbmParams(40, 6, 2, 1, 12)
    layout = make_layout("dnc", prm, 1, (0.2, 0.2, 0.6), np.random.default_rng(3))
    return layout, sample_data(layout, np.random.default_rng(4))


@pytest.fixture(scope="session")
def small_sc():
    prm = CsbmParams(12, 4, 1.5, 1, 10)
    layout = make_layout("sc", prm, 16, (4, 4, 8), np.random.default_rng(5))
    return layout, sample_data(layout, np.random.default_rng(6))


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end reproduction criteria")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
