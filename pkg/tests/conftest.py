import numpy as np
import pytest

from tokenwalk.algorithms import RunConfig
from tokenwalk.data import partition, synthesize_classification, synthesize_regression
from tokenwalk.graph import Topology, generate_topology
from tokenwalk.losses import DataShard, LossModel


def ring(n):
    return Topology(n, tuple((i, (i + 1) % n) for i in range(n) if n > 2 or i == 0), tuple(range(n)))


def make_models(kind="least-squares", n_agents=6, n_rows=120, p=4, seed=0, **kw):
    if kind == "least-squares":
        ds, _ = synthesize_regression(n_rows, p, 0.1, seed, **kw)
    else:
        ds, _ = synthesize_classification(n_rows, p, 0.2, seed, **kw)
    return [LossModel(kind, s) for s in partition(ds, n_agents, seed=seed)]


def identity_model(a):
    """f(x) = 1/2 ||x - a||^2 as a least-squares shard."""
    a = np.asarray(a, dtype=float)
    p = a.size
    return LossModel("least-squares", DataShard(np.sqrt(p) * np.eye(p), np.sqrt(p) * a))


def zero_model(p):
    """The zero function: a shard without rows."""
    return LossModel("least-squares", DataShard(np.zeros((0, p)), np.zeros(0)))


@pytest.fixture
def small_problem():
    topo = generate_topology(6, 0.7, 0, require_cycle=True)
    return topo, make_models(n_agents=6)


@pytest.fixture
def run_config():
    def build(**kw):
        base = dict(max_events=60, compute_model="zero", inner_tol=1e-10, tau=1.0)
        base.update(kw)
        return RunConfig(**base)

    return build


_VERDICTS = []


@pytest.fixture
def verdict():
    """Print one PASS/FAIL line for an acceptance criterion and return the flag."""

    def emit(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        _VERDICTS.append(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
