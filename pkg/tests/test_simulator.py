import heapq

import numpy as np
import pytest

from tokenwalk import algorithms as alg
from tokenwalk.algorithms import RunConfig, TheoremViolation
from tokenwalk.graph import INCLUDE_SELF, generate_topology
from tokenwalk.losses import LossModel, SolverError
from tokenwalk.metrics import trace_to_csv
from tokenwalk.simulator import (
    Evaluator,
    Event,
    InvariantViolation,
    SimulationError,
    compute_time,
    run_simulation,
    stopping_criterion,
)

from conftest import make_models, ring


def cfg(**kw):
    base = dict(algorithm="ibcd", tau=1.0, max_events=30, compute_model="zero", inner_tol=1e-10)
    base.update(kw)
    return RunConfig(**base)


def test_cyclic_visits_and_comm():
    topo = ring(3)
    res = run_simulation(cfg(max_events=6), topo, make_models(n_agents=3))
    assert [e[3] for e in res.events] == [0, 1, 2, 0, 1, 2]
    assert res.ledger.comm_units == 6
    assert [r.comm_units for r in res.records] == list(range(1, 7))


def test_constant_latency_and_compute_timing():
    c, d, E = 5e-5, 2e-4, 40
    res = run_simulation(
        cfg(max_events=E, latency_low=c, latency_high=c, compute_model="constant", compute_constant=d),
        ring(5), make_models(n_agents=5),
    )
    assert res.ledger.sim_time == pytest.approx(E * (c + d), rel=1e-12)
    assert res.ledger.compute_time_total == pytest.approx(E * d)


def test_zero_compute_is_latency_only():
    res = run_simulation(cfg(max_events=10, latency_low=1e-4, latency_high=1e-4), ring(4), make_models(n_agents=4))
    assert res.ledger.sim_time == pytest.approx(10 * 1e-4)


def test_measured_time_strictly_increases():
    res = run_simulation(cfg(compute_model="measured", latency_low=0.0, latency_high=0.0),
                         ring(4), make_models(n_agents=4))
    t = [r.sim_time_s for r in res.records]
    assert all(b > a for a, b in zip(t, t[1:]))


def test_compute_time_models():
    assert compute_time("measured", 0.25) == 0.25
    assert compute_time("constant", 0.25, 1e-3) == 1e-3
    assert compute_time("zero", 0.25) == 0.0
    with pytest.raises(ValueError):
        compute_time("guess", 0.1)


def test_events_are_ordered_by_time_then_seq():
    heap = []
    for ev in (Event(1.0, 3, 0, 0), Event(0.5, 4, 1, 0), Event(1.0, 2, 1, 1)):
        heapq.heappush(heap, ev)
    assert [heapq.heappop(heap).seq for _ in range(3)] == [4, 2, 3]


def test_equal_time_ties_fall_back_to_seq():
    # constant latency, zero compute: both walks arrive together every round
    topo = ring(6)
    res = run_simulation(cfg(algorithm="apibcd", n_walks=2, max_events=40, latency_low=1e-4, latency_high=1e-4),
                         topo, make_models(n_agents=6))
    keys = [(t, s) for t, s, _, _ in res.events]
    assert keys == sorted(keys)
    assert [w for _, _, w, _ in res.events[:6]] == [0, 1, 0, 1, 0, 1]


def test_processed_order_sorted_under_random_latency():
    topo = generate_topology(10, 0.5, 1, require_cycle=True)
    res = run_simulation(cfg(algorithm="apibcd", n_walks=4, max_events=300), topo, make_models(n_agents=10))
    keys = [(t, s) for t, s, _, _ in res.events]
    assert keys == sorted(keys)
    t = [r.sim_time_s for r in res.records]
    c = [r.comm_units for r in res.records]
    assert t == sorted(t) and c == sorted(c)


def test_determinism_constant_compute():
    topo = generate_topology(8, 0.6, 2, require_cycle=True)
    models = make_models(n_agents=8)
    c = cfg(algorithm="apibcd", n_walks=3, max_events=200, compute_model="constant", compute_constant=1e-4,
            selection="markov")
    assert trace_to_csv(run_simulation(c, topo, models).records) == trace_to_csv(run_simulation(c, topo, models).records)


def test_comm_counts_only_real_transmissions():
    topo = generate_topology(6, 0.5, 3)
    res = run_simulation(cfg(selection="markov", transition_policy=INCLUDE_SELF, max_events=500),
                         topo, make_models(n_agents=6))
    agents = [e[3] for e in res.events]
    moves = sum(a != b for a, b in zip(agents, agents[1:]))
    # the last event's outgoing hop is charged too
    assert res.ledger.comm_units in (moves, moves + 1)
    assert res.ledger.comm_units < 500


def test_walk_paths_do_not_depend_on_other_walks():
    topo = generate_topology(9, 0.5, 4)
    models = make_models(n_agents=9)
    one = run_simulation(cfg(algorithm="apibcd", selection="markov", max_events=100), topo, models)
    three = run_simulation(cfg(algorithm="apibcd", n_walks=3, selection="markov", max_events=300), topo, models)
    path1 = [a for _, _, w, a in one.events]
    path3 = [a for _, _, w, a in three.events if w == 0]
    n = min(len(path1), len(path3))
    assert n > 50 and path1[:n] == path3[:n]


def test_stopping_rules():
    assert not stopping_criterion([1.0, 1.0], "max-events", window=1)
    assert stopping_criterion([1.0, 1.0 - 1e-13], "objective-tol", window=1, tol=1e-12)
    assert not stopping_criterion([1.0], "objective-tol", window=1, tol=1e-12)
    assert stopping_criterion([], "nmse-target", window=1, metric=0.3, target=float("inf"))
    assert stopping_criterion([], "metric-target", window=1, metric=0.9, target=0.8, higher_is_better=True)
    with pytest.raises(ValueError):
        stopping_criterion([], "forever", window=1)


def test_zero_events_gives_empty_trace():
    res = run_simulation(cfg(max_events=0), ring(3), make_models(n_agents=3))
    assert res.records == [] and res.ledger.comm_units == 0


def test_objective_tol_stops_a_monotone_run():
    res = run_simulation(cfg(max_events=20_000, stop="objective-tol", stop_tol=1e-12), ring(5), make_models(n_agents=5))
    assert res.stop_reason == "objective-tol" and len(res.events) < 20_000


def test_infinite_target_stops_at_first_probe():
    topo = ring(4)
    res = run_simulation(cfg(stop="nmse-target", metric_target=float("inf")), topo, make_models(n_agents=4),
                         Evaluator("regression", test=(np.eye(4), np.ones(4))))
    assert len(res.records) == 1 and res.stop_reason == "nmse-target"


def test_probe_interval():
    res = run_simulation(cfg(max_events=25, probe_every=10), ring(3), make_models(n_agents=3))
    assert [r.event for r in res.records] == [10, 20, 25]


def test_solver_failure_keeps_partial_trace(monkeypatch):
    calls = {"n": 0}
    real = LossModel.prox

    def flaky(self, *a, **kw):
        calls["n"] += 1
        if calls["n"] == 5:
            raise SolverError("boom", 1.0)
        return real(self, *a, **kw)

    monkeypatch.setattr(LossModel, "prox", flaky)
    with pytest.raises(SimulationError) as info:
        run_simulation(cfg(), ring(3), make_models(n_agents=3))
    assert len(info.value.partial.records) == 4
    assert info.value.partial.stop_reason == "solver-failure"


def test_invariant_check_and_violation(monkeypatch):
    topo = generate_topology(6, 0.6, 0, require_cycle=True)
    res = run_simulation(cfg(algorithm="apibcd", n_walks=3), topo, make_models(n_agents=6), check_invariants=True)
    assert res.max_consistency_error < 1e-12
    real = alg._commit

    def leaky(state, *a, **kw):
        step = real(state, *a, **kw)
        state.z[0] += 1e-6
        return step

    monkeypatch.setattr(alg, "_commit", leaky)
    with pytest.raises(InvariantViolation):
        run_simulation(cfg(), topo, make_models(n_agents=6), check_invariants=True)


def test_theorem_check_flags_inexact_solves():
    topo = ring(5)
    models = [LossModel(m.kind, m.shard, solver="iterative") for m in make_models(n_agents=5)]
    ok = run_simulation(cfg(max_events=200), topo, models, check_theorem="thm1")
    assert all(c.passed for c in ok.descent)
    with pytest.raises(TheoremViolation) as info:
        run_simulation(cfg(max_events=200, inner_tol=1e-2), topo, models, check_theorem="thm1")
    assert {"x", "z", "F_before", "F_after"} <= set(info.value.dump)


def test_round_mode_accounting():
    models = make_models(n_agents=4)
    res = run_simulation(cfg(algorithm="sync-multi", n_walks=2, max_events=5), ring(4), models)
    assert res.ledger.comm_units == 5 * 2 * 4 * 2
    assert len(res.records) == 5
    F = [r.objective for r in res.records]
    assert all(b <= a + 1e-12 for a, b in zip(F, F[1:]))


def test_wpg_needs_cycle_routing():
    with pytest.raises(alg.ConfigError):
        run_simulation(cfg(algorithm="wpg", selection="markov"), ring(3), make_models(n_agents=3))


def test_alternative_metrics_logged():
    models = make_models(n_agents=4)
    ev = Evaluator("regression", test=(np.eye(4), np.ones(4)), x_true=np.ones(4), alternatives=True)
    res = run_simulation(cfg(algorithm="apibcd", n_walks=2, max_events=6), ring(4), models, ev)
    keys = set(res.records[-1].extras)
    assert keys == {"test_agent_average", "test_token_0", "test_token_1", "param_nmse"}
