"""Single-threaded discrete-event engine for asynchronous token walks.

Every event is the arrival of one token at one agent.  Events are served in
``(time, seq)`` order, where ``seq`` is the creation order of the arrival; the
count of served events is the virtual iteration counter.  Serving an event
applies the algorithm step, charges computation time, picks the next agent,
samples a link latency from the walk's own random stream and schedules the
next arrival.  An agent computes one update at a time, so a token that arrives
while the agent is busy waits for it.

The clock reported for a processed event is the moment its outgoing token is
delivered, maximized over all events processed so far: the state after ``k``
events is fully known only once every one of those updates has been computed
and sent.
"""

from __future__ import annotations

import heapq
import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import algorithms as alg
from .graph import build_transition_matrix, next_agent, next_agent_cyclic, start_agents, walk_rng
from .losses import SolverError
from .metrics import TraceRecord, accuracy, consensus_gap, nmse, parameter_nmse

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """The run aborted; ``partial`` holds the result up to the failure."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class InvariantViolation(AssertionError):
    pass


@dataclass(order=True)
class Event:
    time: float
    seq: int
    walk_id: int = field(compare=False)
    agent: int = field(compare=False)


@dataclass
class CostLedger:
    comm_units: int = 0
    sim_time: float = 0.0
    compute_time_total: float = 0.0

    def charge_link(self):
        self.comm_units += 1


@dataclass
class SimResult:
    records: list
    state: alg.NetworkState
    ledger: CostLedger
    events: list
    stop_reason: str
    descent: list = field(default_factory=list)
    max_consistency_error: float = 0.0
    error: str | None = None


def compute_time(model, observed_wall, constant=0.0):
    """Simulated seconds charged for one local update."""
    if model == "measured":
        return observed_wall
    if model == "constant":
        return constant
    if model == "zero":
        return 0.0
    raise ValueError(f"unknown compute model {model!r}")


def stopping_criterion(objectives, mode, *, window, tol=0.0, metric=None, target=None, higher_is_better=False):
    """Decide whether to stop given the tail of the per-event objective history.

    ``objectives`` holds F after each of the last events (most recent last);
    ``metric`` is the latest test metric.
    """
    if mode == "max-events":
        return False
    if mode == "objective-tol":
        if len(objectives) <= window:
            return False
        return abs(objectives[-1] - objectives[-1 - window]) < tol
    if mode in ("metric-target", "nmse-target"):
        if metric is None or target is None:
            return False
        return metric >= target if higher_is_better else metric <= target
    raise ValueError(f"unknown stopping mode {mode!r}")


class Evaluator:
    """Train/test metric at a single model vector (NMSE or accuracy).

    With ``alternatives=True`` every probe also records the test metric at the
    agent average and at each token, plus the parameter NMSE against
    ``x_true`` when it is known.
    """

    def __init__(self, task, train=None, test=None, x_true=None, alternatives=False):
        self.task = task
        self.train = train
        self.test = test
        self.x_true = x_true
        self.alternatives = alternatives
        self._fn = accuracy if task == "classification" else nmse
        self.higher_is_better = task == "classification"

    def __call__(self, w):
        tr = self._fn(w, *self.train) if self.train is not None else float("nan")
        te = self._fn(w, *self.test) if self.test is not None else float("nan")
        return tr, te

    def extras(self, state):
        if not self.alternatives:
            return {}
        data = self.test if self.test is not None else self.train
        if data is None:
            return {}
        out = {"test_agent_average": self._fn(state.agent_average(), *data)}
        if state.n_walks > 1:
            for m in range(state.n_walks):
                out[f"test_token_{m}"] = self._fn(state.z[m], *data)
        if self.x_true is not None:
            out["param_nmse"] = parameter_nmse(state.token_average(), self.x_true)
        return out


def run_simulation(
    config,
    topology,
    models,
    evaluator=None,
    *,
    check_theorem=None,
    smoothness=None,
    check_invariants=False,
    invariant_tol=1e-10,
    raise_on_violation=True,
):
    """Run one configuration and return its trace.

    Parameters
    ----------
    config : RunConfig
    topology : Topology
    models : list of LossModel
        One per agent.
    evaluator : Evaluator, optional
        Produces the train/test metric columns at the token average.
    check_theorem : {"thm1", "thm2", "thm3"}, optional
        Recompute F by direct summation around every step and test the
        matching descent inequality.  Meaningful only with exact local solves
        and, for thm2/thm3, fresh tokens.
    smoothness : float, optional
        Common L for thm3; defaults to the largest local constant.
    check_invariants : bool
        Verify the token-mean identity at every probe.
    """
    config.validate(topology.n_agents)
    state = alg.init_run(config, topology, models)
    N, M = topology.n_agents, config.n_walks
    ledger = CostLedger()
    tracker = alg.ObjectiveTracker(state, config.tau)
    records, events, descent = [], [], []
    objectives = deque(maxlen=N + 1)
    algo = config.algorithm
    cyclic = config.selection == "cyclic"
    if check_theorem == "thm3" and smoothness is None:
        smoothness = max(m.smoothness() for m in models)
    evaluator = evaluator or Evaluator("regression")
    result = SimResult(records, state, ledger, events, "max-events", descent)

    if config.max_events == 0:
        return result

    if algo in ("centralized", "sync-multi"):
        return _run_rounds(config, state, tracker, evaluator, result, check_theorem)

    P = None if cyclic else build_transition_matrix(topology, config.transition_policy)
    rngs = [walk_rng(config.seed, m) for m in range(M)]
    starts = start_agents(topology, M, config.seed, cyclic)
    heap, seq = [], 0
    for m, a in enumerate(starts):
        heapq.heappush(heap, Event(0.0, seq, m, a))
        seq += 1
    busy = np.zeros(N)
    processed = 0
    worst = 0.0

    while heap and processed < config.max_events:
        ev = heapq.heappop(heap)
        i, m = ev.agent, ev.walk_id
        state.location[m] = i
        F_before = alg.eval_objective(state, config.tau) if check_theorem else None
        t0 = time.perf_counter()
        try:
            step = _walk_step(algo, state, m, i, config)
        except SolverError as exc:
            result.error = str(exc)
            result.stop_reason = "solver-failure"
            raise SimulationError(f"event {processed}: {exc}", result) from exc
        wall = time.perf_counter() - t0
        c = compute_time(config.compute_model, wall, config.compute_constant)
        start = max(ev.time, busy[i])
        busy[i] = start + c
        ledger.compute_time_total += c
        processed += 1
        events.append((ev.time, ev.seq, m, i))

        if check_theorem:
            F_after = alg.eval_objective(state, config.tau)
            chk = alg.check_descent(
                F_before, F_after, step.dx, step.dz, config.tau, config.rho, smoothness or 0.0,
                check_theorem, N,
            )
            descent.append(chk)
            if not chk.passed and raise_on_violation:
                raise alg.TheoremViolation(
                    f"{check_theorem} violated at event {processed}: change {chk.change:.6e} "
                    f"> bound {chk.bound:.6e} (slack {chk.slack:.3e})",
                    dump={"event": processed, "agent": i, "walk": m, "x": state.x.copy(),
                          "z": state.z.copy(), "F_before": F_before, "F_after": F_after},
                )

        j = next_agent_cyclic(topology, i) if cyclic else next_agent(P, i, rngs[m])
        if j == i:
            latency = 0.0
        else:
            latency = float(rngs[m].uniform(config.latency_low, config.latency_high))
            ledger.charge_link()
        heapq.heappush(heap, Event(busy[i] + latency, seq, m, j))
        seq += 1
        # the state after this event is settled once its token is delivered
        ledger.sim_time = max(ledger.sim_time, busy[i] + latency)

        tracker.update(step)
        F = tracker.value
        objectives.append(F)

        final = processed == config.max_events
        if processed % config.probe_every == 0 or final:
            if check_invariants:
                err = alg.mean_consistency_error(state, config.fresh_tokens, config.token_update)
                worst = max(worst, err)
                if err > invariant_tol:
                    raise InvariantViolation(
                        f"token-mean identity off by {err:.3e} (relative) at event {processed}"
                    )
            w = state.token_average()
            if algo == "wpg":
                F_rec = alg.global_loss(state, w)
            else:
                F_rec = F
            tr, te = evaluator(w)
            records.append(
                TraceRecord(processed, ledger.sim_time, ledger.comm_units, m, i, F_rec, tr, te,
                            consensus_gap(state.x, state.z), evaluator.extras(state))
            )
            if stopping_criterion(
                objectives, config.stop, window=N, tol=config.stop_tol, metric=te,
                target=config.metric_target, higher_is_better=evaluator.higher_is_better,
            ):
                result.stop_reason = config.stop
                break
        elif config.stop == "objective-tol" and stopping_criterion(
            objectives, config.stop, window=N, tol=config.stop_tol
        ):
            result.stop_reason = config.stop
            break

    result.max_consistency_error = worst
    return result


def _walk_step(algo, state, m, i, cfg):
    if algo == "ibcd":
        return alg.ibcd_step(state, i, cfg.tau, cfg.inner_tol)
    if algo == "apibcd":
        return alg.apibcd_step(state, m, i, cfg.tau, cfg.fresh_tokens, cfg.token_update, cfg.inner_tol)
    if algo == "gapibcd":
        return alg.gapibcd_step(state, m, i, cfg.tau, cfg.rho, cfg.fresh_tokens, cfg.token_update)
    if algo == "wpg":
        return alg.wpg_step(state, i, cfg.alpha)
    raise alg.ConfigError(f"{algo} is not a walk algorithm")


def _run_rounds(cfg, state, tracker, evaluator, result, check_theorem):
    """Reference modes: one event is one synchronous round over all agents.

    A round costs two transmissions per agent and token (collect and
    broadcast); its duration is the slowest agent's update plus two link
    latencies drawn from walk 0's stream.
    """
    N, M = state.n_agents, state.n_walks
    rng = walk_rng(cfg.seed, 0)
    ledger, records = result.ledger, result.records
    objectives = deque(maxlen=N + 1)
    now = 0.0
    for k in range(1, cfg.max_events + 1):
        F_before = alg.eval_objective(state, cfg.tau) if check_theorem else None
        t0 = time.perf_counter()
        step = alg.sync_multi_step(state, cfg.tau, cfg.inner_tol)
        wall = time.perf_counter() - t0
        # agents work in parallel; charge the mean per-agent share of the wall time
        c = compute_time(cfg.compute_model, wall / N, cfg.compute_constant)
        result.events.append((now, k - 1, -1, -1))
        ledger.compute_time_total += c * N
        ledger.comm_units += 2 * N * M
        now += c + float(rng.uniform(cfg.latency_low, cfg.latency_high)) + float(
            rng.uniform(cfg.latency_low, cfg.latency_high)
        )
        ledger.sim_time = now
        tracker.update(step)
        F = tracker.value
        objectives.append(F)
        if check_theorem:
            F_after = alg.eval_objective(state, cfg.tau)
            tol = 1e-8 * (1 + abs(F_before))
            result.descent.append(alg.DescentCheck(F_after <= F_before + tol, F_before + tol - F_after,
                                                   F_after - F_before, 0.0, F_before))
        if k % cfg.probe_every == 0 or k == cfg.max_events:
            w = state.token_average()
            tr, te = evaluator(w)
            records.append(TraceRecord(k, ledger.sim_time, ledger.comm_units, -1, -1, F, tr, te,
                                       consensus_gap(state.x, state.z), evaluator.extras(state)))
            if stopping_criterion(objectives, cfg.stop, window=1, tol=cfg.stop_tol, metric=te,
                                  target=cfg.metric_target, higher_is_better=evaluator.higher_is_better):
                result.stop_reason = cfg.stop
                break
    return result
