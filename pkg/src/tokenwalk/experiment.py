"""Experiment configs and the end-to-end pipelines behind the CLI.

An :class:`ExperimentConfig` is a flat JSON object: every :class:`RunConfig`
field plus the data, topology and output settings.  Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import io
import itertools
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.optimize

from . import __version__
from .algorithms import ConfigError, RunConfig
from .data import (
    CLASSIFICATION,
    REGRESSION,
    load_libsvm,
    normalize,
    partition,
    shard_manifest,
    synthesize_classification,
    synthesize_regression,
    train_test_split,
)
from .graph import generate_topology
from .losses import LEAST_SQUARES, LOGISTIC, SOLVERS, DataShard, LossModel
from .metrics import first_reaching, write_extras_csv, write_trace_csv
from .simulator import Evaluator, run_simulation

OUT_DIR_ENV = "TOKENWALK_OUT_DIR"
RUN_FIELDS = tuple(f.name for f in fields(RunConfig))
THEOREM_ALGORITHM = {"thm1": "ibcd", "thm2": "apibcd", "thm3": "gapibcd"}

SYNTHETIC_KEYS = {"kind", "n_rows", "p", "noise_sigma", "margin", "flip_prob", "feature_var", "seed"}


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    name: str = "run"
    description: str = ""
    # data
    dataset: str | None = None
    task: str = REGRESSION
    positive_label: float | None = None
    synthetic: dict | None = None
    loss: str | None = None
    l2_reg: float = 0.0
    prox_solver: str = "auto"
    partition: str = "iid-equal"
    normalization: str = "none"
    test_fraction: float = 0.2
    data_seed: int | None = None
    # network
    n_agents: int = 20
    zeta: float = 0.7
    require_cycle: bool = True
    topology_seed: int | None = None
    # parameter scaled by the largest local smoothness constant
    rho_scale: float | None = None
    # tracing
    check_invariants: bool = False
    log_alternatives: bool = True
    out_dir: str | None = None
    # compare / verify
    algorithms: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    sweep: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        own = {f.name for f in fields(cls)} - {"run"}
        unknown = set(d) - own - set(RUN_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        run = RunConfig(**{k: d.pop(k) for k in RUN_FIELDS if k in d})
        cfg = cls(run=run, **d)
        cfg.validate()
        return cfg

    def to_dict(self):
        out = {k: getattr(self.run, k) for k in RUN_FIELDS}
        for f in fields(self):
            if f.name != "run":
                out[f.name] = getattr(self, f.name)
        return out

    def with_overrides(self, overrides):
        d = self.to_dict()
        d.update(overrides)
        return ExperimentConfig.from_dict(d)

    def validate(self):
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ConfigError(f"task must be regression or classification, got {self.task!r}")
        if not 0 < self.zeta <= 1:
            raise ConfigError(f"zeta must lie in (0, 1], got {self.zeta}")
        if self.n_agents < 2:
            raise ConfigError("n_agents must be >= 2")
        if self.dataset is None and self.synthetic is None:
            raise ConfigError("give either 'dataset' (LIBSVM path) or 'synthetic'")
        if self.synthetic is not None:
            bad = set(self.synthetic) - SYNTHETIC_KEYS
            if bad:
                raise ConfigError(f"unknown synthetic keys: {sorted(bad)}")
        if self.loss not in (None, LEAST_SQUARES, LOGISTIC):
            raise ConfigError(f"loss must be {LEAST_SQUARES} or {LOGISTIC}")
        if self.prox_solver not in SOLVERS:
            raise ConfigError(f"prox_solver must be one of {SOLVERS}")
        if self.rho_scale is not None and self.rho_scale < 0:
            raise ConfigError("rho_scale must be >= 0")
        self.run.validate(self.n_agents)
        return self

    @property
    def loss_kind(self):
        if self.loss:
            return self.loss
        return LOGISTIC if self.task == CLASSIFICATION else LEAST_SQUARES


def load_config(path, overrides=None):
    with open(path) as fh:
        d = json.load(fh)
    if "config" in d and isinstance(d["config"], dict):
        d = d["config"]  # a run manifest
    d.update(overrides or {})
    return ExperimentConfig.from_dict(d)


@dataclass
class Problem:
    topology: object
    models: list
    shards: list
    train: object
    test: object
    evaluator: Evaluator
    x_true: np.ndarray | None = None

    @property
    def smoothness(self):
        return max(m.smoothness() for m in self.models)


def _synthetic(params, task, seed):
    params = dict(params)
    kind = params.pop("kind", task)
    s = params.pop("seed", seed)
    if kind == REGRESSION:
        return synthesize_regression(
            params.get("n_rows", 1000), params.get("p", 10), params.get("noise_sigma", 0.1), s,
            feature_var=params.get("feature_var"),
        )
    if kind == CLASSIFICATION:
        ds, w = synthesize_classification(
            params.get("n_rows", 1000), params.get("p", 10), params.get("margin", 0.1), s,
            flip_prob=params.get("flip_prob", 0.05), feature_var=params.get("feature_var"),
        )
        return ds, w
    raise ConfigError(f"unknown synthetic kind {kind!r}")


def build_problem(cfg):
    """Dataset, split, normalization, topology and per-agent losses for ``cfg``."""
    seed = cfg.run.seed
    dseed = seed if cfg.data_seed is None else cfg.data_seed
    tseed = seed if cfg.topology_seed is None else cfg.topology_seed
    x_true = None
    if cfg.dataset is not None:
        ds = load_libsvm(cfg.dataset, cfg.task, cfg.positive_label)
    else:
        ds, x_true = _synthetic(cfg.synthetic, cfg.task, dseed)
        if cfg.task == CLASSIFICATION:
            x_true = None
    train, test = train_test_split(ds, cfg.test_fraction, dseed)
    train, norm = normalize(train, cfg.normalization)
    test = norm.apply(test)
    if cfg.normalization != "none":
        x_true = None  # the solution lives in transformed coordinates
    topology = generate_topology(cfg.n_agents, cfg.zeta, tseed, require_cycle=cfg.require_cycle)
    shards = partition(train, cfg.n_agents, cfg.partition, dseed)
    models = [LossModel(cfg.loss_kind, s, cfg.l2_reg, cfg.prox_solver) for s in shards]
    evaluator = Evaluator(
        cfg.task,
        (train.features, train.labels),
        (test.features, test.labels) if test.n_rows else None,
        x_true=x_true,
        alternatives=cfg.log_alternatives,
    )
    return Problem(topology, models, shards, train, test, evaluator, x_true)


def oracle_model(problem, loss_kind, l2_reg=0.0):
    """Centralized minimizer of the average loss over the whole training split."""
    A, b = problem.train.features, problem.train.labels
    if loss_kind == LEAST_SQUARES and not l2_reg:
        A = A.toarray() if hasattr(A, "toarray") else A
        return np.linalg.lstsq(A, b, rcond=None)[0]
    full = LossModel(loss_kind, DataShard(A, b), l2_reg)
    res = scipy.optimize.minimize(full.loss, np.zeros(full.dim), jac=full.grad, hess=full._hessian,
                                  method="trust-exact", options={"gtol": 1e-10})
    return res.x


def oracle_metric(problem, loss_kind, l2_reg=0.0):
    """Test metric of :func:`oracle_model` (the floor for NMSE, the ceiling for accuracy)."""
    return problem.evaluator(oracle_model(problem, loss_kind, l2_reg))[1]


def resolve_run(cfg, problem):
    run = cfg.run
    if cfg.rho_scale is not None:
        run = replace(run, rho=cfg.rho_scale * problem.smoothness)
    return run


def _hash_text(text):
    return hashlib.sha256(text.encode()).hexdigest()


def manifest(cfg, problem, result=None):
    m = {
        "tokenwalk_version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.run.seed,
        "topology_hash": _hash_text(problem.topology.to_edge_list()),
        "cycle_order": list(problem.topology.cycle_order) if problem.topology.cycle_order else None,
        "train_hash": problem.train.content_hash(),
        "shard_hashes": [
            hashlib.sha256(np.asarray(s.row_ids, dtype=np.int64).tobytes()).hexdigest() for s in problem.shards
        ],
    }
    if result is not None:
        m["result"] = {
            "events": len(result.events),
            "comm_units": result.ledger.comm_units,
            "sim_time_s": result.ledger.sim_time,
            "stop_reason": result.stop_reason,
        }
    return m


def output_dir(cfg, override=None):
    base = override or cfg.out_dir or os.environ.get(OUT_DIR_ENV) or "runs"
    return Path(base) / cfg.name


def run_experiment(cfg, problem=None):
    problem = problem or build_problem(cfg)
    run = resolve_run(cfg, problem)
    result = run_simulation(run, problem.topology, problem.models, problem.evaluator,
                            check_invariants=cfg.check_invariants)
    return problem, result


def write_run(cfg, problem, result, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.csv", "w", newline="") as fh:
        write_trace_csv(result.records, fh)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest(cfg, problem, result), fh, indent=2, sort_keys=True)
    if any(r.extras for r in result.records):
        with open(out / "trace_alternatives.csv", "w", newline="") as fh:
            write_extras_csv(result.records, fh)
    with open(out / "shards.json", "w") as fh:
        json.dump(shard_manifest(problem.shards), fh)
    return out


def compare(cfg):
    """Run every entry of ``cfg.algorithms`` on one shared problem.

    Each entry is a dict of overrides (optionally with a ``label``).  Returns
    ``[(label, result), ...]`` in the listed order.
    """
    entries = cfg.algorithms or [{}]
    problem = build_problem(cfg)
    out = []
    for entry in entries:
        entry = dict(entry)
        label = entry.pop("label", entry.get("algorithm", cfg.run.algorithm))
        sub = cfg.with_overrides({**entry, "algorithms": []})
        _, result = run_experiment(sub, problem)
        out.append((label, result))
    return problem, out


def write_comparison(results, fh):
    first = True
    for label, result in results:
        buf = _csv_rows(result.records, {"algorithm": label}, header=first)
        fh.write(buf)
        first = False


def _csv_rows(records, extra, header):
    buf = io.StringIO()
    write_trace_csv(records, buf, extra=extra)
    text = buf.getvalue()
    if not header:
        text = text.split("\n", 1)[1]
    return text


@dataclass
class VerifyRun:
    seed: int
    params: dict
    iterations: int
    min_slack: float
    violations: int
    monotone: bool
    max_consistency_error: float
    error: str | None = None

    @property
    def passed(self):
        return self.violations == 0 and self.error is None


def verify(theorem, cfg, inner_tol=1e-10, tol=1e-8):
    """Check the descent inequality of ``theorem`` on every iteration.

    Runs each seed in ``cfg.seeds`` (or ``cfg.run.seed``) times each point of
    the ``cfg.sweep`` grid, with fresh tokens and the given inner tolerance.
    """
    if theorem not in THEOREM_ALGORITHM:
        raise ConfigError(f"theorem must be one of {sorted(THEOREM_ALGORITHM)}")
    seeds = cfg.seeds or [cfg.run.seed]
    keys = sorted(cfg.sweep)
    grid = list(itertools.product(*(cfg.sweep[k] for k in keys))) or [()]
    runs = []
    for seed in seeds:
        for values in grid:
            params = dict(zip(keys, values))
            sub = cfg.with_overrides({
                **params, "seed": seed, "algorithm": THEOREM_ALGORITHM[theorem],
                "fresh_tokens": theorem != "thm1", "inner_tol": inner_tol, "sweep": {}, "seeds": [],
                "n_walks": 1 if theorem == "thm1" else params.get("n_walks", cfg.run.n_walks),
            })
            problem = build_problem(sub)
            run = resolve_run(sub, problem)
            res = run_simulation(run, problem.topology, problem.models, problem.evaluator,
                                 check_theorem=theorem, smoothness=problem.smoothness,
                                 check_invariants=True, raise_on_violation=False)
            checks = res.descent
            strict = all(c.change <= tol * (1 + abs(c.F_before)) for c in checks) and all(
                c.change < 0 for c in checks if c.bound < -tol
            )
            runs.append(VerifyRun(
                seed, {**params, "rho": run.rho, "tau": run.tau, "n_walks": run.n_walks}, len(checks),
                min((c.slack for c in checks), default=0.0), sum(not c.passed for c in checks),
                strict, res.max_consistency_error,
            ))
    return runs


@dataclass
class RaceResult:
    seed: int
    oracle: float
    target: float
    # label -> (sim_time_s, comm_units, events) at the first record meeting the target;
    # None when the algorithm never got there
    reached: dict


def race(cfg, factor=None):
    """Time and communication each algorithm in ``cfg.algorithms`` needs to hit a target.

    The target is ``factor`` times the centralized oracle's test metric:
    NMSE at most 1.5x the floor for regression, accuracy at least 0.9x the
    oracle for classification unless ``factor`` says otherwise.  Every seed in
    ``cfg.seeds`` draws its own data, topology and walks.
    """
    higher = cfg.task == CLASSIFICATION
    factor = factor if factor is not None else (0.9 if higher else 1.5)
    out = []
    for seed in cfg.seeds or [cfg.run.seed]:
        base = cfg.with_overrides({"seed": seed, "seeds": []})
        problem = build_problem(base)
        oracle = oracle_metric(problem, base.loss_kind, base.l2_reg)
        target = factor * oracle
        reached = {}
        for entry in base.algorithms:
            entry = dict(entry)
            label = entry.pop("label", entry.get("algorithm"))
            sub = base.with_overrides({**entry, "algorithms": [], "stop": "metric-target",
                                       "metric_target": target, "probe_every": 1, "log_alternatives": False})
            _, res = run_experiment(sub, problem)
            hit = first_reaching(res.records, target, higher)
            reached[label] = None if hit is None else (hit.sim_time_s, hit.comm_units, hit.event)
        out.append(RaceResult(seed, oracle, target, reached))
    return out
