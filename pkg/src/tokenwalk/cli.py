"""Command-line entry point: ``tokenwalk {run,compare,verify,gendata}``.

Config precedence, lowest first: the JSON config file, ``--set KEY=VALUE``
pairs, then the named flags (``--seed``, ``--tau``, ...).  The output
directory is ``--out-dir``, else the config's ``out_dir``, else
``$TOKENWALK_OUT_DIR``, else ``./runs``; each run writes into
``<out>/<name>/``.

Exit codes: 0 ok, 1 invalid input, 2 inner-solver failure, 3 theorem violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .algorithms import ConfigError, TheoremViolation
from .data import serialize_libsvm, synthesize_classification, synthesize_regression, write_ground_truth
from .data import ParseError
from .experiment import (
    OUT_DIR_ENV,
    compare,
    load_config,
    manifest,
    output_dir,
    run_experiment,
    verify,
    write_comparison,
    write_run,
)
from .simulator import InvariantViolation, SimulationError

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_THEOREM = 0, 1, 2, 3

log = logging.getLogger("tokenwalk")

# named flag -> config key
RUN_FLAGS = {
    "seed": "seed",
    "max_events": "max_events",
    "algorithm": "algorithm",
    "tau": "tau",
    "rho": "rho",
    "alpha": "alpha",
    "n_walks": "n_walks",
    "compute_model": "compute_model",
    "name": "name",
}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_set(pairs):
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = _parse_value(value)
    return out


def overrides_from_args(args):
    over = parse_set(args.set)
    for flag, key in RUN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    return over


def _add_common(p):
    p.add_argument("config", help="JSON experiment config, or a manifest.json from an earlier run")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (JSON value)")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-events", type=int)
    p.add_argument("--out-dir", help=f"output root (default: config out_dir, ${OUT_DIR_ENV}, ./runs)")
    p.add_argument("--name", help="run name, used as the output subdirectory")


def _add_algo(p):
    p.add_argument("--algorithm")
    p.add_argument("--tau", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--n-walks", type=int)
    p.add_argument("--compute-model", choices=("measured", "constant", "zero"))


def build_parser():
    parser = argparse.ArgumentParser(prog="tokenwalk", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one run; writes trace.csv, manifest.json, shards.json")
    _add_common(p)
    _add_algo(p)

    p = sub.add_parser("compare", help="several algorithms on one problem; writes comparison.csv")
    _add_common(p)
    p.add_argument("--compute-model", choices=("measured", "constant", "zero"))

    p = sub.add_parser("verify", help="check a descent inequality on every iteration")
    p.add_argument("theorem", choices=("thm1", "thm2", "thm3"))
    _add_common(p)
    _add_algo(p)
    p.add_argument("--inner-tol", type=float, default=1e-10)
    p.add_argument("--tol", type=float, default=1e-8, help="relative slack, scaled by 1 + |F|")

    p = sub.add_parser("gendata", help="write a synthetic LIBSVM file and a ground-truth sidecar")
    p.add_argument("output", help="path of the .libsvm file; the sidecar is <output>.truth.json")
    p.add_argument("--task", choices=("regression", "classification"), default="regression")
    p.add_argument("--n-rows", type=int, default=1000)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--flip-prob", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_run(args):
    cfg = load_config(args.config, overrides_from_args(args))
    problem, result = run_experiment(cfg)
    out = write_run(cfg, problem, result, output_dir(cfg, args.out_dir))
    last = result.records[-1] if result.records else None
    print(f"{cfg.run.algorithm}: {len(result.events)} events, {result.ledger.comm_units} comm units, "
          f"{result.ledger.sim_time:.6g} s simulated ({result.stop_reason})")
    if last is not None:
        print(f"objective {last.objective:.10g}  train {last.train_metric:.6g}  test {last.test_metric:.6g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_compare(args):
    cfg = load_config(args.config, overrides_from_args(args))
    problem, results = compare(cfg)
    out = output_dir(cfg, args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        write_comparison(results, fh)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest(cfg, problem), fh, indent=2, sort_keys=True)
    for label, res in results:
        last = res.records[-1] if res.records else None
        tail = f"  test {last.test_metric:.6g}" if last else ""
        print(f"{label:>16}: {len(res.events)} events, {res.ledger.comm_units} comm, "
              f"{res.ledger.sim_time:.6g} s{tail}")
    print(f"wrote {out / 'comparison.csv'}")
    return EXIT_OK


def cmd_verify(args):
    cfg = load_config(args.config, overrides_from_args(args))
    runs = verify(args.theorem, cfg, inner_tol=args.inner_tol, tol=args.tol)
    report = {
        "theorem": args.theorem,
        "inner_tol": args.inner_tol,
        "runs": [
            {"seed": r.seed, "params": r.params, "iterations": r.iterations, "min_slack": r.min_slack,
             "violations": r.violations, "monotone": r.monotone,
             "max_consistency_error": r.max_consistency_error, "error": r.error}
            for r in runs
        ],
    }
    report["passed"] = all(r.passed for r in runs)
    out = output_dir(cfg, args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"verify_{args.theorem}.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for r in runs:
        flag = "ok" if r.passed else "VIOLATED"
        print(f"seed {r.seed} {r.params}: {r.iterations} iterations, min slack {r.min_slack:.3e}, "
              f"{r.violations} violations [{flag}]")
    print(f"{args.theorem}: {'all runs pass' if report['passed'] else 'violations found'}")
    if not report["passed"]:
        raise TheoremViolation(f"{args.theorem} violated in {sum(not r.passed for r in runs)} run(s)")
    return EXIT_OK


def cmd_gendata(args):
    if args.task == "regression":
        ds, truth = synthesize_regression(args.n_rows, args.p, args.noise_sigma, args.seed)
        meta = {"task": args.task, "noise_sigma": args.noise_sigma}
    else:
        ds, truth = synthesize_classification(args.n_rows, args.p, args.margin, args.seed, args.flip_prob)
        meta = {"task": args.task, "margin": args.margin, "flip_prob": args.flip_prob}
    meta.update(n_rows=args.n_rows, p=args.p, seed=args.seed)
    path = Path(args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_libsvm(ds))
    write_ground_truth(f"{path}.truth.json", truth, meta)
    print(f"wrote {path} ({ds.n_rows} rows, {ds.n_features} features)")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "verify": cmd_verify, "gendata": cmd_gendata}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TheoremViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_THEOREM
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except InvariantViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_THEOREM
    except (ConfigError, ParseError, ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
