"""Time and communication each algorithm needs to reach a target test metric.

    python3 scripts/race.py experiments/race_cpusmall.json --seeds 0 1 2 3 4

The target is a multiple of the centralized oracle's test metric (1.5x the
NMSE floor, or 0.9x the oracle accuracy).  The latency is pinned to the
midpoint of the configured range unless --keep-latency is given.
"""

import argparse
import json

from tokenwalk.experiment import load_config, race


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--factor", type=float)
    ap.add_argument("--max-events", type=int, default=20_000)
    ap.add_argument("--keep-latency", action="store_true")
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args()

    cfg = load_config(args.config, {"seeds": args.seeds, "max_events": args.max_events})
    if not args.keep_latency:
        mid = 0.5 * (cfg.run.latency_low + cfg.run.latency_high)
        cfg = cfg.with_overrides({"latency_low": mid, "latency_high": mid})
    results = race(cfg, args.factor)
    labels = [e.get("label", e.get("algorithm")) for e in cfg.algorithms]
    print(f"{'seed':>4} {'target':>10} " + " ".join(f"{lab:>24}" for lab in labels))
    for r in results:
        cells = []
        for lab in labels:
            hit = r.reached.get(lab)
            cells.append(f"{'never':>24}" if hit is None else f"{hit[0] * 1e3:9.3f} ms {hit[1]:6d} comm".rjust(24))
        print(f"{r.seed:>4} {r.target:10.5f} " + " ".join(cells))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([{"seed": r.seed, "oracle": r.oracle, "target": r.target, "reached": r.reached}
                       for r in results], fh, indent=2)


if __name__ == "__main__":
    main()
