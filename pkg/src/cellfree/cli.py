"""Command-line entry point: ``cellfree-sim`` / ``python -m cellfree``."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import fig1_mode, load_plan, run
from .scenario import ConfigError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellfree-sim",
                                description="Cell-free downlink precoding Monte-Carlo simulator")
    p.add_argument("--config", help="TOML config with [scenario] and [experiment] sections")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--setups", type=int, dest="n_setups", help="number of network setups")
    p.add_argument("--blocks", type=int, dest="n_blocks", help="coherence blocks per setup")
    p.add_argument("--out", dest="out_dir", help="output directory")
    p.add_argument("--schemes", help="comma-separated labels, e.g. 'MMSE/dist-MM,RZF/core' or 'core'")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--fig1", action="store_true", help="run the per-AP power concentration study instead")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        plan = load_plan(args.config, seed=args.seed, n_setups=args.n_setups, n_blocks=args.n_blocks,
                         out_dir=args.out_dir, schemes=args.schemes, workers=args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    if args.fig1:
        summ = fig1_mode(plan)
        print(f"reference 1/L = {summ['reference']:.4g}; snapshots = {summ['snapshots']}")
        print(f"max P_l/P_s above 1/L in {summ['frac_max_above_ref']:.1%}, "
              f"above 3/L in {summ['frac_max_above_3ref']:.1%}; "
              f"median peak = {summ['median_max_over_ref']:.2f} x cap")
        return 0

    result = run(plan)
    print(f"{'scheme':22s} {'95%-likely':>10s} {'median':>8s} {'mean':>8s}")
    for label, rep in result.reports.items():
        if rep is None:
            print(f"{label:22s} {'failed':>10s}")
            continue
        s = rep.summary()
        print(f"{label:22s} {s['likely95']:10.3f} {s['median']:8.3f} {s['mean']:8.3f}")
    if result.warnings:
        print(f"{len(result.warnings)} warning(s); see metadata.json", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
