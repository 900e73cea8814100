"""Synthesize a metric for the three-node example and store it as package data.

Usage: python3 scripts/synthesize_example.py [--out PATH]
"""

import argparse
import logging
from pathlib import Path

from sepccm.network import example_network
from sepccm.synthesis import SynthesisProblem, export_metric, solve_feasibility

DEFAULT = Path(__file__).resolve().parents[1] / "src" / "sepccm" / "data" / "three_node_synth.metric"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=DEFAULT)
    ap.add_argument("--lam", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    res = solve_feasibility(SynthesisProblem(example_network(), lam=args.lam, seed=args.seed))
    print(res.summary())
    if not res.feasible:
        raise SystemExit(1)
    export_metric(res, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
