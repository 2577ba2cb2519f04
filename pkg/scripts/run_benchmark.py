"""Weighted vs unweighted LDS for both methods on one configuration.

    python3 scripts/run_benchmark.py [--config run.ini] [--jobs N]
"""

from __future__ import annotations

import argparse

from attriweight.benchmark import METHODS, Benchmark
from attriweight.config import load_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    bench = Benchmark(load_config(args.config), jobs=args.jobs)
    print(f"{'method':<8} {'unweighted':>11} {'weighted':>9} {'diff 95% CI':>18}")
    for method in METHODS:
        c = bench.compare(method)
        lo, hi = c.bootstrap_ci
        print(f"{method:<8} {100 * c.unweighted.mean:11.2f} {100 * c.weighted.mean:9.2f}   [{100 * lo:6.2f}, {100 * hi:6.2f}]")
        print("  weights: " + ", ".join(f"{n}={v:.3f}" for n, v in zip(c.weights.group_names, c.weights.values)))


if __name__ == "__main__":
    main()
