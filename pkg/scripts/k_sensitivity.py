"""Eval LDS of weights learned with different pseudo-positive counts k.

    python3 scripts/k_sensitivity.py [--config run.ini] [--k 1,5,10,20,50,100]
"""

from __future__ import annotations

import argparse

from attriweight.benchmark import METHODS, Benchmark
from attriweight.config import load_config, parse_list


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--k", default="1,5,10,20,50,100")
    args = ap.parse_args()
    ks = parse_list(args.k, int)
    bench = Benchmark(load_config(args.config))
    print("method   " + "".join(f"{f'k={k}':>9}" for k in ks))
    for method in METHODS:
        vals = [100 * bench.lds(method, bench.learn(method, k=k)).mean for k in ks]
        print(f"{method:<8} " + "".join(f"{v:9.2f}" for v in vals))


if __name__ == "__main__":
    main()
