"""Eval LDS of weights learned under each self-supervised loss variant.

    python3 scripts/loss_ablation.py [--config run.ini]
"""

from __future__ import annotations

import argparse

from attriweight.benchmark import METHODS, Benchmark
from attriweight.config import load_config
from attriweight.weighting import LossVariant


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    args = ap.parse_args()
    bench = Benchmark(load_config(args.config))
    variants = [v.value for v in LossVariant]
    print(f"{'method':<8} {'unweighted':>11}" + "".join(f"{v:>18}" for v in variants))
    for method in METHODS:
        row = [100 * bench.lds(method).mean]
        for v in variants:
            contribs = bench.augmented_contribs(method) if v == "SupervisedAug" else None
            row.append(100 * bench.lds(method, bench.learn(method, contribs=contribs, loss_variant=v)).mean)
        print(f"{method:<8} {row[0]:11.2f}" + "".join(f"{x:18.2f}" for x in row[1:]))


if __name__ == "__main__":
    main()
