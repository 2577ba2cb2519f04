"""``attriweight`` command-line driver.

Usage::

    attriweight <command> --config run.ini [--set section.key=value]... [--jobs N] [--seed S]

Each command writes ``<outdir>/<command>/*.{csv,json}`` plus ``manifest.json``
(sha256 of every input and output, the seed and the package version).
Exit codes: 1 configuration error, 2 missing prerequisite artifact,
3 numerical failure. The last stderr line is a machine-parsable tag such as
``missing:feature_store``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import save_scores_long
from .benchmark import (
    METHODS,
    Benchmark,
    factor_setup,
    mislabel_experiment,
    recall_experiment,
)
from .config import ConfigError, RunConfig, load_config, parse_list, section_keys
from .dataset import DataSplit, load_csv, save_csv
from .errors import DegenerateInput, DimensionMismatch, FormatError, InvalidArgument, NumericalFailure
from .evaluation import load_ground_truth_csv, save_ground_truth_csv
from .features import load_store, save_store
from .model import accuracy, load_checkpoint, save_checkpoint
from .oracle import generate_queries, verify_recovery
from .weighting import LossVariant, WeightLearnConfig, learn_weights, load_weights, save_weights

COMMANDS = (
    "gen-data", "train", "extract", "attribute", "learn-weights", "sweep", "eval-lds",
    "eval-mislabel", "eval-tailpatch", "eval-recall", "per-group-lds", "oracle-check",
    "noise-sweep", "weight-cosine",
)
STORE_ROLES = ("train", "weight", "eval")


class MissingArtifact(Exception):
    def __init__(self, tag: str, hint: str):
        super().__init__(hint)
        self.tag = tag


def pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, cfg: RunConfig, command: str, jobs: int):
        self.cfg = cfg
        self.command = command
        self.jobs = jobs
        self.root = Path(cfg.outdir)
        self.dir = self.root / command
        self.inputs: list[Path] = []

    def path(self, command: str, name: str) -> Path:
        return self.root / command / name

    def need(self, command: str, name: str, tag: str) -> Path:
        p = self.path(command, name)
        if not p.exists():
            raise MissingArtifact(tag, f"{p} not found; run `attriweight {command}` first")
        self.inputs.append(p)
        return p

    def start(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)

    def finish(self) -> None:
        (self.dir / "config.ini").write_text(self.cfg.to_ini(), encoding="utf-8")
        outputs = sorted(p for p in self.dir.rglob("*") if p.is_file() and p.name != "manifest.json")
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.seed,
            "config_sha256": self.cfg.digest(),
            "inputs": {str(p.relative_to(self.root)): _sha256(p) for p in sorted(set(self.inputs))},
            "outputs": {str(p.relative_to(self.root)): _sha256(p) for p in outputs},
        }
        write_json(self.dir / "manifest.json", manifest)


# -- artifact loading ----------------------------------------------------------------

def load_data(run: Run):
    ds = load_csv(run.need("gen-data", "dataset.csv", "missing:dataset"), run.cfg.dataset.num_classes)
    roles = {"train": [], "weight": [], "eval": []}
    with open(run.need("gen-data", "splits.csv", "missing:dataset"), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for i, role in reader:
            roles[role].append(int(i))
    split = DataSplit(*(np.array(roles[r], dtype=np.int64) for r in ("train", "weight", "eval")))
    return ds, split


def load_stores(run: Run):
    paths = [run.path("extract", f"{role}.gfst") for role in STORE_ROLES]
    if not all(p.exists() for p in paths):
        raise MissingArtifact("missing:feature_store", "feature stores not found; run `attriweight extract` first")
    run.inputs += paths
    return {role: load_store(p) for role, p in zip(STORE_ROLES, paths)}


def load_model(run: Run):
    return load_checkpoint(run.need("train", "model.atwc", "missing:checkpoint"))


def bench_from_artifacts(run: Run, need_model: bool = False) -> Benchmark:
    stores = load_stores(run)
    data = load_data(run)
    stages = {"data": data, "stores": stores}
    if need_model:
        stages["checkpoint"] = load_model(run)
    return Benchmark.from_artifacts(run.cfg, run.jobs, **stages)


def ground_truth(run: Run, bench: Benchmark):
    """LDS ground truth, cached as text under ``<outdir>/ground-truth``."""
    gt_dir = run.root / "ground-truth"
    marker = gt_dir / "config.sha256"
    key = _gt_key(run.cfg)
    if marker.exists() and marker.read_text().strip() == key:
        gt = load_ground_truth_csv(gt_dir)
    else:
        gt = bench.ground_truth
        save_ground_truth_csv(gt, gt_dir)
        marker.write_text(key + "\n")
    bench._gt = gt
    run.inputs += [gt_dir / "outputs.csv", gt_dir / "subsets.csv"]
    return gt


def _gt_key(cfg: RunConfig) -> str:
    parts = [cfg.dataset, cfg.model, cfg.eval.lds_alpha, cfg.eval.lds_subsets, cfg.eval.lds_seed, cfg.seed]
    return hashlib.sha256(repr(parts).encode()).hexdigest()


def weights_for(run: Run, method: str):
    return load_weights(run.need("learn-weights", f"weights_{method}.tsv", "missing:weights"))


# -- commands --------------------------------------------------------------------

def cmd_gen_data(run: Run) -> None:
    bench = Benchmark(run.cfg)
    ds, split = bench.data
    save_csv(ds, run.dir / "dataset.csv")
    rows = [(int(i), role) for role, ids in (
        ("train", split.train_ids), ("weight", split.weight_learning_ids), ("eval", split.eval_ids)
    ) for i in ids]
    write_csv(run.dir / "splits.csv", ["id", "role"], sorted(rows))
    write_json(run.dir / "summary.json", {
        "n_examples": len(ds), "num_classes": ds.num_classes, "dim": ds.dim,
        "n_train": len(split.train_ids), "n_weight": len(split.weight_learning_ids), "n_eval": len(split.eval_ids),
    })
    print(f"dataset: {len(ds)} examples, {ds.num_classes} classes, dim {ds.dim}")


def cmd_train(run: Run) -> None:
    ds, split = load_data(run)
    bench = Benchmark.from_artifacts(run.cfg, run.jobs, data=(ds, split))
    ckpt = bench.checkpoint
    save_checkpoint(ckpt, run.dir / "model.atwc")
    acc = {
        role: accuracy(ckpt, *ds.subset_arrays(ids))
        for role, ids in (("train", split.train_ids), ("weight", split.weight_learning_ids), ("eval", split.eval_ids))
    }
    write_json(run.dir / "train.json", {
        "accuracy": acc, "groups": [list(g) for g in ckpt.grouping.groups], "checkpoint": ckpt.digest(),
    })
    print("accuracy " + " ".join(f"{r}={pct(a)}%" for r, a in acc.items()))


def cmd_extract(run: Run) -> None:
    ds, split = load_data(run)
    bench = Benchmark.from_artifacts(run.cfg, run.jobs, data=(ds, split), checkpoint=load_model(run))
    for role, store in bench.stores.items():
        save_store(store, run.dir / f"{role}.gfst")
    layout = bench.stores["train"].group_layout
    write_json(run.dir / "layout.json", {"groups": [list(g) for g in layout]})
    print("feature stores: " + ", ".join(f"{r} {len(s.example_ids)}x{s.dim}" for r, s in bench.stores.items()))


def cmd_attribute(run: Run) -> None:
    bench = bench_from_artifacts(run)
    method = run.cfg.attribution.method
    qids = bench.stores["eval"].example_ids
    save_scores_long(run.dir / f"scores_{method}.csv", qids, bench.scores(method))
    weights_path = run.path("learn-weights", f"weights_{method}.tsv")
    if weights_path.exists():
        run.inputs.append(weights_path)
        save_scores_long(run.dir / f"scores_{method}_weighted.csv", qids, bench.scores(method, load_weights(weights_path)))
    print(f"{method}: scored {len(qids)} queries against {len(bench.stores['train'].example_ids)} training examples")


def cmd_learn_weights(run: Run) -> None:
    aug = run.cfg.weighting.loss == LossVariant.SUPERVISED_AUG.value
    bench = bench_from_artifacts(run, need_model=aug)
    for method in METHODS:
        wcfg = bench.weight_config(method)
        contribs = bench.augmented_contribs(method) if aug else bench.contribs(method, "weight")
        trace: list[float] = []
        w = learn_weights(contribs, wcfg, trace=trace)
        save_weights(w, run.dir / f"weights_{method}.tsv", header=_cfg_header(wcfg))
        write_csv(run.dir / f"trace_{method}.csv", ["epoch", "mean_loss"], [(i, v) for i, v in enumerate(trace)])
        print(f"{method}: " + " ".join(f"{n}={v:.4f}" for n, v in zip(w.group_names, w.values)))


def _cfg_header(wcfg: WeightLearnConfig) -> dict:
    d = wcfg.describe()
    return {k: d[k] for k in ("k", "lambda_reg", "lr", "epochs", "loss_variant", "seed")}


def cmd_sweep(run: Run) -> None:
    bench = bench_from_artifacts(run)
    ground_truth(run, bench)
    method = run.cfg.attribution.method
    result = bench.sweep(method)
    rows = [
        (c.k, c.lambda_reg, "" if c.score is None else c.score, c.error or "")
        for c in result.cells
    ]
    write_csv(run.dir / f"sweep_{method}.csv", ["k", "lambda_reg", "selector_lds", "error"], rows)
    save_weights(result.weights, run.dir / f"best_{method}.tsv", header={"k": result.k, "lambda_reg": result.lambda_reg})
    best = bench.lds(method, result.weights)
    write_json(run.dir / f"sweep_{method}.json", {
        "method": method, "best_k": result.k, "best_lambda_reg": result.lambda_reg,
        "eval_lds": best.to_dict(),
    })
    print(f"{method}: best k={result.k} lambda={result.lambda_reg} eval LDS {pct(best.mean)}")


def cmd_eval_lds(run: Run) -> None:
    bench = bench_from_artifacts(run)
    weights = {m: weights_for(run, m) for m in METHODS}
    ground_truth(run, bench)
    summary = {}
    for method in METHODS:
        cmp = bench.compare(method, weights[method])
        cmp.unweighted.save_json(run.dir / f"lds_{method}_unweighted.json")
        cmp.weighted.save_json(run.dir / f"lds_{method}_weighted.json")
        write_csv(
            run.dir / f"lds_{method}.csv", ["query_id", "unweighted", "weighted"],
            zip(bench.split.eval_ids.tolist(), cmp.unweighted.per_query, cmp.weighted.per_query),
        )
        summary[method] = {
            "unweighted": cmp.unweighted.mean, "weighted": cmp.weighted.mean,
            "unweighted_ci95": cmp.unweighted.ci95_halfwidth, "weighted_ci95": cmp.weighted.ci95_halfwidth,
            "improvement": cmp.improvement, "bootstrap_ci95": list(cmp.bootstrap_ci),
        }
        print(
            f"{method}: LDS {pct(cmp.unweighted.mean)} -> {pct(cmp.weighted.mean)} "
            f"(paired 95% CI of gain [{pct(cmp.bootstrap_ci[0])}, {pct(cmp.bootstrap_ci[1])}])"
        )
    write_json(run.dir / "lds.json", summary)


def cmd_eval_mislabel(run: Run) -> None:
    method = run.cfg.attribution.method
    runs = mislabel_experiment(run.cfg, method)
    write_csv(
        run.dir / f"mislabel_{method}.csv", ["corruption_seed", "auc_unweighted", "auc_weighted", "margin"],
        [(r.seed, r.auc_unweighted, r.auc_weighted, r.margin) for r in runs],
    )
    margins = [r.margin for r in runs]
    write_json(run.dir / f"mislabel_{method}.json", {
        "method": method,
        "auc_unweighted": [r.auc_unweighted for r in runs],
        "auc_weighted": [r.auc_weighted for r in runs],
        "mean_margin": float(np.mean(margins)),
    })
    for r in runs:
        print(f"seed {r.seed}: AUC {pct(r.auc_unweighted)} -> {pct(r.auc_weighted)}")


def cmd_eval_tailpatch(run: Run) -> None:
    bench = bench_from_artifacts(run, need_model=True)
    method = run.cfg.attribution.method
    w = weights_for(run, method)
    reports = {
        "unweighted": bench.tail_patch(method, None),
        "weighted": bench.tail_patch(method, w),
        "random": bench.random_tail_patch(),
    }
    write_csv(
        run.dir / f"tailpatch_{method}.csv", ["query_id"] + list(reports),
        zip(bench.split.eval_ids.tolist(), *(r.per_query for r in reports.values())),
    )
    write_json(run.dir / f"tailpatch_{method}.json", {k: r.to_dict() for k, r in reports.items()})
    print(" ".join(f"{k}={r.mean:.5f}+-{r.ci95_halfwidth:.5f}" for k, r in reports.items()))


def cmd_eval_recall(run: Run) -> None:
    setup = factor_setup(run.cfg)
    out = {}
    for method in METHODS:
        res = recall_experiment(run.cfg, method, setup)
        out[method] = {
            "weights": dict(zip(res.weights.group_names, res.weights.values.tolist())),
            **{f"{split}_{kind}": rep.mean for (split, kind), rep in res.reports.items()},
        }
        rows = []
        for (split, kind), rep in res.reports.items():
            rows += [(split, kind, i, v) for i, v in enumerate(rep.per_query)]
        write_csv(run.dir / f"recall_{method}.csv", ["split", "kind", "query_index", "recall"], rows)
        print(
            f"{method}: factor-A Recall@{run.cfg.eval.recall_k} train {pct(res.mean('train', 'unweighted'))} -> "
            f"{pct(res.mean('train', 'weighted'))}, held-out {pct(res.mean('heldout', 'unweighted'))} -> "
            f"{pct(res.mean('heldout', 'weighted'))}"
        )
    write_json(run.dir / "recall.json", out)


def cmd_per_group_lds(run: Run) -> None:
    bench = bench_from_artifacts(run)
    ground_truth(run, bench)
    out = {}
    for method in METHODS:
        values = bench.per_group_lds(method)
        names = bench.stores["train"].group_names
        out[method] = dict(zip(names, values.tolist()))
        write_csv(run.dir / f"per_group_lds_{method}.csv", ["group", "lds"], zip(names, values))
        print(f"{method}: " + " ".join(f"{n}={pct(v)}" for n, v in zip(names, values)))
    write_json(run.dir / "per_group_lds.json", out)


def cmd_oracle_check(run: Run) -> None:
    o = run.cfg.oracle
    alphas, sigmas = parse_list(o.alphas), parse_list(o.sigmas)
    queries = generate_queries(alphas, sigmas, o.n, o.queries, o.sparsity, run.cfg.seeded(o.seed))
    w = run.cfg.weighting
    report = verify_recovery(queries, WeightLearnConfig(k=o.k, lr=w.lr, epochs=w.epochs))
    queries[0].save_csv(run.dir / "instance.csv")
    write_json(run.dir / "oracle.json", {
        "alphas": alphas, "sigmas": sigmas,
        "learned": report.learned.values.tolist(), "optimal": report.optimal.values.tolist(),
        "cosine_to_optimal": report.cosine_to_optimal, "snr_ratio": report.snr_ratio,
    })
    print(f"cosine to optimal {report.cosine_to_optimal:.4f}, SNR ratio {report.snr_ratio:.4f}")


def cmd_noise_sweep(run: Run) -> None:
    bench = bench_from_artifacts(run)
    ground_truth(run, bench)
    rows, out = [], {}
    for method in METHODS:
        base = bench.lds(method)
        out[method] = {"unweighted": base.mean, "sweep": []}
        for s, w, rep in bench.noise_sweep(method):
            rows.append((method, s, rep.mean, rep.ci95_halfwidth, base.mean))
            out[method]["sweep"].append({"scale": s, "lds": rep.mean, "weights": w.values.tolist()})
            print(f"{method} s={s:g}: LDS {pct(rep.mean)} (unweighted {pct(base.mean)})")
    write_csv(run.dir / "noise_sweep.csv", ["method", "scale", "lds", "ci95", "unweighted_lds"], rows)
    write_json(run.dir / "noise_sweep.json", out)


def cmd_weight_cosine(run: Run) -> None:
    bench = bench_from_artifacts(run)
    ground_truth(run, bench)
    c = bench.consistency()
    out = {
        "tracin_weights": c.tracin_weights.values.tolist(),
        "trak_weights": c.trak_weights.values.tolist(),
        "groups": list(c.tracin_weights.group_names),
        "tracin_vs_trak": c.cross_cosine,
        "tracin_vs_random": c.tracin_random_cosine,
        "trak_vs_random": c.trak_random_cosine,
        "per_group_lds_vs_weights": c.per_group_lds_cosine,
    }
    write_json(run.dir / "weight_cosine.json", out)
    write_csv(
        run.dir / "weight_cosine.csv", ["pair", "cosine"],
        [("tracin_vs_trak", c.cross_cosine), ("tracin_vs_random", c.tracin_random_cosine),
         ("trak_vs_random", c.trak_random_cosine)]
        + [(f"per_group_lds_vs_{m}", v) for m, v in c.per_group_lds_cosine.items()],
    )
    print(
        f"cosine tracin/trak {c.cross_cosine:.4f}; to random {c.tracin_random_cosine:.4f} / "
        f"{c.trak_random_cosine:.4f}"
    )


COMMAND_HELP = {
    "gen-data": "Generate the Gaussian-blob dataset and its three-way split.",
    "train": "Train the model on the training split.",
    "extract": "Extract projected per-group gradient features.",
    "attribute": "Score every eval query against the training set.",
    "learn-weights": "Learn per-group weights for TracIn and TRAK.",
    "sweep": "Grid-search (k, lambda) selected by LDS on weight-learning queries.",
    "eval-lds": "Weighted vs unweighted LDS with a paired bootstrap.",
    "eval-mislabel": "Mislabel detection AUC from self-influence over corruption seeds.",
    "eval-tailpatch": "Tail-patch log-probability change, with a random baseline.",
    "eval-recall": "Factor-A Recall@k on the two-factor dataset.",
    "per-group-lds": "LDS of each parameter group on its own.",
    "oracle-check": "Weight recovery on the signal-plus-noise oracle.",
    "noise-sweep": "Learn on noise-perturbed contributions, evaluate on clean queries.",
    "weight-cosine": "Agreement of TracIn and TRAK weights and per-group LDS.",
}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "extract": cmd_extract,
    "attribute": cmd_attribute,
    "learn-weights": cmd_learn_weights,
    "sweep": cmd_sweep,
    "eval-lds": cmd_eval_lds,
    "eval-mislabel": cmd_eval_mislabel,
    "eval-tailpatch": cmd_eval_tailpatch,
    "eval-recall": cmd_eval_recall,
    "per-group-lds": cmd_per_group_lds,
    "oracle-check": cmd_oracle_check,
    "noise-sweep": cmd_noise_sweep,
    "weight-cosine": cmd_weight_cosine,
}


# -- argument parsing ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="attriweight", description="Parameter-group-weighted data attribution pipeline.", allow_abbrev=False
    )
    parser.add_argument("--version", action="version", version=f"attriweight {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMAND_HELP[name], description=COMMAND_HELP[name], allow_abbrev=False)
        p.add_argument("--config", help="INI file with [dataset] [model] ... sections")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one key")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers for subset retraining and sweeps")
        p.add_argument("--seed", type=int, default=None, help="global seed added to every component seed")
        p.add_argument("--outdir", default=None, help="output root (run.outdir)")
        group = p.add_argument_group("configuration keys")
        for section, key, kind, default in section_keys():
            type_name = getattr(kind, "__name__", "float|none")
            group.add_argument(
                f"--{section}.{key}", dest=f"{section}.{key}", default=None, metavar=type_name.upper(),
                help=f"default: {default}",
            )
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            overrides[key.strip()] = value
        for section, key, _, _ in section_keys():
            value = getattr(args, f"{section}.{key}")
            if value is not None:
                overrides[f"{section}.{key}"] = value
        if args.seed is not None:
            overrides["run.seed"] = str(args.seed)
        if args.outdir is not None:
            overrides["run.outdir"] = args.outdir
        cfg = load_config(args.config, overrides)
        run = Run(cfg, args.command, max(1, args.jobs))
        run.start()
        HANDLERS[args.command](run)
        run.finish()
        return 0
    except ConfigError as exc:
        print(f"config:error {exc}", file=sys.stderr)
        return 1
    except MissingArtifact as exc:
        print(f"{exc.tag} {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"missing:corrupt_artifact {exc}", file=sys.stderr)
        return 2
    except DimensionMismatch as exc:
        print(f"missing:stale_artifact {exc}", file=sys.stderr)
        return 2
    except (NumericalFailure, DegenerateInput) as exc:
        print(f"numerical:failure {exc}", file=sys.stderr)
        return 3
    except InvalidArgument as exc:
        print(f"config:invalid {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
