"""LDS, mislabel AUC, tail-patch and Recall@k, plus rank statistics."""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .attribution import AttributionResult, GroupContributionMatrix
from .dataset import CorruptionRecord, LabeledDataset
from .errors import DegenerateInput, DimensionMismatch, InvalidArgument
from .model import (
    ModelCheckpoint,
    TrainConfig,
    example_outputs,
    log_probs,
    retrain_on_subset,
    sgd_step,
)
from .prng import SplitMix64, derive_seed

CI_Z = 1.96


class DegenerateWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EvalReport:
    metric_name: str
    per_query: np.ndarray
    mean: float
    ci95_halfwidth: float

    @classmethod
    def from_values(cls, name: str, values) -> "EvalReport":
        values = np.asarray(values, dtype=np.float64)
        mean = float(values.mean()) if values.size else float("nan")
        if values.size > 1:
            half = float(CI_Z * values.std(ddof=1) / np.sqrt(values.size))
        else:
            half = 0.0
        return cls(name, values, mean, half)

    @property
    def stderr(self) -> float:
        return self.ci95_halfwidth / CI_Z

    def to_dict(self) -> dict:
        return {
            "metric": self.metric_name,
            "n_queries": int(self.per_query.size),
            "mean": self.mean,
            "ci95": self.ci95_halfwidth,
            "per_query": [float(v) for v in self.per_query],
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["query_index", self.metric_name])
            for i, v in enumerate(self.per_query):
                out.writerow([i, repr(float(v))])


# -- rank statistics -----------------------------------------------------------

def _has_ties(v: np.ndarray) -> bool:
    return np.unique(v).size != v.size


def spearman(a, b, return_flag: bool = False):
    """Spearman correlation with average ranks for ties.

    A constant input has no defined correlation: the result is 0 and, with
    ``return_flag=True``, the second return value is ``True``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise DimensionMismatch("spearman needs two vectors of equal length >= 2")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return (0.0, True) if return_flag else 0.0
    n = a.size
    if not _has_ties(a) and not _has_ties(b):
        # integer form 1 - 6 sum d^2 / (n^3 - n), rounded once
        ra = np.empty(n, dtype=np.int64)
        rb = np.empty(n, dtype=np.int64)
        ra[np.argsort(a)] = np.arange(n)
        rb[np.argsort(b)] = np.arange(n)
        d2 = int(((ra - rb) ** 2).sum())
        denom = n * (n * n - 1)
        rho = (denom - 6 * d2) / denom
    else:
        ra, rb = rankdata(a), rankdata(b)
        ra, rb = ra - ra.mean(), rb - rb.mean()
        rho = float(ra @ rb / np.sqrt((ra @ ra) * (rb @ rb)))
        rho = min(1.0, max(-1.0, rho))
    return (rho, False) if return_flag else rho


def auc_mann_whitney(scores, positive_mask) -> float:
    """ROC AUC from the rank-sum statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive_mask, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInput("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mislabel_auc(normalized_self_influence, record: CorruptionRecord, training_ids=None) -> float:
    scores = np.asarray(normalized_self_influence, dtype=np.float64)
    ids = np.arange(scores.size) if training_ids is None else np.asarray(training_ids)
    positive = np.isin(ids, record.corrupted_ids)
    return auc_mann_whitney(scores, positive)


def recall_at_k(attribution: AttributionResult, ground_truth_ids, k: int) -> float:
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    top = attribution.top_k(k)
    return float(np.isin(top, np.asarray(list(ground_truth_ids))).sum() / k)


def paired_bootstrap(diffs, n_resamples: int = 1000, seed: int = 0, level: float = 0.95):
    """Percentile CI of the mean of paired per-query differences."""
    diffs = np.asarray(diffs, dtype=np.float64)
    n = diffs.size
    idx = SplitMix64(seed, "bootstrap").integers(n_resamples * n, n).reshape(n_resamples, n)
    means = diffs[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


# -- LDS -----------------------------------------------------------------------

@dataclass(frozen=True)
class LdsGroundTruth:
    subsets: list[np.ndarray]
    outputs: np.ndarray
    alpha: float
    seed: int
    training_ids: np.ndarray
    query_ids: np.ndarray | None = None

    def membership(self) -> np.ndarray:
        """``M_sub x N_train`` 0/1 matrix in training-id order."""
        pos = {int(t): i for i, t in enumerate(self.training_ids)}
        mask = np.zeros((len(self.subsets), len(self.training_ids)))
        for m, subset in enumerate(self.subsets):
            mask[m, [pos[int(i)] for i in subset]] = 1.0
        return mask

    def save(self, path) -> None:
        np.savez(
            path,
            subsets=np.stack(self.subsets),
            outputs=self.outputs,
            alpha=self.alpha,
            seed=self.seed,
            training_ids=self.training_ids,
            query_ids=np.asarray([] if self.query_ids is None else self.query_ids),
        )

    @classmethod
    def load(cls, path) -> "LdsGroundTruth":
        with np.load(path) as z:
            q = z["query_ids"]
            return cls(
                list(z["subsets"]), z["outputs"], float(z["alpha"]), int(z["seed"]),
                z["training_ids"], q if q.size else None,
            )


def save_ground_truth_csv(gt: LdsGroundTruth, directory) -> None:
    """Text form of a ground truth: ``subsets.csv``, ``outputs.csv`` and ``meta.json``.

    Floats are written with ``repr`` so the round trip is exact, and unlike
    ``.npz`` the files carry no timestamps.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "subsets.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["subset", "train_id"])
        for m, subset in enumerate(gt.subsets):
            out.writerows([m, int(t)] for t in subset)
    qids = np.arange(gt.outputs.shape[0]) if gt.query_ids is None else gt.query_ids
    with open(directory / "outputs.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["query_id"] + [f"subset_{m}" for m in range(len(gt.subsets))])
        for q, row in zip(qids, gt.outputs):
            out.writerow([int(q)] + [repr(float(v)) for v in row])
    meta = {
        "alpha": gt.alpha,
        "seed": gt.seed,
        "training_ids": [int(t) for t in gt.training_ids],
        "has_query_ids": gt.query_ids is not None,
    }
    (directory / "meta.json").write_text(json.dumps(meta) + "\n")


def load_ground_truth_csv(directory) -> LdsGroundTruth:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    members: dict[int, list[int]] = {}
    with open(directory / "subsets.csv", newline="") as fh:
        rows = csv.reader(fh)
        next(rows)
        for m, t in rows:
            members.setdefault(int(m), []).append(int(t))
    with open(directory / "outputs.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    qids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    outputs = np.array([[float(v) for v in r[1:]] for r in rows])
    subsets = [np.array(members[m], dtype=np.int64) for m in sorted(members)]
    return LdsGroundTruth(
        subsets, outputs, float(meta["alpha"]), int(meta["seed"]),
        np.array(meta["training_ids"], dtype=np.int64), qids if meta["has_query_ids"] else None,
    )


def lds_subsets(train_ids, alpha: float, m_subsets: int, seed: int) -> list[np.ndarray]:
    train_ids = np.sort(np.asarray(train_ids, dtype=np.int64))
    size = int(round(alpha * len(train_ids)))
    return [
        np.sort(train_ids[SplitMix64(seed, "lds-subset", m).choice(len(train_ids), size)])
        for m in range(m_subsets)
    ]


def _retrain_outputs(args):
    ds, subset, arch, cfg, qx, qy = args
    ckpt = retrain_on_subset(ds, subset, arch, cfg)
    return example_outputs(ckpt, qx, qy)


def build_lds_ground_truth(
    ds: LabeledDataset,
    train_ids,
    arch,
    cfg: TrainConfig,
    alpha: float = 0.5,
    m_subsets: int = 64,
    queries=None,
    seed: int = 0,
    query_data=None,
    shared_init: bool = True,
    jobs: int = 1,
) -> LdsGroundTruth:
    """Retrain once per random ``alpha``-subset and record ``-loss`` at each query.

    ``queries`` are dataset ids; ``query_data=(x, y)`` supplies query rows
    directly instead. Each subset trains with its own shuffling seed; with
    ``shared_init`` all subsets start from the initialisation of ``cfg.seed``.
    """
    if not 0 < alpha < 1 or m_subsets < 2:
        raise InvalidArgument("need 0 < alpha < 1 and m_subsets >= 2")
    train_ids = np.sort(np.asarray(train_ids, dtype=np.int64))
    if query_data is None:
        qids = np.asarray(queries, dtype=np.int64)
        qx, qy = ds.subset_arrays(qids)
    else:
        qids = None if queries is None else np.asarray(queries)
        qx, qy = query_data
    subsets = lds_subsets(train_ids, alpha, m_subsets, seed)
    init_seed = cfg.seed if cfg.init_seed is None else cfg.init_seed
    tasks = []
    for m, subset in enumerate(subsets):
        sub_cfg = replace(
            cfg,
            seed=derive_seed(seed, "lds-train", m) & 0x7FFFFFFF,
            init_seed=init_seed if shared_init else None,
        )
        tasks.append((ds, subset, arch, sub_cfg, qx, qy))
    outputs = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_retrain_outputs, tasks))
    else:
        for m, task in enumerate(tasks):
            try:
                outputs.append(_retrain_outputs(task))
            except Exception as exc:
                raise type(exc)(f"subset {m}: {exc}") from exc
    return LdsGroundTruth(subsets, np.stack(outputs, axis=1), float(alpha), int(seed), train_ids, qids)


def _lds_values(gt: LdsGroundTruth, score_matrix: np.ndarray) -> tuple[np.ndarray, int]:
    mask = gt.membership()
    predicted = score_matrix @ mask.T  # queries x M_sub
    vals, flagged = [], 0
    for q in range(score_matrix.shape[0]):
        rho, flag = spearman(gt.outputs[q], predicted[q], return_flag=True)
        flagged += flag
        vals.append(rho)
    return np.array(vals), flagged


def _score_matrix(gt: LdsGroundTruth, attributions) -> np.ndarray:
    if isinstance(attributions, np.ndarray):
        scores = np.atleast_2d(attributions)
    else:
        rows = []
        for res in attributions:
            if res.training_ids is not None and not np.array_equal(res.training_ids, gt.training_ids):
                raise DimensionMismatch("attribution scores are not aligned to the LDS training ids")
            rows.append(res.scores)
        scores = np.stack(rows)
    if scores.shape != (gt.outputs.shape[0], len(gt.training_ids)):
        raise DimensionMismatch(
            f"expected {gt.outputs.shape[0]} x {len(gt.training_ids)} scores, got {scores.shape}"
        )
    return scores


def lds(gt: LdsGroundTruth, attributions, name: str = "lds") -> EvalReport:
    """Per-query Spearman between retrained outputs and subset score sums.

    ``attributions`` is a list of :class:`AttributionResult` (one per query)
    or a ``queries x N_train`` score matrix.
    """
    vals, flagged = _lds_values(gt, _score_matrix(gt, attributions))
    if flagged:
        warnings.warn(f"{flagged} queries had constant vectors; LDS set to 0", DegenerateWarning)
    return EvalReport.from_values(name, vals)


def per_group_lds(gt: LdsGroundTruth, contribs) -> np.ndarray:
    """Mean LDS obtained from each group's contribution column alone."""
    contribs = list(contribs)
    if len(contribs) != gt.outputs.shape[0]:
        raise DimensionMismatch("one contribution matrix per LDS query required")
    m = contribs[0].shape[1]
    out = np.zeros(m)
    for j in range(m):
        scores = np.stack([c.contributions[:, j] for c in contribs])
        out[j] = _lds_values(gt, _score_matrix(gt, scores))[0].mean()
    return out


def per_group_lds_reports(gt: LdsGroundTruth, contribs) -> list[EvalReport]:
    contribs = list(contribs)
    reports = []
    for j, name in enumerate(contribs[0].group_names):
        scores = np.stack([c.contributions[:, j] for c in contribs])
        reports.append(EvalReport.from_values(f"lds[{name}]", _lds_values(gt, _score_matrix(gt, scores))[0]))
    return reports


# -- tail-patch ------------------------------------------------------------------

def tail_patch(
    ckpt: ModelCheckpoint,
    ds: LabeledDataset,
    queries,
    attributions,
    top_k: int,
    lr: float,
    query_data=None,
) -> EvalReport:
    """Change in the query's log-probability after one SGD step on its top-k proponents."""
    if top_k < 1:
        raise InvalidArgument("top_k must be >= 1")
    if query_data is None:
        qx, qy = ds.subset_arrays(queries)
    else:
        qx, qy = query_data
    deltas = []
    for i, res in enumerate(attributions):
        proponents = res.top_k(top_k)
        bx, by = ds.subset_arrays(proponents)
        patched = sgd_step(ckpt, bx, by, lr)
        # same row shape before and after so lr=0 is exactly zero
        before = log_probs(ckpt, qx[i : i + 1])[0, qy[i]]
        after = log_probs(patched, qx[i : i + 1])[0, qy[i]]
        deltas.append(after - before)
    return EvalReport.from_values("tail_patch", deltas)
