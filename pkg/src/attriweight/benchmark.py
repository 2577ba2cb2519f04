"""End-to-end experiment pipeline driven by a :class:`RunConfig`.

The heterogeneous benchmark is a tanh MLP on Gaussian blobs whose parameter
groups differ in quality: two hidden-weight column blocks, the hidden bias,
the output layer and a frozen distractor head whose gradients are pure noise.
The fine-grained benchmark trains the same architecture on the two-factor
dataset with one hidden-weight block per factor.

:class:`Benchmark` memoises every stage so the CLI, scripts and tests share
one code path and one set of numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .attribution import (
    GroupContributionMatrix,
    Kernel,
    build_trak_kernel,
    group_contributions_batch,
    inject_score_noise,
    pooled_column_std,
    precompute_training_side,
    self_influence,
    unweighted_score,
    weighted_score,
)
from .config import RunConfig, parse_list
from .dataset import (
    DataSplit,
    LabeledDataset,
    corrupt_labels,
    factor_ground_truth,
    generate_factor_dataset,
    generate_gaussian_classes,
    make_splits,
)
from .evaluation import (
    EvalReport,
    LdsGroundTruth,
    build_lds_ground_truth,
    lds,
    mislabel_auc,
    paired_bootstrap,
    per_group_lds,
    recall_at_k,
    tail_patch,
)
from .features import GradientFeatureStore, ProjectionSpec, build_projection, extract_features
from .model import (
    ModelCheckpoint,
    ModelSpec,
    TrainConfig,
    make_spec,
    spec_with_blocks,
    train,
)
from .prng import SplitMix64
from .weighting import (
    LossVariant,
    WeightLearnConfig,
    WeightVector,
    learn_weights,
    make_augmented_query,
    random_simplex_point,
    sweep,
    weight_cosine,
)

METHODS = ("tracin", "trak")


# -- stage functions -------------------------------------------------------------

def make_dataset(cfg: RunConfig) -> tuple[LabeledDataset, DataSplit]:
    d = cfg.dataset
    ds = generate_gaussian_classes(d.num_classes, d.per_class, d.dim, d.separation, cfg.seeded(d.seed))
    split = make_splits(ds, d.n_train, d.n_weight, d.n_eval, cfg.seeded(d.split_seed))
    return ds, split


def model_spec(cfg: RunConfig, input_dim: int, num_classes: int) -> ModelSpec:
    m = cfg.model
    if m.architecture == "LogisticRegression":
        return make_spec(m.architecture, input_dim, num_classes)
    return make_spec(
        m.architecture, input_dim, num_classes,
        hidden=m.hidden,
        hidden_col_blocks=m.col_blocks,
        distractor_dim=m.distractor_dim,
        distractor_scale=m.distractor_scale,
        distractor_seed=cfg.seeded(m.distractor_seed),
        fused_output=m.fused_output,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    m = cfg.model
    return TrainConfig(m.epochs, m.lr, m.batch_size, m.weight_decay, cfg.seeded(m.train_seed))


def make_projection(cfg: RunConfig, ckpt: ModelCheckpoint) -> ProjectionSpec:
    p = cfg.projection
    return build_projection(ckpt.grouping, p.dim, cfg.seeded(p.seed), p.kind, clip=p.clip)


def make_kernel(cfg: RunConfig, method: str, train_store: GradientFeatureStore) -> Kernel:
    if method == "tracin":
        return Kernel.identity()
    if method == "trak":
        return build_trak_kernel(train_store, cfg.attribution.trak_lambda)
    raise ValueError(f"unknown attribution method {method!r}")


def contributions(train_store, query_store, kernel: Kernel) -> list[GroupContributionMatrix]:
    side = precompute_training_side(train_store, kernel)
    return group_contributions_batch(query_store.matrix(), side, train_store.group_layout, train_store.example_ids)


def weight_config(cfg: RunConfig, method: str, **overrides) -> WeightLearnConfig:
    w = cfg.weighting
    lam = w.lambda_reg_trak if method == "trak" else w.lambda_reg_tracin
    base = WeightLearnConfig(
        k=w.k, lambda_reg=lam, lr=w.lr, epochs=w.epochs,
        loss_variant=LossVariant(w.loss), seed=cfg.seeded(w.seed), init_std=w.init_std,
    )
    return replace(base, **overrides)


def split_ground_truth(gt: LdsGroundTruth, n_first: int) -> tuple[LdsGroundTruth, LdsGroundTruth]:
    """Split a ground truth built on stacked query sets into its two parts."""
    q = gt.query_ids
    first = replace(gt, outputs=gt.outputs[:n_first], query_ids=None if q is None else q[:n_first])
    second = replace(gt, outputs=gt.outputs[n_first:], query_ids=None if q is None else q[n_first:])
    return first, second


def stack_ids(*id_sets) -> np.ndarray:
    return np.concatenate([np.asarray(s, dtype=np.int64) for s in id_sets])


@dataclass(frozen=True)
class MethodComparison:
    method: str
    weights: WeightVector
    unweighted: EvalReport
    weighted: EvalReport
    bootstrap_ci: tuple[float, float]

    @property
    def improvement(self) -> float:
        return self.weighted.mean - self.unweighted.mean


class Benchmark:
    """Lazily built heterogeneous-benchmark state for one configuration."""

    def __init__(self, cfg: RunConfig | None = None, jobs: int = 1, ground_truth: LdsGroundTruth | None = None):
        self.cfg = cfg or RunConfig()
        self.jobs = jobs
        self._gt = ground_truth
        self._contribs: dict[tuple[str, str], list[GroupContributionMatrix]] = {}
        self._kernels: dict[str, Kernel] = {}

    @classmethod
    def from_artifacts(cls, cfg: RunConfig, jobs: int = 1, **stages) -> "Benchmark":
        """Seed stages with loaded values (``data``, ``checkpoint``, ``stores``, ``projection``)."""
        bench = cls(cfg, jobs, stages.pop("ground_truth", None))
        for name, value in stages.items():
            if name not in ("data", "checkpoint", "stores", "projection"):
                raise ValueError(f"unknown stage {name!r}")
            bench.__dict__[name] = value
        return bench

    @cached_property
    def data(self) -> tuple[LabeledDataset, DataSplit]:
        return make_dataset(self.cfg)

    @property
    def ds(self) -> LabeledDataset:
        return self.data[0]

    @property
    def split(self) -> DataSplit:
        return self.data[1]

    @cached_property
    def spec(self) -> ModelSpec:
        return model_spec(self.cfg, self.ds.dim, self.ds.num_classes)

    @cached_property
    def train_cfg(self) -> TrainConfig:
        return train_config(self.cfg)

    @cached_property
    def checkpoint(self) -> ModelCheckpoint:
        return train(self.ds, self.split.train_ids, self.spec, self.train_cfg)

    @cached_property
    def projection(self) -> ProjectionSpec:
        return make_projection(self.cfg, self.checkpoint)

    @cached_property
    def stores(self) -> dict[str, GradientFeatureStore]:
        ck, ds, s = self.checkpoint, self.ds, self.split
        return {
            "train": extract_features(ck, ds, s.train_ids, self.projection),
            "weight": extract_features(ck, ds, s.weight_learning_ids, self.projection),
            "eval": extract_features(ck, ds, s.eval_ids, self.projection),
        }

    @property
    def ground_truth(self) -> LdsGroundTruth:
        """Retrained outputs at the eval queries followed by the weight-learning queries."""
        if self._gt is None:
            e = self.cfg.eval
            self._gt = build_lds_ground_truth(
                self.ds, self.split.train_ids, self.spec, self.train_cfg,
                alpha=e.lds_alpha, m_subsets=e.lds_subsets,
                queries=stack_ids(self.split.eval_ids, self.split.weight_learning_ids),
                seed=self.cfg.seeded(e.lds_seed), jobs=self.jobs,
            )
        return self._gt

    @property
    def eval_ground_truth(self) -> LdsGroundTruth:
        return split_ground_truth(self.ground_truth, len(self.split.eval_ids))[0]

    @property
    def weight_ground_truth(self) -> LdsGroundTruth:
        return split_ground_truth(self.ground_truth, len(self.split.eval_ids))[1]

    def kernel(self, method: str) -> Kernel:
        if method not in self._kernels:
            self._kernels[method] = make_kernel(self.cfg, method, self.stores["train"])
        return self._kernels[method]

    def contribs(self, method: str, role: str) -> list[GroupContributionMatrix]:
        key = (method, role)
        if key not in self._contribs:
            self._contribs[key] = contributions(self.stores["train"], self.stores[role], self.kernel(method))
        return self._contribs[key]

    def weight_config(self, method: str, **overrides) -> WeightLearnConfig:
        return weight_config(self.cfg, method, **overrides)

    def learn(self, method: str, contribs=None, **overrides) -> WeightVector:
        wcfg = self.weight_config(method, **overrides)
        if wcfg.loss_variant is LossVariant.SUPERVISED_AUG:
            contribs = self.augmented_contribs(method)
        elif contribs is None:
            contribs = self.contribs(method, "weight")
        return learn_weights(contribs, wcfg)

    def augmented_contribs(self, method: str) -> list[GroupContributionMatrix]:
        """Jittered copies of weight-learning-sized samples of the training set.

        Each query's own source example is the single pseudo-positive.
        """
        key = (method, "augmented")
        if key not in self._contribs:
            train_ids = self.split.train_ids
            n = len(self.split.weight_learning_ids)
            rng = SplitMix64(self.cfg.seeded(self.cfg.weighting.seed), "augment-pick")
            picked = np.sort(train_ids[rng.choice(len(train_ids), min(n, len(train_ids)))])
            noise = self.cfg.weighting.augment_noise
            queries = [make_augmented_query(self.ds, int(i), noise, self.cfg.seeded(self.cfg.weighting.seed)) for i in picked]
            x = np.stack([q.features for q in queries])
            y = self.ds.subset_arrays(picked)[1]
            store = extract_features(self.checkpoint, self.ds, picked, self.projection, labels=y, features=x)
            pos = {int(t): i for i, t in enumerate(self.stores["train"].example_ids)}
            out = []
            for c, q in zip(contributions(self.stores["train"], store, self.kernel(method)), queries):
                out.append(replace(c, positive_index=pos[q.positive_id]))
            self._contribs[key] = out
        return self._contribs[key]

    def scores(self, method: str, weights: WeightVector | None = None, role: str = "eval"):
        cs = self.contribs(method, role)
        if weights is None:
            return [unweighted_score(c) for c in cs]
        return [weighted_score(c, weights) for c in cs]

    def lds(self, method: str, weights: WeightVector | None = None) -> EvalReport:
        name = f"lds[{method}{'' if weights is None else ',weighted'}]"
        return lds(self.eval_ground_truth, self.scores(method, weights), name=name)

    def compare(self, method: str, weights: WeightVector | None = None) -> MethodComparison:
        """Weighted vs unweighted LDS with a paired per-query bootstrap CI."""
        w = weights if weights is not None else self.learn(method)
        base, weighted = self.lds(method), self.lds(method, w)
        e = self.cfg.eval
        ci = paired_bootstrap(
            weighted.per_query - base.per_query, e.bootstrap_resamples, self.cfg.seeded(e.bootstrap_seed)
        )
        return MethodComparison(method, w, base, weighted, ci)

    def per_group_lds(self, method: str) -> np.ndarray:
        return per_group_lds(self.eval_ground_truth, self.contribs(method, "eval"))

    def selector(self, method: str):
        """LDS on the weight-learning queries, used to pick sweep cells."""
        gt = self.weight_ground_truth
        cs = self.contribs(method, "weight")
        return lambda w: lds(gt, [weighted_score(c, w) for c in cs]).mean

    def sweep(self, method: str, k_grid=None, lambda_grid=None):
        w = self.cfg.weighting
        k_grid = parse_list(w.sweep_k, int) if k_grid is None else k_grid
        lambda_grid = parse_list(w.sweep_lambda, float) if lambda_grid is None else lambda_grid
        return sweep(
            self.contribs(method, "weight"), k_grid, lambda_grid, self.selector(method),
            self.weight_config(method), jobs=self.jobs,
        )

    def noise_sweep(self, method: str, scales=None) -> list[tuple[float, WeightVector, EvalReport]]:
        """Learn on noisy weight-learning contributions, evaluate on clean eval queries."""
        scales = parse_list(self.cfg.weighting.noise_scales) if scales is None else scales
        clean = self.contribs(method, "weight")
        sigmas = pooled_column_std(clean)
        seed = self.cfg.seeded(self.cfg.weighting.noise_seed)
        out = []
        for s in scales:
            noisy = [inject_score_noise(c, s, seed + 7919 * q, sigmas) for q, c in enumerate(clean)]
            w = self.learn(method, contribs=noisy)
            out.append((float(s), w, self.lds(method, w)))
        return out

    def consistency(self) -> "Consistency":
        """Weights from TracIn and TRAK contributions under one shared learner setting.

        Also measures agreement with per-group LDS and the mean cosine of each
        weight vector to uniformly random simplex points.
        """
        lam = self.cfg.weighting.consistency_lambda_reg
        w_tracin = self.learn("tracin", lambda_reg=lam)
        w_trak = self.learn("trak", lambda_reg=lam)
        e = self.cfg.eval
        draws = [random_simplex_point(len(w_tracin), self.cfg.seeded(e.random_seed) + i) for i in range(e.random_draws)]
        return Consistency(
            w_tracin,
            w_trak,
            weight_cosine(w_tracin, w_trak),
            float(np.mean([weight_cosine(w_tracin, r) for r in draws])),
            float(np.mean([weight_cosine(w_trak, r) for r in draws])),
            {m: weight_cosine(self.per_group_lds(m), w) for m, w in (("tracin", w_tracin), ("trak", w_trak))},
        )

    def tail_patch(self, method: str, weights: WeightVector | None):
        e = self.cfg.eval
        lr = self.train_cfg.lr if e.tailpatch_lr is None else e.tailpatch_lr
        return tail_patch(
            self.checkpoint, self.ds, self.split.eval_ids, self.scores(method, weights), e.tailpatch_top_k, lr
        )

    def random_tail_patch(self):
        from .attribution import AttributionResult

        e = self.cfg.eval
        lr = self.train_cfg.lr if e.tailpatch_lr is None else e.tailpatch_lr
        ids = self.stores["train"].example_ids
        seed = self.cfg.seeded(e.random_seed)
        randoms = [
            AttributionResult(int(q), SplitMix64(seed, "random-scores", int(q)).uniform(len(ids)), "random", ids)
            for q in self.split.eval_ids
        ]
        return tail_patch(self.checkpoint, self.ds, self.split.eval_ids, randoms, e.tailpatch_top_k, lr)


@dataclass(frozen=True)
class Consistency:
    tracin_weights: WeightVector
    trak_weights: WeightVector
    cross_cosine: float
    tracin_random_cosine: float
    trak_random_cosine: float
    per_group_lds_cosine: dict


# -- mislabel detection -------------------------------------------------------------

@dataclass(frozen=True)
class MislabelRun:
    seed: int
    auc_unweighted: float
    auc_weighted: float
    weights: WeightVector

    @property
    def margin(self) -> float:
        return self.auc_weighted - self.auc_unweighted


def mislabel_run(cfg: RunConfig, method: str, corruption_seed: int) -> MislabelRun:
    """Corrupt the training labels, retrain, learn weights, rank by self-influence."""
    ds, split = make_dataset(cfg)
    corrupted, record = corrupt_labels(ds, cfg.dataset.corruption, corruption_seed, ids=split.train_ids)
    spec = model_spec(cfg, ds.dim, ds.num_classes)
    ckpt = train(corrupted, split.train_ids, spec, train_config(cfg))
    proj = make_projection(cfg, ckpt)
    tr = extract_features(ckpt, corrupted, split.train_ids, proj)
    wq = extract_features(ckpt, corrupted, split.weight_learning_ids, proj)
    kernel = make_kernel(cfg, method, tr)
    w = learn_weights(contributions(tr, wq, kernel), weight_config(cfg, method))
    t = cfg.attribution.self_influence_top_t
    base = self_influence(tr, kernel, None, t)
    weighted = self_influence(tr, kernel, w, t)
    return MislabelRun(
        int(corruption_seed),
        mislabel_auc(base, record, tr.example_ids),
        mislabel_auc(weighted, record, tr.example_ids),
        w,
    )


def mislabel_experiment(cfg: RunConfig, method: str = "tracin") -> list[MislabelRun]:
    return [
        mislabel_run(cfg, method, cfg.seeded(s)) for s in parse_list(cfg.dataset.corruption_seeds, int)
    ]


# -- fine-grained recall -------------------------------------------------------------

@dataclass(frozen=True)
class RecallResult:
    method: str
    weights: WeightVector
    reports: dict  # (split, "unweighted" | "weighted") -> EvalReport

    def mean(self, split: str, kind: str) -> float:
        return self.reports[(split, kind)].mean


@dataclass(frozen=True)
class FactorSetup:
    ds: LabeledDataset
    train_ids: np.ndarray
    weight_ids: np.ndarray
    eval_train_ids: np.ndarray
    eval_heldout_ids: np.ndarray
    train_categories: np.ndarray
    checkpoint: ModelCheckpoint
    projection: ProjectionSpec


def factor_setup(cfg: RunConfig) -> FactorSetup:
    """Two-factor data, category split on factor a, and a trained model.

    Each (a, b) cell holds ``factor_per_cell_train`` training rows followed by
    ``factor_per_cell_query`` query rows. The first half of the factor-a
    levels are the train-split categories; their query rows alternate between
    weight learning and evaluation. Queries on the other levels are held out.
    """
    d, m = cfg.dataset, cfg.model
    per = d.factor_per_cell_train + d.factor_per_cell_query
    ds = generate_factor_dataset(
        d.factors_a, d.factors_b, per, d.factor_dim, d.factor_dim,
        seed=cfg.seeded(d.factor_seed), separation=d.factor_separation, noise_std=d.factor_noise,
    )
    slot = np.arange(len(ds)) % per
    train_ids = ds.ids[slot < d.factor_per_cell_train]
    query_ids = ds.ids[slot >= d.factor_per_cell_train]
    train_cats = np.arange(d.factors_a // 2)
    in_train = np.isin(ds.factor_labels[ds.rows(query_ids), 0], train_cats)
    dim = d.factor_dim
    spec = spec_with_blocks(
        make_spec("Mlp1", 2 * dim, ds.num_classes, hidden=m.factor_hidden, fused_output=m.fused_output),
        [(0, dim), (dim, 2 * dim)],
    )
    tcfg = TrainConfig(m.factor_epochs, m.lr, m.factor_batch_size, m.weight_decay, cfg.seeded(m.train_seed))
    ckpt = train(ds, train_ids, spec, tcfg)
    return FactorSetup(
        ds, train_ids,
        query_ids[in_train][::2], query_ids[in_train][1::2], query_ids[~in_train],
        train_cats, ckpt, make_projection(cfg, ckpt),
    )


def factor_a_queries(setup: FactorSetup) -> tuple[np.ndarray, np.ndarray]:
    """Queries that specify factor a only.

    Factor-b coordinates are replaced by their training centroid and the
    target is uniform over the classes sharing the query's factor-a level.
    """
    ds = setup.ds
    dim_a = setup.checkpoint.spec.hidden_blocks[0][1]
    fb = ds.num_classes // (int(ds.factor_labels[:, 0].max()) + 1)
    x, _ = ds.subset_arrays(setup.weight_ids)
    x = x.copy()
    x[:, dim_a:] = ds.subset_arrays(setup.train_ids)[0][:, dim_a:].mean(axis=0)
    a = ds.factor_labels[ds.rows(setup.weight_ids), 0]
    targets = np.zeros((len(a), ds.num_classes))
    for i, level in enumerate(a):
        targets[i, level * fb : (level + 1) * fb] = 1.0 / fb
    return x, targets


def recall_experiment(cfg: RunConfig, method: str = "tracin", setup: FactorSetup | None = None) -> RecallResult:
    setup = setup or factor_setup(cfg)
    ds, ck, proj = setup.ds, setup.checkpoint, setup.projection
    tr = extract_features(ck, ds, setup.train_ids, proj)
    x, targets = factor_a_queries(setup)
    wq = extract_features(ck, ds, setup.weight_ids, proj, labels=targets, features=x)
    kernel = make_kernel(cfg, method, tr)
    w = learn_weights(contributions(tr, wq, kernel), weight_config(cfg, method))
    k = cfg.eval.recall_k
    reports = {}
    for split, ids in (("train", setup.eval_train_ids), ("heldout", setup.eval_heldout_ids)):
        cs = contributions(tr, extract_features(ck, ds, ids, proj), kernel)
        truth = [factor_ground_truth(ds, ds.factor_labels[ds.rows([q])[0]], 0, setup.train_ids) for q in ids]
        for kind, fn in (("unweighted", unweighted_score), ("weighted", lambda c: weighted_score(c, w))):
            vals = [recall_at_k(fn(c), t, k) for c, t in zip(cs, truth)]
            reports[(split, kind)] = EvalReport.from_values(f"recall@{k}[{split},{kind}]", vals)
    return RecallResult(method, w, reports)


__all__ = [
    "Benchmark", "Consistency", "MethodComparison", "MislabelRun", "RecallResult", "FactorSetup", "METHODS",
    "make_dataset", "model_spec", "train_config", "make_projection", "make_kernel", "contributions",
    "weight_config", "split_ground_truth", "stack_ids", "mislabel_run", "mislabel_experiment",
    "factor_setup", "factor_a_queries", "recall_experiment",
]
