"""Synthetic datasets, label corruption, disjoint splits and CSV persistence."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, ParseError
from .prng import SplitMix64

FACTOR_NOISE_STD = 0.5


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    factor_labels: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        ids = np.asarray(self.ids, dtype=np.int64)
        if features.ndim != 2 or features.shape[1] < 1:
            raise InvalidArgument("features must be an N x d matrix with d >= 1")
        n = features.shape[0]
        if labels.shape != (n,) or ids.shape != (n,):
            raise InvalidArgument("labels and ids must have one entry per row")
        if n and labels.min() < 0:
            raise InvalidArgument("labels must be >= 0")
        if not np.array_equal(np.sort(ids), np.arange(n)):
            raise InvalidArgument("ids must be unique and contiguous from 0")
        num_classes = self.num_classes
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if n else 0
        if n and labels.max() >= num_classes:
            raise InvalidArgument("label outside [0, num_classes)")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "num_classes", int(num_classes))
        if self.factor_labels is not None:
            fl = np.asarray(self.factor_labels, dtype=np.int64)
            if fl.ndim != 2 or fl.shape[0] != n:
                raise InvalidArgument("factor_labels must be N x F")
            object.__setattr__(self, "factor_labels", fl)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def rows(self, ids) -> np.ndarray:
        """Row positions for example ids (ids are positions when sorted)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise KeyError(f"id not found in dataset of size {len(self)}")
        order = np.argsort(self.ids)
        return order[ids]

    def subset_arrays(self, ids) -> tuple[np.ndarray, np.ndarray]:
        rows = self.rows(ids)
        return self.features[rows], self.labels[rows]

    def with_labels(self, labels: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features, labels, self.ids, self.factor_labels, self.num_classes)

    def equals(self, other: "LabeledDataset") -> bool:
        same_factors = (self.factor_labels is None and other.factor_labels is None) or (
            self.factor_labels is not None
            and other.factor_labels is not None
            and np.array_equal(self.factor_labels, other.factor_labels)
        )
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.ids, other.ids)
            and same_factors
        )


@dataclass(frozen=True)
class DataSplit:
    train_ids: np.ndarray
    weight_learning_ids: np.ndarray
    eval_ids: np.ndarray

    def __post_init__(self):
        sets = [set(map(int, s)) for s in (self.train_ids, self.weight_learning_ids, self.eval_ids)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise InvalidArgument("split roles must be pairwise disjoint")


@dataclass(frozen=True)
class CorruptionRecord:
    corrupted_ids: np.ndarray
    original_labels: dict[int, int] = field(default_factory=dict)
    corruption_fraction: float = 0.0


def _unit_rows(rng: SplitMix64, rows: int, dim: int) -> np.ndarray:
    raw = rng.normal(rows * dim).reshape(rows, dim)
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def generate_gaussian_classes(
    num_classes: int, per_class: int, dim: int, separation: float, seed: int
) -> LabeledDataset:
    """Balanced isotropic Gaussian blobs around random directions.

    Class ``c`` occupies rows ``c * per_class`` to ``(c + 1) * per_class - 1``.
    """
    if num_classes < 2 or per_class < 1 or dim < 2 or not separation > 0:
        raise InvalidArgument(
            "need num_classes >= 2, per_class >= 1, dim >= 2, separation > 0"
        )
    rng = SplitMix64(seed, "gaussian-classes")
    means = separation * _unit_rows(rng, num_classes, dim)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + rng.normal(n * dim).reshape(n, dim)
    return LabeledDataset(features, labels, np.arange(n), num_classes=num_classes)


def generate_factor_dataset(
    factors_a: int,
    factors_b: int,
    per_cell: int,
    dim_a: int,
    dim_b: int,
    seed: int,
    separation: float = 1.0,
    noise_std: float = FACTOR_NOISE_STD,
) -> LabeledDataset:
    """Two latent factors written into disjoint blocks of coordinates.

    Coordinates ``[0, dim_a)`` carry factor a's mean, ``[dim_a, dim_a + dim_b)``
    carry factor b's; ``label = a * factors_b + b``.
    """
    if factors_a < 2 or factors_b < 2 or per_cell < 1 or dim_a < 1 or dim_b < 1:
        raise InvalidArgument("factor dataset needs >= 2 levels per factor and positive sizes")
    rng = SplitMix64(seed, "factor-dataset")
    means_a = separation * _unit_rows(rng, factors_a, dim_a)
    means_b = separation * _unit_rows(rng, factors_b, dim_b)
    a = np.repeat(np.arange(factors_a), factors_b * per_cell)
    b = np.tile(np.repeat(np.arange(factors_b), per_cell), factors_a)
    n = a.size
    noise = noise_std * rng.normal(n * (dim_a + dim_b)).reshape(n, dim_a + dim_b)
    features = np.concatenate([means_a[a], means_b[b]], axis=1) + noise
    labels = a * factors_b + b
    return LabeledDataset(
        features,
        labels,
        np.arange(n),
        factor_labels=np.stack([a, b], axis=1),
        num_classes=factors_a * factors_b,
    )


def factor_ground_truth(ds: LabeledDataset, query_factors, factor: int, candidate_ids=None) -> np.ndarray:
    """Ids sharing the query's level of ``factor`` (the contributor set)."""
    if ds.factor_labels is None:
        raise InvalidArgument("dataset has no factor labels")
    ids = ds.ids if candidate_ids is None else np.asarray(candidate_ids)
    rows = ds.rows(ids)
    mask = ds.factor_labels[rows, factor] == int(query_factors[factor])
    return np.sort(ids[mask])


def corrupt_labels(
    ds: LabeledDataset, fraction: float, seed: int, ids=None
) -> tuple[LabeledDataset, CorruptionRecord]:
    """Flip ``round(fraction * len(ids))`` labels to a uniformly drawn other class.

    ``ids`` restricts corruption to a subset (e.g. the training split);
    defaults to every example.
    """
    if not 0 < fraction < 1:
        raise InvalidArgument("fraction must lie in (0, 1)")
    if ds.num_classes < 2:
        raise InvalidArgument("label corruption needs at least 2 classes")
    pool = ds.ids if ids is None else np.sort(np.asarray(ids, dtype=np.int64))
    count = int(round(fraction * len(pool)))
    rng = SplitMix64(seed, "corrupt-labels")
    chosen = np.sort(pool[rng.choice(len(pool), count)])
    shifts = 1 + rng.integers(count, ds.num_classes - 1)
    labels = ds.labels.copy()
    rows = ds.rows(chosen)
    original = {int(i): int(labels[r]) for i, r in zip(chosen, rows)}
    labels[rows] = (labels[rows] + shifts) % ds.num_classes
    record = CorruptionRecord(chosen, original, float(fraction))
    return ds.with_labels(labels), record


def make_splits(ds: LabeledDataset, n_train: int, n_weight: int, n_eval: int, seed: int) -> DataSplit:
    if min(n_train, n_weight, n_eval) < 0 or n_train + n_weight + n_eval > len(ds):
        raise InvalidArgument(
            f"split sizes {n_train}+{n_weight}+{n_eval} exceed dataset size {len(ds)}"
        )
    perm = ds.ids[SplitMix64(seed, "splits").permutation(len(ds))]
    a, b = n_train, n_train + n_weight
    return DataSplit(
        np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b : b + n_eval])
    )


def save_csv(ds: LabeledDataset, path) -> None:
    d = ds.dim
    header = ["id", "label"] + [f"f{i}" for i in range(d)]
    nf = 0 if ds.factor_labels is None else ds.factor_labels.shape[1]
    header += [f"fa{i}" for i in range(nf)]
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in range(len(ds)):
        cells = [str(int(ds.ids[r])), str(int(ds.labels[r]))]
        cells += ["%.17g" % v for v in ds.features[r]]
        if nf:
            cells += [str(int(v)) for v in ds.factor_labels[r]]
        buf.write(",".join(cells) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def load_csv(path, num_classes: int | None = None) -> LabeledDataset:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header:
        raise ParseError("no header", line=1)
    if header[:2] != ["id", "label"]:
        raise ParseError("header must start with id,label", line=1)
    feat_cols = [c for c in header[2:] if c.startswith("f") and not c.startswith("fa")]
    factor_cols = [c for c in header[2:] if c.startswith("fa")]
    if header[2:] != feat_cols + factor_cols or not feat_cols:
        raise ParseError("header columns must be f0..f{d-1} then optional fa0..", line=1)
    width = len(header)
    ids, labels, feats, factors = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"row has {len(row)} fields, expected {width}", line=lineno)
        try:
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            feats.append([float(v) for v in row[2 : 2 + len(feat_cols)]])
            factors.append([int(v) for v in row[2 + len(feat_cols) :]])
        except ValueError as exc:
            raise ParseError(f"malformed value ({exc})", line=lineno) from None
    if not ids:
        features = np.zeros((0, len(feat_cols)))
    else:
        features = np.array(feats, dtype=np.float64)
    fl = np.array(factors, dtype=np.int64) if factor_cols and ids else None
    try:
        return LabeledDataset(features, np.array(labels, dtype=np.int64), np.array(ids, dtype=np.int64), fl, num_classes)
    except InvalidArgument as exc:
        raise ParseError(str(exc)) from None
