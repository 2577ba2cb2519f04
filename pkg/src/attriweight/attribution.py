"""TracIn / TRAK scores, query-side group weighting and self-influence."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import DimensionMismatch, InvalidArgument, NumericalFailure
from .features import GradientFeatureStore
from .prng import SplitMix64

TRAK_LAMBDA_SWEEP = (5e-3, 5e-2, 5e-1, 5.0, 50.0)


class KernelKind(str, Enum):
    IDENTITY = "Identity"
    TRAK_INVERSE = "TrakInverse"


@dataclass(frozen=True)
class Kernel:
    kind: KernelKind
    matrix: np.ndarray | None = None
    lam: float | None = None

    @classmethod
    def identity(cls) -> "Kernel":
        return cls(KernelKind.IDENTITY)


@dataclass(frozen=True)
class AttributionResult:
    query_id: object
    scores: np.ndarray
    method_tag: str
    training_ids: np.ndarray | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(scores)):
            raise NumericalFailure("attribution scores must be finite")
        object.__setattr__(self, "scores", scores)
        if self.training_ids is None:
            object.__setattr__(self, "training_ids", np.arange(len(scores)))

    def ranking(self) -> np.ndarray:
        """Positions sorted by descending score, ties by ascending training id."""
        return np.lexsort((self.training_ids, -self.scores))

    def top_k(self, k: int) -> np.ndarray:
        return self.training_ids[self.ranking()[:k]]

    def to_csv(self, path) -> None:
        order = np.argsort(self.training_ids, kind="stable")
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["train_id", "score"])
            for i in order:
                out.writerow([int(self.training_ids[i]), repr(float(self.scores[i]))])

    def ranking_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["rank", "train_id", "score"])
            for rank, i in enumerate(self.ranking(), start=1):
                out.writerow([rank, int(self.training_ids[i]), repr(float(self.scores[i]))])


@dataclass(frozen=True)
class GroupContributionMatrix:
    contributions: np.ndarray
    training_ids: np.ndarray
    group_names: tuple[str, ...]
    positive_index: int | None = None

    def __post_init__(self):
        c = np.asarray(self.contributions, dtype=np.float64)
        if c.ndim != 2 or c.shape != (len(self.training_ids), len(self.group_names)):
            raise DimensionMismatch("contributions must be N x M, aligned to ids and group names")
        object.__setattr__(self, "contributions", c)
        object.__setattr__(self, "group_names", tuple(self.group_names))

    @property
    def shape(self) -> tuple[int, int]:
        return self.contributions.shape

    def scaled(self, factor: float) -> "GroupContributionMatrix":
        return GroupContributionMatrix(
            factor * self.contributions, self.training_ids, self.group_names, self.positive_index
        )


def _check_layout(query_feat: np.ndarray, layout, width: int):
    if query_feat.shape[-1] != width or sum(d for _, d in layout) != width:
        raise DimensionMismatch(f"query feature width {query_feat.shape[-1]} != store width {width}")


def tracin_score(query_feat, train_store: GradientFeatureStore, query_id=None) -> AttributionResult:
    q = np.asarray(query_feat, dtype=np.float64)
    _check_layout(q, train_store.group_layout, train_store.dim)
    scores = train_store.matrix() @ q
    return AttributionResult(query_id, scores, "tracin", train_store.example_ids)


def build_trak_kernel(train_store: GradientFeatureStore, lam: float) -> Kernel:
    """``(Phi^T Phi + lam I)^-1`` through a Cholesky factorisation."""
    if not lam > 0:
        raise InvalidArgument("lambda must be > 0")
    phi = train_store.matrix()
    gram = phi.T @ phi + lam * np.eye(phi.shape[1])
    try:
        factor = cho_factor(gram, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"Cholesky failed for lambda={lam}: {exc}") from None
    inv = cho_solve(factor, np.eye(phi.shape[1]))
    inv = 0.5 * (inv + inv.T)
    inv.setflags(write=False)
    return Kernel(KernelKind.TRAK_INVERSE, inv, float(lam))


def precompute_training_side(train_store: GradientFeatureStore, kernel: Kernel) -> np.ndarray:
    """Rows ``K g(x^n)``; identity kernel returns the features themselves."""
    phi = train_store.matrix()
    if kernel.kind is KernelKind.IDENTITY:
        return phi
    if kernel.matrix.shape != (phi.shape[1], phi.shape[1]):
        raise DimensionMismatch("kernel dimension does not match store width")
    return phi @ kernel.matrix


def group_contributions(
    query_feat, training_side: np.ndarray, layout, training_ids=None
) -> GroupContributionMatrix:
    """``C[n, j] = sum over block j of query[d] * training_side[n, d]``."""
    q = np.asarray(query_feat, dtype=np.float64)
    _check_layout(q, layout, training_side.shape[1])
    starts = np.cumsum([0] + [d for _, d in layout])[:-1]
    c = np.add.reduceat(training_side * q, starts, axis=1)
    ids = np.arange(training_side.shape[0]) if training_ids is None else training_ids
    return GroupContributionMatrix(c, np.asarray(ids), tuple(n for n, _ in layout))


def group_contributions_batch(
    query_feats: np.ndarray, training_side: np.ndarray, layout, training_ids=None
) -> list[GroupContributionMatrix]:
    """:func:`group_contributions` for many queries at once (block matmuls)."""
    q = np.atleast_2d(np.asarray(query_feats, dtype=np.float64))
    _check_layout(q, layout, training_side.shape[1])
    names = tuple(n for n, _ in layout)
    ids = np.arange(training_side.shape[0]) if training_ids is None else np.asarray(training_ids)
    blocks, start = [], 0
    for _, d in layout:
        blocks.append(training_side[:, start : start + d] @ q[:, start : start + d].T)
        start += d
    stacked = np.stack(blocks, axis=-1)  # N x Q x M
    return [GroupContributionMatrix(stacked[:, i, :], ids, names) for i in range(q.shape[0])]


def weighted_score(c: GroupContributionMatrix, w, query_id=None, method_tag="weighted") -> AttributionResult:
    values = getattr(w, "values", w)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (c.shape[1],):
        raise DimensionMismatch(f"weight length {values.shape} != {c.shape[1]} groups")
    return AttributionResult(query_id, c.contributions @ values, method_tag, c.training_ids)


def unweighted_score(c: GroupContributionMatrix, query_id=None, method_tag="unweighted") -> AttributionResult:
    return AttributionResult(query_id, c.contributions.sum(axis=1), method_tag, c.training_ids)


def self_influence(
    train_store: GradientFeatureStore,
    kernel: Kernel,
    w=None,
    normalize_top_t: int = 10,
    chunk: int = 512,
    return_raw: bool = False,
):
    """Normalized self-influence of every training example.

    ``raw[i] = g_i^T Diag(w) K g_i`` and each entry is divided by the sum of
    the top-``t`` entries of its own score row ``g_i^T Diag(w) K g_n``.
    A top-``t`` sum below ``1e-12`` in magnitude yields 0.
    """
    if normalize_top_t < 1:
        raise InvalidArgument("normalize_top_t must be >= 1")
    phi = train_store.matrix()
    side = precompute_training_side(train_store, kernel)
    n, width = phi.shape
    if w is None:
        wrep = np.ones(width)
    else:
        values = np.asarray(getattr(w, "values", w), dtype=np.float64)
        if values.shape != (train_store.num_groups,):
            raise DimensionMismatch("weight length does not match store groups")
        wrep = np.repeat(values, [d for _, d in train_store.group_layout])
    t = min(normalize_top_t, n)
    raw = np.einsum("nd,nd->n", phi * wrep, side)
    normalized = np.zeros(n)
    for start in range(0, n, chunk):
        rows = (phi[start : start + chunk] * wrep) @ side.T
        top = -np.sort(-rows, axis=1)[:, :t].sum(axis=1)
        block = raw[start : start + chunk]
        safe = np.abs(top) >= 1e-12
        out = np.zeros_like(block)
        out[safe] = block[safe] / top[safe]
        normalized[start : start + chunk] = out
    if return_raw:
        return normalized, raw
    return normalized


def inject_score_noise(
    c: GroupContributionMatrix, scale_multiplier: float, seed: int, sigmas=None
) -> GroupContributionMatrix:
    """Add ``N(0, (s * sigma_j)^2)`` noise to every contribution in column ``j``.

    ``sigmas`` defaults to the per-column standard deviation of ``c``; pass
    pooled values to share one noise scale across queries.
    """
    if scale_multiplier < 0:
        raise InvalidArgument("scale_multiplier must be >= 0")
    if scale_multiplier == 0:
        return c
    sig = c.contributions.std(axis=0) if sigmas is None else np.asarray(sigmas, dtype=np.float64)
    n, m = c.shape
    noise = SplitMix64(seed, "score-noise").normal(n * m).reshape(n, m)
    noisy = c.contributions + noise * (scale_multiplier * sig)
    return GroupContributionMatrix(noisy, c.training_ids, c.group_names, c.positive_index)


def pooled_column_std(contribs) -> np.ndarray:
    """Per-group std over every query-training pair of a list of matrices."""
    return np.concatenate([c.contributions for c in contribs]).std(axis=0)


def save_scores_long(path, query_ids, results) -> None:
    """Many queries as ``query_id,train_id,score`` rows."""
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["query_id", "train_id", "score"])
        for qid, res in zip(query_ids, results):
            for tid, s in zip(res.training_ids, res.scores):
                out.writerow([qid, int(tid), repr(float(s))])
