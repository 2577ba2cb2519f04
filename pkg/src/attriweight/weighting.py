"""Self-supervised learning of per-group attribution weights.

Weights live on the simplex through a softmax over raw logits. Each step
scores the training set with ``S = C w`` for one query's contribution
matrix ``C``, picks the current top-``k`` set (ties to the lower training
id), and moves the logits with AdamW to raise the mean top-``k`` score
relative to ``||S||_2``. The selected index set is held fixed inside a
step and re-selected before the next one.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .attribution import GroupContributionMatrix
from .dataset import LabeledDataset
from .errors import DegenerateInput, DimensionMismatch, InvalidArgument
from .prng import SplitMix64

NORM_EPS = 1e-12
K_GRID = (1, 5, 10, 20, 50, 100, 200, 500, 1000, 5000)
LAMBDA_GRID = (0.0, 0.02, 0.1, 0.2, 0.3, 0.4, 0.5, 0.8, 1.0, 1.5)


class LossVariant(str, Enum):
    TOP_K = "TopK"
    SUPERVISED_AUG = "SupervisedAug"
    BOTTOM_K = "BottomK"
    TOP_K_MINUS_BOTTOM_K = "TopKMinusBottomK"
    NO_NORM = "NoNorm"


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    group_names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) != len(self.group_names):
            raise DimensionMismatch("one weight per group name")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "group_names", tuple(self.group_names))

    @classmethod
    def uniform(cls, group_names) -> "WeightVector":
        m = len(group_names)
        return cls(np.full(m, 1.0 / m), tuple(group_names))

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class RawWeights:
    raw: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        if not np.all(np.isfinite(raw)):
            raise InvalidArgument("raw weights must be finite")
        object.__setattr__(self, "raw", raw)


@dataclass(frozen=True)
class WeightLearnConfig:
    k: int = 10
    lambda_reg: float = 0.0
    lr: float = 0.01
    epochs: int = 10
    loss_variant: LossVariant = LossVariant.TOP_K
    seed: int = 0
    init_std: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "loss_variant", LossVariant(self.loss_variant))
        if self.k < 1 or self.epochs < 1 or not self.lr > 0 or self.lambda_reg < 0:
            raise InvalidArgument("WeightLearnConfig needs k >= 1, epochs >= 1, lr > 0, lambda_reg >= 0")

    def describe(self) -> dict:
        d = asdict(self)
        d["loss_variant"] = self.loss_variant.value
        d["betas"] = list(self.betas)
        return d


def softmax(raw) -> np.ndarray:
    raw = np.asarray(getattr(raw, "raw", raw), dtype=np.float64)
    e = np.exp(raw - raw.max())
    return e / e.sum()


def _top_indices(s: np.ndarray, k: int) -> np.ndarray:
    # stable sort: equal scores keep ascending training id order
    return np.argsort(-s, kind="stable")[:k]


def _bottom_indices(s: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(s, kind="stable")[:k]


class LossEval(NamedTuple):
    value: float
    grad_w: np.ndarray
    degenerate: bool


def evaluate_loss(
    c: GroupContributionMatrix,
    w,
    k: int,
    variant: LossVariant | str = LossVariant.TOP_K,
) -> LossEval:
    """Loss value and gradient with respect to the simplex weights ``w``."""
    variant = LossVariant(variant)
    w = np.asarray(getattr(w, "values", w), dtype=np.float64)
    cm = c.contributions
    n, m = cm.shape
    if w.shape != (m,):
        raise DimensionMismatch(f"weight length {w.shape} != {m} groups")
    if variant is not LossVariant.SUPERVISED_AUG and not 1 <= k <= n:
        raise InvalidArgument(f"k={k} must lie in [1, N={n}]")
    s = cm @ w
    coef = np.zeros(n)
    if variant in (LossVariant.TOP_K, LossVariant.NO_NORM, LossVariant.TOP_K_MINUS_BOTTOM_K):
        coef[_top_indices(s, k)] += 1.0 / k
    if variant in (LossVariant.BOTTOM_K, LossVariant.TOP_K_MINUS_BOTTOM_K):
        coef[_bottom_indices(s, k)] -= 1.0 / k
    if variant is LossVariant.SUPERVISED_AUG:
        if c.positive_index is None:
            raise InvalidArgument("SupervisedAug needs a positive index attached to C")
        coef[int(c.positive_index)] = 1.0
    numer = float(coef @ s)
    if variant is LossVariant.NO_NORM:
        return LossEval(-numer, -(cm.T @ coef), False)
    norm = float(np.linalg.norm(s))
    if norm < NORM_EPS:
        return LossEval(0.0, np.zeros(m), True)
    grad_s = -coef / norm + numer * s / norm ** 3
    return LossEval(-numer / norm, cm.T @ grad_s, False)


def ssl_loss(c: GroupContributionMatrix, w, k: int) -> float:
    """Negative mean top-``k`` weighted score over the score vector's l2 norm.

    A score vector with norm below ``1e-12`` gives 0; use
    :func:`evaluate_loss` to see the degeneracy flag.
    """
    return evaluate_loss(c, w, k, LossVariant.TOP_K).value


def variant_loss(c: GroupContributionMatrix, w, cfg: WeightLearnConfig) -> float:
    return evaluate_loss(c, w, cfg.k, cfg.loss_variant).value


def _raw_gradient(w: np.ndarray, grad_w: np.ndarray) -> np.ndarray:
    # softmax Jacobian: diag(w) - w w^T
    return w * (grad_w - w @ grad_w)


def ssl_loss_gradient(c: GroupContributionMatrix, raw, k: int, variant=LossVariant.TOP_K) -> np.ndarray:
    """Gradient of the loss with respect to the pre-softmax logits."""
    w = softmax(raw)
    ev = evaluate_loss(c, w, k, variant)
    return _raw_gradient(w, ev.grad_w)


class AdamW:
    """Adam with decoupled weight decay (decay applied before the moment step)."""

    def __init__(self, size: int, lr: float, weight_decay: float, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.weight_decay, self.eps = lr, weight_decay, eps
        self.beta1, self.beta2 = betas
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        params = params * (1.0 - self.lr * self.weight_decay)
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _check_contribs(contribs: Sequence[GroupContributionMatrix]) -> tuple[str, ...]:
    if len(contribs) == 0:
        raise InvalidArgument("need at least one weight-learning query")
    names = contribs[0].group_names
    for c in contribs:
        if c.group_names != names:
            raise DimensionMismatch("all queries must share the same group layout")
    return names


def learn_weights(
    contribs: Sequence[GroupContributionMatrix],
    cfg: WeightLearnConfig,
    trace: list | None = None,
) -> WeightVector:
    """Run the per-query AdamW loop for ``cfg.epochs`` passes; return softmax(raw).

    Queries with a degenerate (near-zero) score vector are skipped. When
    ``trace`` is a list, the mean loss of every epoch is appended to it.
    """
    names = _check_contribs(contribs)
    m = len(names)
    if cfg.init_std > 0:
        raw = cfg.init_std * SplitMix64(cfg.seed, "weight-init").normal(m)
    else:
        raw = np.zeros(m)
    opt = AdamW(m, cfg.lr, cfg.lambda_reg, cfg.betas, cfg.eps)
    for _ in range(cfg.epochs):
        losses = []
        for c in contribs:
            w = softmax(raw)
            ev = evaluate_loss(c, w, cfg.k, cfg.loss_variant)
            if ev.degenerate:
                continue
            losses.append(ev.value)
            raw = opt.step(raw, _raw_gradient(w, ev.grad_w))
        if trace is not None:
            trace.append(float(np.mean(losses)) if losses else math.nan)
    return WeightVector(softmax(raw), names)


@dataclass
class SweepCell:
    k: int
    lambda_reg: float
    weights: WeightVector | None
    score: float | None
    error: str | None = None


@dataclass
class SweepResult:
    weights: WeightVector
    k: int
    lambda_reg: float
    cells: list[SweepCell]


def sweep(
    contribs: Sequence[GroupContributionMatrix],
    k_grid: Sequence[int],
    lambda_grid: Sequence[float],
    selector: Callable[[WeightVector], float],
    base_cfg: WeightLearnConfig | None = None,
    jobs: int = 1,
) -> SweepResult:
    """Grid search over ``(k, lambda_reg)``; the selector's highest score wins.

    Ties keep the earliest cell in grid order (k outer, lambda inner). Cells
    whose learner raises are recorded with the error message.
    """
    if not k_grid or not lambda_grid:
        raise InvalidArgument("sweep grids must be non-empty")
    base_cfg = base_cfg or WeightLearnConfig()
    grid = [(int(k), float(lam)) for k in k_grid for lam in lambda_grid]

    def run(cell):
        k, lam = cell
        try:
            w = learn_weights(contribs, replace(base_cfg, k=k, lambda_reg=lam))
            return SweepCell(k, lam, w, float(selector(w)))
        except (InvalidArgument, DimensionMismatch, DegenerateInput) as exc:
            return SweepCell(k, lam, None, None, str(exc))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(run, grid))
    else:
        cells = [run(cell) for cell in grid]
    ok = [c for c in cells if c.weights is not None]
    if not ok:
        raise InvalidArgument("every sweep cell failed: " + cells[0].error)
    best = max(ok, key=lambda c: c.score)  # max keeps the first maximal cell
    return SweepResult(best.weights, best.k, best.lambda_reg, cells)


def weight_cosine(w1, w2) -> float:
    a = np.asarray(getattr(w1, "values", w1), dtype=np.float64)
    b = np.asarray(getattr(w2, "values", w2), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch("weight vectors differ in length")
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def random_simplex_point(m: int, seed: int) -> np.ndarray:
    """Uniform draw from the probability simplex (normalized exponentials)."""
    u = SplitMix64(seed, "simplex").uniform(m)
    e = -np.log1p(-u)
    return e / e.sum()


@dataclass(frozen=True)
class AugmentedQuery:
    features: np.ndarray
    positive_id: int


def make_augmented_query(ds: LabeledDataset, example_id: int, noise_std: float, seed: int) -> AugmentedQuery:
    """Feature-space Gaussian jitter of a training example, which stays its positive."""
    if noise_std < 0:
        raise InvalidArgument("noise_std must be >= 0")
    row = ds.rows([example_id])[0]
    x = ds.features[row].copy()
    if noise_std > 0:
        x = x + noise_std * SplitMix64(seed, "augment", int(example_id)).normal(ds.dim)
    return AugmentedQuery(x, int(example_id))


def save_weights(w: WeightVector, path, header: dict | None = None) -> None:
    lines = []
    if header:
        items = ", ".join(f"{k}={header[k]}" for k in sorted(header))
        lines.append(f"# {items}")
    lines += [f"{name}\t{float(value)!r}" for name, value in zip(w.group_names, w.values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_weights(path) -> WeightVector:
    names, values = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, value = line.rsplit("\t", 1)
        names.append(name)
        values.append(float(value))
    return WeightVector(np.array(values), tuple(names))
