"""Signal-plus-noise model of per-group scores with a closed-form optimum.

Per-group contributions are ``a_j = alpha_j * I + eps_j`` with
``eps_j ~ N(0, sigma_j^2)`` independent across groups. The weighted score's
signal-to-noise ratio ``(sum_j w_j alpha_j)^2 / sum_j w_j^2 sigma_j^2``
(with ``Var(I) = 1``) peaks at ``w_j ∝ alpha_j / sigma_j^2``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .attribution import GroupContributionMatrix
from .errors import DegenerateInput, DimensionMismatch, InvalidArgument
from .prng import SplitMix64
from .weighting import WeightLearnConfig, WeightVector, learn_weights, weight_cosine

DEFAULT_SPARSITY = 0.02


@dataclass(frozen=True)
class SnrInstance:
    alphas: np.ndarray
    sigmas: np.ndarray
    influence: np.ndarray
    contributions: GroupContributionMatrix
    seed: int

    def save_csv(self, path) -> None:
        m = len(self.alphas)
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["n", "influence"] + [f"a_{j + 1}" for j in range(m)])
            for n, (inf, row) in enumerate(zip(self.influence, self.contributions.contributions)):
                out.writerow([n, repr(float(inf))] + [repr(float(v)) for v in row])


def _group_names(m: int) -> tuple[str, ...]:
    return tuple(f"g{j}" for j in range(m))


def _validate(alphas, sigmas):
    alphas = np.asarray(alphas, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.shape != sigmas.shape:
        raise DimensionMismatch("alphas and sigmas must be vectors of equal length")
    if np.any(alphas < 0):
        raise InvalidArgument("alphas must be >= 0")
    return alphas, sigmas


def generate_instance(alphas, sigmas, n_examples: int, sparsity: float = DEFAULT_SPARSITY, seed: int = 0) -> SnrInstance:
    """``round(sparsity * N)`` examples get ``I ~ N(0, 1)``; the rest have ``I = 0``."""
    alphas, sigmas = _validate(alphas, sigmas)
    if np.any(sigmas <= 0):
        raise InvalidArgument("sigmas must be > 0")
    if not 0 < sparsity <= 1 or n_examples < 1:
        raise InvalidArgument("need 0 < sparsity <= 1 and n_examples >= 1")
    rng = SplitMix64(seed, "snr-instance")
    active = int(round(sparsity * n_examples))
    influence = np.zeros(n_examples)
    chosen = rng.choice(n_examples, active)
    influence[chosen] = rng.normal(active)
    m = len(alphas)
    noise = rng.normal(n_examples * m).reshape(n_examples, m) * sigmas
    contribs = np.outer(influence, alphas) + noise
    c = GroupContributionMatrix(contribs, np.arange(n_examples), _group_names(m))
    return SnrInstance(alphas, sigmas, influence, c, int(seed))


def generate_queries(alphas, sigmas, n_examples: int, n_queries: int, sparsity: float = DEFAULT_SPARSITY, seed: int = 0):
    """Independent instances (fresh influence and noise) sharing ``(alpha, sigma)``."""
    return [
        generate_instance(alphas, sigmas, n_examples, sparsity, seed=int(SplitMix64(seed, "query", q).next_u64(1)[0]))
        for q in range(n_queries)
    ]


def snr(w, alphas, sigmas) -> float:
    alphas, sigmas = _validate(alphas, sigmas)
    w = np.asarray(getattr(w, "values", w), dtype=np.float64)
    if w.shape != alphas.shape:
        raise DimensionMismatch("weight length must match alphas")
    noise = float(np.sum(w ** 2 * sigmas ** 2))
    if noise == 0.0:
        raise DegenerateInput("all w_j * sigma_j are zero")
    return float((w @ alphas) ** 2 / noise)


def optimal_weights(alphas, sigmas) -> WeightVector:
    alphas, sigmas = _validate(alphas, sigmas)
    if np.any(sigmas <= 0):
        raise InvalidArgument("sigmas must be > 0")
    if not np.any(alphas > 0):
        raise InvalidArgument("at least one alpha must be positive")
    raw = alphas / sigmas ** 2
    return WeightVector(raw / raw.sum(), _group_names(len(alphas)))


def simplex_grid_argmax(alphas, sigmas, resolution: float = 1e-3) -> np.ndarray:
    """Brute-force SNR maximiser over a simplex lattice (M <= 3 practical)."""
    alphas, sigmas = _validate(alphas, sigmas)
    steps = int(round(1.0 / resolution))
    m = len(alphas)
    if m == 1:
        return np.ones(1)
    if m == 2:
        a = np.arange(steps + 1) / steps
        cand = np.stack([a, 1 - a], axis=1)
    elif m == 3:
        i, j = np.meshgrid(np.arange(steps + 1), np.arange(steps + 1), indexing="ij")
        keep = i + j <= steps
        i, j = i[keep], j[keep]
        cand = np.stack([i, j, steps - i - j], axis=1) / steps
    else:
        coarse = max(2, min(steps, 20))
        rows = [c for c in itertools.product(range(coarse + 1), repeat=m - 1) if sum(c) <= coarse]
        cand = np.array([list(c) + [coarse - sum(c)] for c in rows], dtype=float) / coarse
    noise = (cand ** 2 * sigmas ** 2).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(noise > 0, (cand @ alphas) ** 2 / noise, -np.inf)
    return cand[int(np.argmax(vals))]


@dataclass(frozen=True)
class RecoveryReport:
    learned: WeightVector
    optimal: WeightVector
    cosine_to_optimal: float
    snr_ratio: float


def verify_recovery(instance, cfg: WeightLearnConfig) -> RecoveryReport:
    """Learn weights on the instance's contributions and compare with ``w*``.

    ``instance`` is one :class:`SnrInstance` or a list of them (one per
    weight-learning query, sharing ``alpha`` and ``sigma``).
    """
    instances = instance if isinstance(instance, (list, tuple)) else [instance]
    first = instances[0]
    learned = learn_weights([inst.contributions for inst in instances], cfg)
    best = optimal_weights(first.alphas, first.sigmas)
    ratio = snr(learned, first.alphas, first.sigmas) / snr(best, first.alphas, first.sigmas)
    return RecoveryReport(learned, best, weight_cosine(learned, best), ratio)
