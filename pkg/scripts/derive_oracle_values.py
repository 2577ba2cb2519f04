"""Independent derivations of the constants frozen into the unit tests.

Nothing here imports ``attriweight``: every value comes from exact
rational arithmetic, brute force, or scipy. Run it to regenerate the
numbers quoted in ``tests/``:

    python3 scripts/derive_oracle_values.py
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np
from scipy import optimize, stats


def top_k_loss(s, k):
    top = sorted(s, reverse=True)[:k]
    return -(Fraction(sum(top), k)) / math.sqrt(sum(v * v for v in s))


def main() -> None:
    s = (3, 1, 2)
    print("ssl loss S=(3,1,2) k=2:", float(top_k_loss(s, 2)))
    norm = math.sqrt(14)
    print("bottom-k S=(3,1,2) k=1:", 1 / norm)
    print("gap S=(3,1,2) k=1:", -(3 - 1) / norm)
    print("no-norm S=(3,1,2) k=2:", -Fraction(3 + 2, 2))

    # hand dot products and contribution matrix
    g = np.array([[1, 0], [0, 1], [1, 1]])
    q = np.array([2, 1])
    print("tracin scores:", [int(v) for v in g @ q])
    contrib = g * q
    print("contributions:", contrib.tolist())
    w = np.array([Fraction(3, 4), Fraction(1, 4)])
    print("weighted scores:", [float(sum(c * wi for c, wi in zip(row, w))) for row in contrib.tolist()])

    u = np.array([0.8, 0.2])
    print("cosine uniform vs (0.8,0.2):", u.sum() / (math.sqrt(2) * np.linalg.norm(u)))

    # spearman (1,2,3,4) vs (1,3,2,4) via scipy
    print("spearman:", stats.spearmanr([1, 2, 3, 4], [1, 3, 2, 4]).statistic)

    # SNR closed form
    print("snr uniform, alpha=(1,1), sigma=(1,1):", Fraction(1) ** 2 / (Fraction(1, 4) + Fraction(1, 4)))

    # optimal weights for alpha=(1,1), sigma^2=(1,4): numeric maximisation of SNR
    def neg_snr(t):
        w1 = t[0]
        w = np.array([w1, 1 - w1])
        return -((w @ [1, 1]) ** 2) / (w ** 2 @ [1, 4])

    res = optimize.minimize_scalar(lambda a: neg_snr([a]), bounds=(0, 1), method="bounded", options={"xatol": 1e-12})
    print("argmax SNR alpha=(1,1), sigma^2=(1,4):", res.x, 1 - res.x)

    # exhaustive simplex lattice on a 3-group instance, resolution 1e-3
    alphas, sig2 = np.array([2.0, 1.0, 0.5]), np.array([1.0, 2.0, 0.5])
    best, arg = -1.0, None
    steps = 1000
    for i in range(steps + 1):
        j = np.arange(steps + 1 - i)
        cand = np.stack([np.full(j.size, i), j, steps - i - j], axis=1) / steps
        vals = (cand @ alphas) ** 2 / (cand ** 2 @ sig2)
        if vals.max() > best:
            best, arg = vals.max(), cand[vals.argmax()]
    ratio = alphas / sig2
    print("lattice argmax 3-group:", arg, "closed form:", ratio / ratio.sum())

    # JL dot-product property for k=256 projections of 512-dim vectors
    rng = np.random.default_rng(0)
    ok = 0
    for _ in range(200):
        a, b = rng.standard_normal(512), rng.standard_normal(512)
        p = rng.choice([-1.0, 1.0], size=(512, 256)) / 16.0
        err = abs((a @ p) @ (b @ p) - a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        ok += err < 0.2
    print("JL pass rate (numpy RNG):", ok / 200)

    # concordance identity for tie-free spearman, exhaustive n <= 5 spot check
    for n in range(2, 6):
        for perm in itertools.permutations(range(n)):
            d2 = sum((i - p) ** 2 for i, p in enumerate(perm))
            rho = 1 - Fraction(6 * d2, n ** 3 - n)
            assert abs(float(rho) - stats.spearmanr(range(n), perm).statistic) < 1e-12
    print("spearman concordance identity holds for n <= 5")


if __name__ == "__main__":
    main()
