"""Portable counter-based pseudo-random numbers.

Every random draw in the package comes from SplitMix64 evaluated at a
counter, so any port that reproduces the integer recipe below reproduces
the same datasets, projections and subsets bit for bit:

    GAMMA = 0x9E3779B97F4A7C15
    mix(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   (mod 2**64)
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB   (mod 2**64)
        return z ^ (z >> 31)
    output i (i = 0, 1, ...) of stream with key s:  mix(s + (i + 1) * GAMMA)

Derived quantities:

* uniform in [0, 1): ``(u >> 11) * 2**-53``
* standard normal: Box-Muller on consecutive output pairs
  ``(u1, u2)``; ``r = sqrt(-2 ln(1 - U1))``, emitting ``r cos(2 pi U2)``
  then ``r sin(2 pi U2)``
* integer in [0, n): ``u % n``
* Rademacher sign: top bit of ``u`` (1 -> -1, 0 -> +1)
* permutation: Fisher-Yates from the back, ``j = u % (i + 1)``
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _tag_to_int(tag: int | str) -> int:
    if isinstance(tag, str):
        # FNV-1a 64 over UTF-8 bytes
        h = 0xCBF29CE484222325
        for byte in tag.encode("utf-8"):
            h = ((h ^ byte) * 0x100000001B3) & MASK64
        return h
    return int(tag) & MASK64


def derive_seed(seed: int, *tags: int | str) -> int:
    """Combine a base seed with a path of integer/string tags."""
    s = mix64(int(seed) & MASK64)
    for tag in tags:
        s = mix64(s ^ mix64((_tag_to_int(tag) + GAMMA) & MASK64))
    return s


class SplitMix64:
    """Stateful cursor over the stream ``mix(key + (i + 1) * GAMMA)``."""

    def __init__(self, seed: int, *tags: int | str):
        self.key = derive_seed(seed, *tags) if tags else int(seed) & MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GAMMA)
            return mix64_array(z)

    def uniform(self, n: int) -> np.ndarray:
        u = self.next_u64(n)
        return (u >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        if high < 1:
            raise ValueError("high must be >= 1")
        return (self.next_u64(n) % np.uint64(high)).astype(np.int64)

    def rademacher(self, n: int) -> np.ndarray:
        top = (self.next_u64(n) >> np.uint64(63)).astype(np.float64)
        return 1.0 - 2.0 * top

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        draws = self.next_u64(n - 1)
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[step] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)``, in draw order."""
        if size > n:
            raise ValueError(f"cannot draw {size} distinct items from {n}")
        return self.permutation(n)[:size]


def keyed_normals(keys: np.ndarray, dim: int) -> np.ndarray:
    """One independent standard-normal vector per uint64 key (rows)."""
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1, 1)
    pairs = (dim + 1) // 2
    idx = np.arange(1, 2 * pairs + 1, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        u = mix64_array(keys + idx * np.uint64(GAMMA))
    u = (u >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    u = u.reshape(len(keys), pairs, 2)
    r = np.sqrt(-2.0 * np.log1p(-u[..., 0]))
    theta = 2.0 * np.pi * u[..., 1]
    out = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)
    return out.reshape(len(keys), -1)[:, :dim]


def hash_rows(x: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic uint64 key per row of a float64 matrix (bit-pattern hash)."""
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    bits = x.view(np.uint64)
    h = np.full(x.shape[0], derive_seed(seed, "row-hash"), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for col in range(bits.shape[1]):
            h = mix64_array(h ^ mix64_array(bits[:, col] + np.uint64(GAMMA)))
    return h
