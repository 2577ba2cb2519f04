"""Group-structured, randomly projected gradient features and their store file."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .errors import ChecksumMismatch, DimensionMismatch, FormatError, InvalidArgument
from .model import ModelCheckpoint, ParameterGrouping, per_example_gradients, per_example_gradients_soft
from .prng import SplitMix64

STORE_MAGIC = b"GFST"
STORE_VERSION = 1


class ProjectionKind(str, Enum):
    IDENTITY = "Identity"
    RADEMACHER = "Rademacher"


@dataclass(frozen=True)
class ProjectionSpec:
    per_group_dims: tuple[tuple[str, int, int], ...]
    seed: int = 0
    kind: ProjectionKind = ProjectionKind.RADEMACHER

    def __post_init__(self):
        object.__setattr__(self, "kind", ProjectionKind(self.kind))
        for name, d_in, d_out in self.per_group_dims:
            if d_out < 1:
                raise InvalidArgument(f"group {name}: output dim must be >= 1")
            if self.kind is ProjectionKind.IDENTITY and d_out != d_in:
                raise InvalidArgument("Identity projection keeps every group's dimension")
            if d_out > d_in:
                raise InvalidArgument(f"group {name}: output dim {d_out} exceeds input dim {d_in}")

    @property
    def output_layout(self) -> tuple[tuple[str, int], ...]:
        return tuple((name, d_out) for name, _, d_out in self.per_group_dims)

    def matrix(self, group_index: int) -> np.ndarray:
        """The group's ``input_dim x output_dim`` block, regenerated from the seed."""
        _, d_in, d_out = self.per_group_dims[group_index]
        if self.kind is ProjectionKind.IDENTITY:
            return np.eye(d_in)
        return _rademacher_block(self.seed, group_index, d_in, d_out)

    def project(self, grads: np.ndarray) -> np.ndarray:
        """Apply the block-diagonal projection to raw gradient rows."""
        grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
        total_in = sum(d for _, d, _ in self.per_group_dims)
        if grads.shape[1] != total_in:
            raise DimensionMismatch(f"gradient length {grads.shape[1]} != {total_in}")
        if self.kind is ProjectionKind.IDENTITY:
            return grads.copy()
        out, start = [], 0
        for j, (_, d_in, _) in enumerate(self.per_group_dims):
            out.append(grads[:, start : start + d_in] @ self.matrix(j))
            start += d_in
        return np.concatenate(out, axis=1)


@lru_cache(maxsize=256)
def _rademacher_block(seed: int, group_index: int, d_in: int, d_out: int) -> np.ndarray:
    signs = SplitMix64(seed, "projection", group_index).rademacher(d_in * d_out)
    block = signs.reshape(d_in, d_out) / np.sqrt(d_out)
    block.setflags(write=False)
    return block


def build_projection(
    grouping: ParameterGrouping,
    target_dim_per_group: int,
    seed: int,
    kind: ProjectionKind | str = ProjectionKind.RADEMACHER,
    clip: bool = False,
) -> ProjectionSpec:
    """One independent Rademacher block per parameter group.

    With ``clip=True`` groups smaller than the target keep their own size
    instead of raising.
    """
    kind = ProjectionKind(kind)
    if target_dim_per_group < 1:
        raise InvalidArgument("target_dim_per_group must be >= 1")
    dims = []
    for name, d_in in grouping.groups:
        if kind is ProjectionKind.IDENTITY:
            d_out = d_in
        elif target_dim_per_group > d_in:
            if not clip:
                raise InvalidArgument(
                    f"target dim {target_dim_per_group} exceeds group {name} dim {d_in}"
                )
            d_out = d_in
        else:
            d_out = target_dim_per_group
        dims.append((name, d_in, d_out))
    return ProjectionSpec(tuple(dims), int(seed), kind)


@dataclass
class GradientFeatureStore:
    example_ids: np.ndarray
    group_layout: tuple[tuple[str, int], ...]
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.example_ids = np.asarray(self.example_ids, dtype=np.int64)
        self.group_layout = tuple((str(n), int(d)) for n, d in self.group_layout)
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.example_ids):
            raise DimensionMismatch("store needs one data row per example id")
        if self.data.shape[1] != self.dim:
            raise DimensionMismatch("row width must equal the sum of group dims")
        self.data.setflags(write=False)

    @property
    def dim(self) -> int:
        return sum(d for _, d in self.group_layout)

    @property
    def num_groups(self) -> int:
        return len(self.group_layout)

    @property
    def group_names(self) -> list[str]:
        return [n for n, _ in self.group_layout]

    def block_slices(self) -> list[slice]:
        out, start = [], 0
        for _, d in self.group_layout:
            out.append(slice(start, start + d))
            start += d
        return out

    def matrix(self) -> np.ndarray:
        """Features upcast to float64 for kernel math."""
        return self.data.astype(np.float64)

    def row(self, example_id: int) -> np.ndarray:
        hits = np.flatnonzero(self.example_ids == int(example_id))
        if hits.size == 0:
            raise KeyError(f"example id {example_id} not in store")
        return self.data[hits[0]].astype(np.float64)

    def rows(self, example_ids) -> np.ndarray:
        pos = {int(e): i for i, e in enumerate(self.example_ids)}
        try:
            idx = [pos[int(e)] for e in example_ids]
        except KeyError as exc:
            raise KeyError(f"example id {exc.args[0]} not in store") from None
        return self.data[idx].astype(np.float64)


def extract_features(
    ckpt: ModelCheckpoint,
    ds: LabeledDataset,
    ids,
    proj: ProjectionSpec,
    chunk: int = 512,
    labels=None,
    features=None,
) -> GradientFeatureStore:
    """Projected per-example gradients, one row per id in ascending id order.

    ``labels`` overrides the stored labels; a 2-D ``labels`` array holds one
    target distribution per row (see :func:`per_example_gradients_soft`).
    ``features`` (with ``labels``) replaces the dataset rows entirely, e.g.
    for augmented or synthetic queries, in which case ``ids`` are only row
    tags.
    """
    layout = tuple((n, d_in) for n, d_in, _ in proj.per_group_dims)
    if layout != ckpt.grouping.groups:
        raise DimensionMismatch("projection grouping does not match checkpoint grouping")
    ids = np.asarray(ids, dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    soft = labels is not None and np.ndim(labels) == 2
    if labels is not None:
        y = np.asarray(labels, dtype=np.float64 if soft else np.int64)[order]
    if features is None:
        x, stored = ds.subset_arrays(ids)
        if labels is None:
            y = stored
    else:
        if labels is None:
            raise InvalidArgument("explicit features need explicit labels")
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))[order]
    grad_fn = per_example_gradients_soft if soft else per_example_gradients
    rows = []
    for start in range(0, len(ids), chunk):
        g = grad_fn(ckpt, x[start : start + chunk], y[start : start + chunk])
        rows.append(proj.project(g))
    data = np.concatenate(rows) if rows else np.zeros((0, sum(d for _, _, d in proj.per_group_dims)))
    meta = {
        "checkpoint": ckpt.digest(),
        "projection_seed": proj.seed,
        "projection_kind": proj.kind.value,
    }
    return GradientFeatureStore(ids, proj.output_layout, data, meta)


def save_store(store: GradientFeatureStore, path) -> None:
    out = bytearray(STORE_MAGIC)
    out += struct.pack("<IQI", STORE_VERSION, len(store.example_ids), store.num_groups)
    for name, dim in store.group_layout:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<I", dim)
    out += store.example_ids.astype("<u8").tobytes()
    payload = store.data.astype("<f4").tobytes()
    out += payload
    out += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(bytes(out))


def load_store(path) -> GradientFeatureStore:
    data = Path(path).read_bytes()
    if data[:4] != STORE_MAGIC:
        raise FormatError("bad store magic")
    try:
        version, n, m = struct.unpack_from("<IQI", data, 4)
        if version != STORE_VERSION:
            raise FormatError(f"unsupported store version {version}")
        pos = 20
        layout = []
        for _ in range(m):
            (ln,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + ln].decode("utf-8")
            (dim,) = struct.unpack_from("<I", data, pos + 2 + ln)
            layout.append((name, dim))
            pos += 6 + ln
        width = sum(d for _, d in layout)
        ids = np.frombuffer(data, dtype="<u8", count=n, offset=pos).astype(np.int64)
        pos += 8 * n
        payload_len = 4 * n * width
        if len(data) != pos + payload_len + 4:
            raise FormatError("store file truncated or oversized")
        payload = data[pos : pos + payload_len]
        (crc,) = struct.unpack_from("<I", data, pos + payload_len)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt store: {exc}") from None
    if zlib.crc32(payload) != crc:
        raise ChecksumMismatch("store payload CRC32 mismatch")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(n, width).astype(np.float32)
    return GradientFeatureStore(ids, tuple(layout), matrix)
