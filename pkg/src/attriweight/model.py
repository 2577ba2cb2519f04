"""Tiny classifiers with closed-form per-example gradients split into parameter groups.

Two architectures are supported:

* ``LogisticRegression``: ``logits = W x + b``.
* ``Mlp1``: ``logits = W2 tanh(W1 x + b1) + b2``.

``Mlp1`` can split the hidden weight matrix into column blocks (one group per
block of input coordinates) and can carry a frozen *distractor* head ``u``
fed by a pseudo-random input ``z(x)`` hashed from the example's features.
The head adds ``u . z(x)`` to the example's loss; it is frozen at ``u = 0``,
so neither predictions nor losses change, while its gradient ``z(x)``
is dense noise with respect to attribution.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .errors import DimensionMismatch, FormatError, InvalidArgument, NumericalFailure
from .prng import SplitMix64, hash_rows, keyed_normals


class Architecture(str, Enum):
    LOGISTIC_REGRESSION = "LogisticRegression"
    MLP1 = "Mlp1"


ARCH_TAGS = {Architecture.LOGISTIC_REGRESSION: 0, Architecture.MLP1: 1}
CHECKPOINT_MAGIC = b"ATWC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ParameterGrouping:
    groups: tuple[tuple[str, int], ...]

    def __post_init__(self):
        groups = tuple((str(n), int(d)) for n, d in self.groups)
        names = [n for n, _ in groups]
        if len(set(names)) != len(names):
            raise InvalidArgument("group names must be unique")
        if any(d < 1 for _, d in groups):
            raise InvalidArgument("group dims must be positive")
        object.__setattr__(self, "groups", groups)

    @property
    def total_dim(self) -> int:
        return sum(d for _, d in self.groups)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.groups]

    @property
    def dims(self) -> list[int]:
        return [d for _, d in self.groups]

    def __len__(self) -> int:
        return len(self.groups)

    def slices(self) -> list[slice]:
        out, start = [], 0
        for _, d in self.groups:
            out.append(slice(start, start + d))
            start += d
        return out

    def split(self, vec: np.ndarray) -> list[np.ndarray]:
        vec = np.asarray(vec)
        if vec.shape[-1] != self.total_dim:
            raise DimensionMismatch(f"expected length {self.total_dim}, got {vec.shape[-1]}")
        return [vec[..., s] for s in self.slices()]


@dataclass(frozen=True)
class ModelSpec:
    architecture: Architecture
    input_dim: int
    num_classes: int
    hidden: int = 0
    hidden_blocks: tuple[tuple[int, int], ...] = ()
    per_class_rows: bool = False
    distractor_dim: int = 0
    distractor_scale: float = 1.0
    distractor_seed: int = 0
    fused_output: bool = False

    def grouping(self) -> ParameterGrouping:
        d, c, h = self.input_dim, self.num_classes, self.hidden
        if self.architecture is Architecture.LOGISTIC_REGRESSION:
            if self.per_class_rows:
                groups = [(f"weight[{k}]", d) for k in range(c)]
            else:
                groups = [("weight", c * d)]
            return ParameterGrouping(tuple(groups + [("bias", c)]))
        groups = []
        if self.hidden_blocks:
            groups += [(f"hidden.weight[{a}:{b}]", h * (b - a)) for a, b in self.hidden_blocks]
        else:
            groups.append(("hidden.weight", h * d))
        groups.append(("hidden.bias", h))
        if self.fused_output:
            groups.append(("output", c * h + c))
        else:
            groups += [("output.weight", c * h), ("output.bias", c)]
        if self.distractor_dim:
            name = f"distractor[scale={self.distractor_scale!r},seed={self.distractor_seed}]"
            groups.append((name, self.distractor_dim))
        return ParameterGrouping(tuple(groups))

    def frozen_mask(self) -> np.ndarray:
        mask = np.zeros(self.grouping().total_dim, dtype=bool)
        if self.distractor_dim:
            mask[-self.distractor_dim :] = True
        return mask


def make_spec(
    arch: Architecture | str,
    input_dim: int,
    num_classes: int,
    hidden: int = 16,
    hidden_col_blocks: int | None = None,
    per_class_rows: bool = False,
    distractor_dim: int = 0,
    distractor_scale: float = 1.0,
    distractor_seed: int = 0,
    fused_output: bool = False,
) -> ModelSpec:
    arch = Architecture(arch)
    if arch is Architecture.LOGISTIC_REGRESSION:
        return ModelSpec(arch, input_dim, num_classes, per_class_rows=per_class_rows)
    if hidden < 1:
        raise InvalidArgument("Mlp1 needs hidden >= 1")
    blocks: tuple[tuple[int, int], ...] = ()
    if hidden_col_blocks and hidden_col_blocks > 1:
        if hidden_col_blocks > input_dim:
            raise InvalidArgument("more column blocks than input coordinates")
        edges = np.linspace(0, input_dim, hidden_col_blocks + 1).round().astype(int)
        blocks = tuple((int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]))
    return ModelSpec(
        arch, input_dim, num_classes, hidden, blocks,
        distractor_dim=distractor_dim,
        distractor_scale=float(distractor_scale),
        distractor_seed=int(distractor_seed),
        fused_output=bool(fused_output),
    )


def spec_with_blocks(spec: ModelSpec, blocks) -> ModelSpec:
    """Same model with explicit hidden-weight column blocks (must tile the input)."""
    blocks = tuple((int(a), int(b)) for a, b in blocks)
    if blocks[0][0] != 0 or blocks[-1][1] != spec.input_dim or any(
        b0[1] != b1[0] for b0, b1 in zip(blocks[:-1], blocks[1:])
    ):
        raise InvalidArgument("column blocks must tile [0, input_dim)")
    return ModelSpec(**{**asdict(spec), "hidden_blocks": blocks})


_BLOCK_RE = re.compile(r"^hidden\.weight\[(\d+):(\d+)\]$")
_DISTRACTOR_RE = re.compile(r"^distractor\[scale=([^,]+),seed=(\d+)\]$")


def spec_from_grouping(arch: Architecture, grouping: ParameterGrouping) -> ModelSpec:
    dims = dict(grouping.groups)
    if arch is Architecture.LOGISTIC_REGRESSION:
        c = dims["bias"]
        if "weight" in dims:
            return ModelSpec(arch, dims["weight"] // c, c)
        return ModelSpec(arch, dims["weight[0]"], c, per_class_rows=True)
    h = dims["hidden.bias"]
    fused = "output" in dims
    c = dims["output"] // (h + 1) if fused else dims["output.bias"]
    blocks = []
    for name, dim in grouping.groups:
        m = _BLOCK_RE.match(name)
        if m:
            blocks.append((int(m.group(1)), int(m.group(2))))
    input_dim = blocks[-1][1] if blocks else dims["hidden.weight"] // h
    z_dim, scale, seed = 0, 1.0, 0
    for name, dim in grouping.groups:
        m = _DISTRACTOR_RE.match(name)
        if m:
            z_dim, scale, seed = dim, float(m.group(1)), int(m.group(2))
    spec = ModelSpec(arch, input_dim, c, h, tuple(blocks), False, z_dim, scale, seed, fused)
    if spec.grouping() != grouping:
        raise FormatError("grouping table does not describe a known architecture")
    return spec


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    init_seed: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or not self.lr > 0 or self.batch_size < 1:
            raise InvalidArgument("TrainConfig needs epochs >= 1, lr > 0, batch_size >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ModelCheckpoint:
    spec: ModelSpec
    flat_params: np.ndarray
    train_config_hash: str = ""

    def __post_init__(self):
        flat = np.asarray(self.flat_params, dtype=np.float64)
        if flat.shape != (self.grouping.total_dim,):
            raise DimensionMismatch("flat_params length must equal grouping.total_dim")
        flat.setflags(write=False)
        object.__setattr__(self, "flat_params", flat)

    @property
    def architecture(self) -> Architecture:
        return self.spec.architecture

    @property
    def grouping(self) -> ParameterGrouping:
        return self.spec.grouping()

    def digest(self) -> str:
        h = hashlib.sha256(checkpoint_bytes(self))
        return h.hexdigest()[:16]


# -- parameter packing -------------------------------------------------------

def _unpack(spec: ModelSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden
    parts = dict(zip(spec.grouping().names, spec.grouping().split(flat)))
    if spec.architecture is Architecture.LOGISTIC_REGRESSION:
        if spec.per_class_rows:
            w = np.stack([parts[f"weight[{k}]"] for k in range(c)])
        else:
            w = parts["weight"].reshape(c, d)
        return {"W": w, "b": parts["bias"]}
    if spec.hidden_blocks:
        w1 = np.concatenate(
            [parts[f"hidden.weight[{a}:{b}]"].reshape(h, b - a) for a, b in spec.hidden_blocks], axis=1
        )
    else:
        w1 = parts["hidden.weight"].reshape(h, d)
    if spec.fused_output:
        w2, b2 = parts["output"][: c * h], parts["output"][c * h :]
    else:
        w2, b2 = parts["output.weight"], parts["output.bias"]
    out = {"W1": w1, "b1": parts["hidden.bias"], "W2": w2.reshape(c, h), "b2": b2}
    if spec.distractor_dim:
        out["u"] = flat[-spec.distractor_dim :]
    return out


def _pack_grads(spec: ModelSpec, grads: dict[str, np.ndarray]) -> np.ndarray:
    """Per-example gradient blocks (leading batch axis) -> (n, total_dim)."""
    n = next(iter(grads.values())).shape[0]
    if spec.architecture is Architecture.LOGISTIC_REGRESSION:
        return np.concatenate([grads["W"].reshape(n, -1), grads["b"]], axis=1)
    pieces = []
    if spec.hidden_blocks:
        pieces += [grads["W1"][:, :, a:b].reshape(n, -1) for a, b in spec.hidden_blocks]
    else:
        pieces.append(grads["W1"].reshape(n, -1))
    pieces += [grads["b1"], grads["W2"].reshape(n, -1), grads["b2"]]
    if spec.distractor_dim:
        pieces.append(grads["u"])
    return np.concatenate(pieces, axis=1)


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    flat = np.zeros(spec.grouping().total_dim)
    if spec.architecture is Architecture.LOGISTIC_REGRESSION:
        return flat
    rng = SplitMix64(seed, "init")
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden
    w1 = rng.normal(h * d).reshape(h, d) / np.sqrt(d)
    w2 = rng.normal(c * h).reshape(c, h) / np.sqrt(h)
    grads = {
        "W1": w1[None], "b1": np.zeros((1, h)), "W2": w2[None], "b2": np.zeros((1, c)),
    }
    if spec.distractor_dim:
        grads["u"] = np.zeros((1, spec.distractor_dim))
    return _pack_grads(spec, grads)[0]


# -- forward / backward ------------------------------------------------------

def distractor_inputs(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    keys = hash_rows(x, spec.distractor_seed)
    return spec.distractor_scale * keyed_normals(keys, spec.distractor_dim)


def _check_inputs(spec: ModelSpec, x, y=None):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"input has dim {x.shape[1]}, model expects {spec.input_dim}")
    if y is None:
        return x, None, single
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (x.shape[0],):
        raise DimensionMismatch("one label per input row required")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise InvalidArgument("label outside the model's classes")
    return x, y, single


def _forward(spec: ModelSpec, p: dict, x: np.ndarray):
    if spec.architecture is Architecture.LOGISTIC_REGRESSION:
        return x @ p["W"].T + p["b"], None
    hid = np.tanh(x @ p["W1"].T + p["b1"])
    return hid @ p["W2"].T + p["b2"], hid


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_probs(ckpt: ModelCheckpoint, x) -> np.ndarray:
    x, _, _ = _check_inputs(ckpt.spec, x)
    logits, _ = _forward(ckpt.spec, _unpack(ckpt.spec, ckpt.flat_params), x)
    return _log_softmax(logits)


def predict(ckpt: ModelCheckpoint, x) -> np.ndarray:
    return np.argmax(log_probs(ckpt, x), axis=1)


def accuracy(ckpt: ModelCheckpoint, x, y) -> float:
    return float(np.mean(predict(ckpt, x) == np.asarray(y)))


def example_losses(ckpt: ModelCheckpoint, x, y) -> np.ndarray:
    x, y, _ = _check_inputs(ckpt.spec, x, y)
    lp = log_probs(ckpt, x)
    out = -lp[np.arange(len(y)), y]
    if ckpt.spec.distractor_dim:
        u = _unpack(ckpt.spec, ckpt.flat_params)["u"]
        if np.any(u):
            out = out + distractor_inputs(ckpt.spec, x) @ u
    return out


def loss(ckpt: ModelCheckpoint, x, y) -> float:
    """Mean cross-entropy over the given example(s)."""
    return float(np.mean(example_losses(ckpt, x, y)))


def model_output(ckpt: ModelCheckpoint, x, y) -> float:
    """Output correlated by LDS: negative cross-entropy (higher is better)."""
    return -loss(ckpt, x, y)


def example_outputs(ckpt: ModelCheckpoint, x, y) -> np.ndarray:
    return -example_losses(ckpt, x, y)


def _grad_blocks(spec: ModelSpec, p: dict, x: np.ndarray, y: np.ndarray, targets=None) -> dict[str, np.ndarray]:
    logits, hid = _forward(spec, p, x)
    delta = np.exp(_log_softmax(logits))
    if targets is None:
        delta[np.arange(len(y)), y] -= 1.0
    else:
        delta -= targets
    if spec.architecture is Architecture.LOGISTIC_REGRESSION:
        return {"W": delta[:, :, None] * x[:, None, :], "b": delta}
    da = (delta @ p["W2"]) * (1.0 - hid ** 2)
    grads = {
        "W1": da[:, :, None] * x[:, None, :],
        "b1": da,
        "W2": delta[:, :, None] * hid[:, None, :],
        "b2": delta,
    }
    if spec.distractor_dim:
        grads["u"] = distractor_inputs(spec, x)
    return grads


def per_example_gradients(ckpt: ModelCheckpoint, x, y) -> np.ndarray:
    """Cross-entropy gradients, one row per example, in grouping order."""
    x, y, _ = _check_inputs(ckpt.spec, x, y)
    p = _unpack(ckpt.spec, ckpt.flat_params)
    return _pack_grads(ckpt.spec, _grad_blocks(ckpt.spec, p, x, y))


def per_example_gradients_soft(ckpt: ModelCheckpoint, x, targets) -> np.ndarray:
    """Gradients of ``-sum_c t_c log p_c`` for per-row target distributions ``t``.

    With ``t`` uniform over a set of classes this is the mean cross-entropy
    over those classes, i.e. a query whose label is only partly specified.
    """
    x, _, _ = _check_inputs(ckpt.spec, x)
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if t.shape != (x.shape[0], ckpt.spec.num_classes):
        raise DimensionMismatch("targets must be one distribution over classes per row")
    if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0):
        raise InvalidArgument("each target row must be a probability distribution")
    p = _unpack(ckpt.spec, ckpt.flat_params)
    return _pack_grads(ckpt.spec, _grad_blocks(ckpt.spec, p, x, None, t))


def per_example_gradient(ckpt: ModelCheckpoint, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("per_example_gradient takes a single feature vector")
    return per_example_gradients(ckpt, x[None], [int(y)])[0]


def _mean_gradient(spec: ModelSpec, flat: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = _unpack(spec, flat)
    blocks = _grad_blocks(spec, p, x, y)
    mean = {k: v.mean(axis=0, keepdims=True) for k, v in blocks.items()}
    return _pack_grads(spec, mean)[0]


# -- training ----------------------------------------------------------------

def _resolve_spec(ds: LabeledDataset, arch) -> ModelSpec:
    if isinstance(arch, ModelSpec):
        if arch.input_dim != ds.dim:
            raise DimensionMismatch("model input_dim does not match dataset")
        return arch
    return make_spec(arch, ds.dim, ds.num_classes)


def train(ds: LabeledDataset, ids, arch, cfg: TrainConfig) -> ModelCheckpoint:
    """Minibatch SGD from a seeded init; returns only the final checkpoint.

    ``arch`` is an :class:`Architecture` (default layout) or a full
    :class:`ModelSpec`. Frozen groups (the distractor head) are never updated.
    """
    spec = _resolve_spec(ds, arch)
    ids = np.sort(np.asarray(ids, dtype=np.int64))
    if ids.size == 0:
        raise InvalidArgument("cannot train on an empty id set")
    x, y = ds.subset_arrays(ids)
    _check_inputs(spec, x, y)
    init_seed = cfg.seed if cfg.init_seed is None else cfg.init_seed
    flat = init_params(spec, init_seed)
    trainable = ~spec.frozen_mask()
    n = len(ids)
    for epoch in range(cfg.epochs):
        order = SplitMix64(cfg.seed, "shuffle", epoch).permutation(n)
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                g = _mean_gradient(spec, flat, x[batch], y[batch])
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * flat
                flat = flat - cfg.lr * np.where(trainable, g, 0.0)
        if not np.all(np.isfinite(flat)):
            raise NumericalFailure(f"training diverged in epoch {epoch} (lr={cfg.lr})")
    ids_digest = hashlib.sha256(ids.tobytes()).hexdigest()[:8]
    return ModelCheckpoint(spec, flat, f"{cfg.digest()}-{ids_digest}")


def retrain_on_subset(ds: LabeledDataset, subset_ids, arch, cfg: TrainConfig) -> ModelCheckpoint:
    """Train from scratch on ``subset_ids`` only; identical procedure to :func:`train`."""
    if len(np.asarray(subset_ids)) == 0:
        raise InvalidArgument("subset must be non-empty")
    return train(ds, subset_ids, arch, cfg)


def sgd_step(ckpt: ModelCheckpoint, x, y, lr: float) -> ModelCheckpoint:
    """One plain SGD step on the batch mean gradient (frozen groups untouched)."""
    x, y, _ = _check_inputs(ckpt.spec, x, y)
    if len(y) == 0:
        raise InvalidArgument("batch must be non-empty")
    g = _mean_gradient(ckpt.spec, ckpt.flat_params, x, y)
    g = np.where(ckpt.spec.frozen_mask(), 0.0, g)
    return ModelCheckpoint(ckpt.spec, ckpt.flat_params - lr * g, ckpt.train_config_hash)


# -- checkpoint file -----------------------------------------------------------

def checkpoint_bytes(ckpt: ModelCheckpoint) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<IB", CHECKPOINT_VERSION, ARCH_TAGS[ckpt.architecture])
    out += struct.pack("<I", len(ckpt.grouping))
    for name, dim in ckpt.grouping.groups:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<I", dim)
    out += ckpt.flat_params.astype("<f8").tobytes()
    return bytes(out)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    try:
        if data[:4] != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        version, tag = struct.unpack_from("<IB", data, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        arch = {v: k for k, v in ARCH_TAGS.items()}[tag]
        (count,) = struct.unpack_from("<I", data, 9)
        pos = 13
        groups = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + ln].decode("utf-8")
            (dim,) = struct.unpack_from("<I", data, pos + 2 + ln)
            groups.append((name, dim))
            pos += 6 + ln
        grouping = ParameterGrouping(tuple(groups))
        payload = data[pos:]
        if len(payload) != 8 * grouping.total_dim:
            raise FormatError("checkpoint payload length does not match grouping")
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from None
    return ModelCheckpoint(spec_from_grouping(arch, grouping), flat)
