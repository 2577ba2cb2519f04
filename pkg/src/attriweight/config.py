"""Typed INI run configuration shared by the CLI, scripts and tests.

Every section is a flat dataclass of scalars. Keys map one-to-one onto
``--section.key`` command-line flags; unknown sections or keys are errors.
Per-component seeds are offsets added to the run's global seed.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import typing
from dataclasses import dataclass, field, fields, replace

from .errors import InvalidArgument


class ConfigError(InvalidArgument):
    """Malformed, unknown or ill-typed configuration entry."""


@dataclass(frozen=True)
class DatasetSection:
    num_classes: int = 3
    per_class: int = 500
    dim: int = 10
    separation: float = 2.0
    seed: int = 1
    n_train: int = 1000
    n_weight: int = 200
    n_eval: int = 100
    split_seed: int = 2
    corruption: float = 0.1
    corruption_seeds: str = "100,101,102,103,104"
    factors_a: int = 6
    factors_b: int = 6
    factor_dim: int = 8
    factor_per_cell_train: int = 3
    factor_per_cell_query: int = 12
    factor_separation: float = 2.0
    factor_noise: float = 0.5
    factor_seed: int = 21


@dataclass(frozen=True)
class ModelSection:
    architecture: str = "Mlp1"
    hidden: int = 16
    col_blocks: int = 2
    fused_output: bool = True
    distractor_dim: int = 64
    distractor_scale: float = 1.0
    distractor_seed: int = 3
    epochs: int = 20
    lr: float = 0.1
    batch_size: int = 32
    weight_decay: float = 1e-3
    train_seed: int = 5
    factor_hidden: int = 64
    factor_epochs: int = 40
    factor_batch_size: int = 16


@dataclass(frozen=True)
class ProjectionSection:
    kind: str = "Rademacher"
    dim: int = 32
    seed: int = 9
    clip: bool = True


@dataclass(frozen=True)
class AttributionSection:
    method: str = "tracin"
    trak_lambda: float = 50.0
    self_influence_top_t: int = 10


@dataclass(frozen=True)
class WeightingSection:
    k: int = 10
    lambda_reg_tracin: float = 0.0
    lambda_reg_trak: float = 0.5
    lr: float = 0.01
    epochs: int = 10
    loss: str = "TopK"
    seed: int = 0
    init_std: float = 0.0
    augment_noise: float = 0.1
    sweep_k: str = "1,5,10,20,50,100,200,500,1000,5000"
    sweep_lambda: str = "0,0.02,0.1,0.2,0.3,0.4,0.5,0.8,1,1.5"
    noise_scales: str = "0,0.1,0.3,1,3,10,30"
    noise_seed: int = 31
    consistency_lambda_reg: float = 0.0


@dataclass(frozen=True)
class EvalSection:
    lds_alpha: float = 0.5
    lds_subsets: int = 64
    lds_seed: int = 11
    bootstrap_resamples: int = 1000
    bootstrap_seed: int = 0
    tailpatch_top_k: int = 10
    tailpatch_lr: typing.Optional[float] = None
    random_seed: int = 77
    random_draws: int = 1000
    recall_k: int = 10


@dataclass(frozen=True)
class OracleSection:
    alphas: str = "4,2,1,1,0.5,0.25,0,0"
    sigmas: str = "1,1,1,1,1,1,1,1"
    n: int = 5000
    sparsity: float = 0.02
    queries: int = 20
    k: int = 10
    seed: int = 0


SECTIONS: dict[str, type] = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "projection": ProjectionSection,
    "attribution": AttributionSection,
    "weighting": WeightingSection,
    "eval": EvalSection,
    "oracle": OracleSection,
}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    weighting: WeightingSection = field(default_factory=WeightingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    seed: int = 0
    outdir: str = "runs/default"

    def seeded(self, component_seed: int) -> int:
        return int(component_seed) + int(self.seed)

    def to_ini(self) -> str:
        """Resolved settings as INI text. ``outdir`` is left out: it never changes a result."""
        parser = configparser.ConfigParser(interpolation=None)
        parser["run"] = {"seed": str(self.seed)}
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: format_value(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    def with_overrides(self, items: dict[str, str]) -> "RunConfig":
        """Apply ``{"section.key": "text"}`` overrides (``run.seed`` included)."""
        cfg = self
        for dotted, text in items.items():
            section, _, key = dotted.partition(".")
            if not key:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            if section == "run":
                if key not in ("seed", "outdir"):
                    raise ConfigError(f"unknown key run.{key}")
                value = parse_value(int if key == "seed" else str, text, dotted)
                cfg = replace(cfg, **{key: value})
                continue
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            current = getattr(cfg, section)
            types = _field_types(SECTIONS[section])
            if key not in types:
                raise ConfigError(f"unknown key {section}.{key}")
            new = replace(current, **{key: parse_value(types[key], text, dotted)})
            cfg = replace(cfg, **{section: new})
        return cfg


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def section_keys() -> list[tuple[str, str, object, object]]:
    """``(section, key, type, default)`` for every configurable key."""
    out = []
    for name, cls in SECTIONS.items():
        types = _field_types(cls)
        for f in fields(cls):
            out.append((name, f.name, types[f.name], f.default))
    return out


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(kind, text: str, where: str):
    text = str(text).strip()
    optional = typing.get_origin(kind) is typing.Union and type(None) in typing.get_args(kind)
    if optional:
        if text.lower() in ("", "none"):
            return None
        kind = next(a for a in typing.get_args(kind) if a is not type(None))
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None


def parse_list(text: str, kind=float) -> list:
    """Comma-separated scalars, e.g. a grid written as ``"1,5,10"``."""
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    try:
        return [kind(t) for t in items]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc.message.splitlines()[0]}") from None
        items = {}
        for section in parser.sections():
            if section != "run" and section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in parser.items(section):
                items[f"{section}.{key}"] = value
        cfg = cfg.with_overrides(items)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.model.architecture not in ("Mlp1", "LogisticRegression"):
        raise ConfigError("model.architecture must be Mlp1 or LogisticRegression")
    if cfg.projection.kind not in ("Identity", "Rademacher"):
        raise ConfigError("projection.kind must be Identity or Rademacher")
    if cfg.attribution.method not in ("tracin", "trak"):
        raise ConfigError("attribution.method must be tracin or trak")
    if cfg.weighting.loss not in ("TopK", "BottomK", "TopKMinusBottomK", "SupervisedAug", "NoNorm"):
        raise ConfigError("weighting.loss is not a known loss variant")
    d = cfg.dataset
    if d.n_train + d.n_weight + d.n_eval > d.num_classes * d.per_class:
        raise ConfigError("dataset splits exceed the number of generated examples")
    if not 0 < cfg.eval.lds_alpha < 1:
        raise ConfigError("eval.lds_alpha must lie in (0, 1)")
    for text in (d.corruption_seeds,):
        parse_list(text, int)
    for text in (cfg.weighting.sweep_lambda, cfg.weighting.noise_scales, cfg.oracle.alphas, cfg.oracle.sigmas):
        parse_list(text, float)
    parse_list(cfg.weighting.sweep_k, int)


__all__ = [
    "ConfigError", "RunConfig", "SECTIONS", "load_config", "parse_list", "section_keys",
    "DatasetSection", "ModelSection", "ProjectionSection", "AttributionSection",
    "WeightingSection", "EvalSection", "OracleSection",
]
