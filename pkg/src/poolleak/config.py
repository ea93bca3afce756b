"""Experiment configuration: YAML in, validated dataclasses out.

Unknown keys are rejected with the offending line number. Every section has
defaults, so an empty file is a valid (surrogate, synthetic) experiment.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .engine import PoolVariant
from .errors import ParseError, ValidationError
from .harness import CollectionProtocol


@dataclass
class ModelSection:
    source: str = "build-custom"  # build-custom | load
    path: str | None = None
    input_shape: list = field(default_factory=lambda: [3, 16, 16])
    class_count: int = 10
    train: bool = False  # train the built model on the synthetic training split first
    avg_pools: bool = False  # swap every max-pool for an average pool


@dataclass
class DatasetSection:
    source: str = "synthetic"  # synthetic | directory
    path: str | None = None
    per_class: int = 20
    train_per_class: int = 40
    query_per_class: int = 20
    noise: float = 0.1


@dataclass
class ProtocolSection:
    N: int = 50
    P: int = 10
    M: int = 10
    warmup: int = 10


@dataclass
class ChannelSection:
    kind: str = "surrogate"  # surrogate | wall
    ns_per_update: float = 10.0
    base_ns: float = 1e4
    noise_std_ns: float = 50.0


@dataclass
class TrainSection:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 32


@dataclass
class DPSection:
    enabled: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float = 0.5
    epsilon_label: float | None = None


@dataclass
class AttackSection:
    M: int | None = None  # rows per class; defaults to protocol.M
    train_fraction: float = 0.8
    K: int = 5
    epochs: int = 300
    grid: str = "default"  # default | single


@dataclass
class MIASection:
    retrain_mode: str = "scratch"
    model2_init: str = "fresh"
    ratios: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])


@dataclass
class CTVerifySection:
    inputs: int = 10000


@dataclass
class SelfTestSection:
    samples: int = 2000
    jitter_budget_ns: float = 2000.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    pool_variant: str = "naive"
    out_dir: str = "results"
    model: ModelSection = field(default_factory=ModelSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    train: TrainSection = field(default_factory=TrainSection)
    dp: DPSection = field(default_factory=DPSection)
    attack: AttackSection = field(default_factory=AttackSection)
    mia: MIASection = field(default_factory=MIASection)
    ct_verify: CTVerifySection = field(default_factory=CTVerifySection)
    self_test: SelfTestSection = field(default_factory=SelfTestSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def collection_protocol(self) -> CollectionProtocol:
        p = self.protocol
        return CollectionProtocol(p.N, p.P, p.M, p.warmup)

    @property
    def variant(self) -> PoolVariant:
        return PoolVariant.parse(self.pool_variant)


def _check_value(name: str, value: Any, default: Any, hint: str, node) -> Any:
    line = node.start_mark.line + 1
    if value is None:
        if default is None or "None" in hint:
            return None
        raise ParseError(f"{name} must not be null", line, name)
    if "float" in hint and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if "float" in hint and isinstance(value, str):
        # YAML 1.1 reads 1e4 or 1.0e9 (unsigned exponent) as a string
        try:
            return float(value)
        except ValueError:
            raise ParseError(f"{name} must be a number", line, name) from None
    if hint.startswith("int") or hint == "int | None":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ParseError(f"{name} must be an integer", line, name)
    if hint == "bool":
        if isinstance(value, bool):
            return value
        raise ParseError(f"{name} must be true or false", line, name)
    if hint.startswith("str"):
        if isinstance(value, str):
            return value
        raise ParseError(f"{name} must be a string", line, name)
    if hint == "list":
        if isinstance(value, list):
            return value
        raise ParseError(f"{name} must be a list", line, name)
    raise ParseError(f"{name} has an unsupported value", line, name)


def _fill(cls, mapping_node, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ParseError(f"{prefix or 'config'} must be a mapping", mapping_node.start_mark.line + 1, prefix or None)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    key_nodes = {k.value: (k, v) for k, v in mapping_node.value}
    kwargs = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        knode, vnode = key_nodes.get(str(key), (mapping_node, mapping_node))
        if key not in fields:
            raise ParseError(f"unknown key {name!r}", knode.start_mark.line + 1, name)
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[key] = _fill(type(default), vnode, value if value is not None else {}, name + ".")
        else:
            kwargs[key] = _check_value(name, value, default, str(f.type), vnode)
    return cls(**kwargs)


def parse_config_text(text: str, base_dir: str | os.PathLike = ".") -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"malformed config: {exc}", mark.line + 1 if mark else None) from None
    if node is None:
        cfg = ExperimentConfig()
    else:
        if not isinstance(node, yaml.MappingNode):
            raise ParseError("config must be a mapping", node.start_mark.line + 1)
        cfg = _fill(ExperimentConfig, node, data, "")
    validate(cfg, base_dir)
    return cfg


def parse_config(path: str | os.PathLike) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config_text(text, p.parent)


def _resolve(path: str | None, base: Path) -> str | None:
    if path is None:
        return None
    q = Path(path)
    return str(q if q.is_absolute() else base / q)


def validate(cfg: ExperimentConfig, base_dir: str | os.PathLike = ".") -> ExperimentConfig:
    base = Path(base_dir)
    try:
        cfg.collection_protocol()
        PoolVariant.parse(cfg.pool_variant)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if cfg.model.source not in ("build-custom", "load"):
        raise ValidationError("model.source must be build-custom or load")
    if cfg.model.source == "load":
        cfg.model.path = _resolve(cfg.model.path, base)
        if cfg.model.path is None or not Path(cfg.model.path).is_file():
            raise ValidationError(f"model file {cfg.model.path} does not exist")
    if len(cfg.model.input_shape) != 3 or any(not isinstance(d, int) or d < 1 for d in cfg.model.input_shape):
        raise ValidationError("model.input_shape must be three positive integers")
    if cfg.model.class_count < 2:
        raise ValidationError("model.class_count must be >= 2")
    if cfg.dataset.source not in ("synthetic", "directory"):
        raise ValidationError("dataset.source must be synthetic or directory")
    if cfg.dataset.source == "directory":
        cfg.dataset.path = _resolve(cfg.dataset.path, base)
        if cfg.dataset.path is None or not Path(cfg.dataset.path).is_dir():
            raise ValidationError(f"dataset directory {cfg.dataset.path} does not exist")
    for name in ("per_class", "train_per_class", "query_per_class"):
        if getattr(cfg.dataset, name) < 1:
            raise ValidationError(f"dataset.{name} must be >= 1")
    if cfg.dataset.noise < 0:
        raise ValidationError("dataset.noise must be >= 0")
    if cfg.channel.kind not in ("surrogate", "wall"):
        raise ValidationError("channel.kind must be surrogate or wall")
    if min(cfg.channel.ns_per_update, cfg.channel.base_ns, cfg.channel.noise_std_ns) < 0:
        raise ValidationError("surrogate parameters must be >= 0")
    t = cfg.train
    if t.learning_rate <= 0 or t.epochs < 1 or t.batch_size < 1:
        raise ValidationError("train: learning_rate > 0, epochs >= 1, batch_size >= 1")
    if cfg.dp.clip_norm <= 0 or cfg.dp.noise_multiplier < 0:
        raise ValidationError("dp: clip_norm > 0 and noise_multiplier >= 0")
    a = cfg.attack
    if a.M is not None and a.M < 1:
        raise ValidationError("attack.M must be >= 1")
    if not 0 < a.train_fraction < 1 or a.K < 2 or a.epochs < 1:
        raise ValidationError("attack: 0 < train_fraction < 1, K >= 2, epochs >= 1")
    if a.grid not in ("default", "single"):
        raise ValidationError("attack.grid must be default or single")
    if cfg.mia.retrain_mode not in ("scratch", "finetune"):
        raise ValidationError("mia.retrain_mode must be scratch or finetune")
    if cfg.mia.model2_init not in ("fresh", "shared"):
        raise ValidationError("mia.model2_init must be fresh or shared")
    if not cfg.mia.ratios or any(not isinstance(r, (int, float)) or not 0 < r < 1 for r in cfg.mia.ratios):
        raise ValidationError("mia.ratios must be a non-empty list of values in (0, 1)")
    if cfg.ct_verify.inputs < 2:
        raise ValidationError("ct_verify.inputs must be >= 2")
    if cfg.self_test.samples < 10 or cfg.self_test.jitter_budget_ns <= 0:
        raise ValidationError("self_test: samples >= 10 and jitter_budget_ns > 0")
    if not 0 <= cfg.seed < 2**64:
        raise ValidationError("seed must be an unsigned 64-bit integer")
    return cfg
