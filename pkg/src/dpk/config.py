"""Run configuration: nested dataclasses loaded from YAML with dotted overrides.

Every key is checked against the schema before any compute starts. Unknown
keys and type mismatches are collected and reported together, with the YAML
line number when the value came from a file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

MASK_STRATEGIES = ("random", "block", "grid", "cka", "cosine", "exponential", "linear")
DYNAMIC_STRATEGIES = ("cka", "cosine", "exponential", "linear")


class ConfigError(ValueError):
    """Schema violations; ``messages`` holds one line per problem."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("\n".join(self.messages))


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    n_train: int = 5000
    n_test: int = 1000
    image_size: int = 32
    num_classes: int = 10
    noise: float = 0.1
    seed: int = 1234
    path: str | None = None
    test_path: str | None = None


@dataclass
class ModelConfig:
    teacher_width: float = 1.0
    student_width: float = 0.5
    role: str = "student"
    teacher_checkpoint: str | None = None
    stages: list = field(default_factory=lambda: [["stage4", "stage4"]])
    stage_weights: list = field(default_factory=list)


@dataclass
class MaskConfig:
    strategy: str = "cka"
    ratio: float = 0.75
    pi0: float = 1.0
    pattern: str = "random"
    filler: str = "teacher"
    seed: int | None = None
    linear_decrement: float = 0.95


@dataclass
class TransformConfig:
    variant: str = "encoder_decoder"
    patch_size: int | None = None
    dim: int | None = None
    encoder_blocks: int = 6
    decoder_blocks: int = 6
    heads: int = 4


@dataclass
class KDConfig:
    alpha: float = 0.8
    beta: float = 0.2
    tau: float = 4.0
    tau_squared: bool = True
    region: str = "full"


@dataclass
class ScheduleConfig:
    ema: float = 0.0


@dataclass
class FGDConfig:
    w_f: float = 5e-5
    w_b: float = 2.5e-5


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 64
    lr_schedule: str = "cosine"
    warmup_epochs: int = 0


@dataclass
class DistillConfig:
    seed: int = 0
    out: str = "runs/dpk"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    fgd: FGDConfig = field(default_factory=FGDConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> bytes:
        """sha256 of the canonical JSON form, excluding the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()

    def with_overrides(self, overrides) -> "DistillConfig":
        return build_config(self.to_dict(), overrides)


_CHOICES = {
    "model.role": ("student", "teacher"),
    "mask.strategy": MASK_STRATEGIES,
    "mask.pattern": ("random", "block", "grid"),
    "mask.filler": ("teacher", "zero", "learnable"),
    "transform.variant": ("encoder_decoder", "mlp_decoder", "conv"),
    "kd.region": ("full", "non_masked"),
    "optim.lr_schedule": ("cosine", "constant"),
    "dataset.name": ("synthetic", "archive"),
}

_UNIT_INTERVAL = ("mask.ratio", "mask.pi0")
_NON_NEGATIVE = (
    "kd.alpha", "kd.beta", "fgd.w_f", "fgd.w_b", "optim.lr", "optim.weight_decay",
    "optim.epochs", "optim.warmup_epochs", "dataset.noise", "transform.encoder_blocks",
    "transform.decoder_blocks", "mask.linear_decrement",
)
_POSITIVE = (
    "kd.tau", "optim.batch_size", "dataset.n_train", "dataset.n_test",
    "dataset.image_size", "transform.heads", "model.teacher_width", "model.student_width",
)


def parse_override(text: str) -> tuple[str, Any]:
    """``"kd.beta=0"`` -> ``("kd.beta", 0)``; the value is parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError([f"override {text!r}: expected KEY=VALUE"])
    return key.strip(), yaml.safe_load(raw) if raw.strip() else None


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError([f"{key}: {p} is not a section"])
    node[parts[-1]] = value


def _check_type(hint, value) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        return any(_check_type(a, value) for a in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    if hint is list or origin is list:
        return isinstance(value, list)
    return True


def _build(cls, data: dict, prefix: str, errors: list, lines: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        where = f" (line {lines[path]})" if path in lines else ""
        if key not in hints:
            errors.append(f"{path}: unknown key{where}")
            continue
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            if not isinstance(value, dict):
                errors.append(f"{path}: expected a section{where}")
                continue
            kwargs[key] = _build(hint, value, f"{path}.", errors, lines)
        elif not _check_type(hint, value):
            errors.append(f"{path}: expected {_hint_name(hint)}, got {value!r}{where}")
        else:
            kwargs[key] = float(value) if hint is float else value
    return cls(**kwargs)


def _hint_name(hint) -> str:
    return getattr(hint, "__name__", None) or str(hint).replace("typing.", "")


def _semantic_checks(cfg: DistillConfig, lines: dict) -> list[str]:
    errors = []
    flat = _flatten(cfg.to_dict())

    def err(key, msg):
        where = f" (line {lines[key]})" if key in lines else ""
        errors.append(f"{key}: {msg}{where}")

    for key, choices in _CHOICES.items():
        if flat[key] not in choices:
            err(key, f"must be one of {', '.join(choices)}; got {flat[key]!r}")
    for key in _UNIT_INTERVAL:
        if not 0.0 <= flat[key] <= 1.0:
            err(key, f"must lie in [0, 1]; got {flat[key]}")
    for key in _NON_NEGATIVE:
        if flat[key] < 0:
            err(key, f"must be >= 0; got {flat[key]}")
    for key in _POSITIVE:
        if flat[key] <= 0:
            err(key, f"must be > 0; got {flat[key]}")
    if not 0.0 <= cfg.schedule.ema < 1.0:
        err("schedule.ema", f"must lie in [0, 1); got {cfg.schedule.ema}")
    for key in ("transform.patch_size", "transform.dim"):
        if flat[key] is not None and flat[key] < 1:
            err(key, f"must be >= 1 or null; got {flat[key]}")
    stages = cfg.model.stages
    if not stages or not all(
        isinstance(p, (list, tuple)) and len(p) == 2 and all(isinstance(s, str) for s in p)
        for p in stages
    ):
        err("model.stages", "must be a non-empty list of [student_stage, teacher_stage] pairs")
    elif cfg.model.stage_weights and len(cfg.model.stage_weights) != len(stages):
        err("model.stage_weights", f"needs {len(stages)} entries, got {len(cfg.model.stage_weights)}")
    if any(not isinstance(w, (int, float)) or w < 0 for w in cfg.model.stage_weights):
        err("model.stage_weights", "entries must be numbers >= 0")
    if cfg.dataset.name == "archive" and not cfg.dataset.path:
        err("dataset.path", "required when dataset.name is 'archive'")
    return errors


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def build_config(data: dict | None = None, overrides=(), lines: dict | None = None) -> DistillConfig:
    """Validate a nested dict (plus ``KEY=VALUE`` overrides) into a config."""
    data = json.loads(json.dumps(data or {}))
    lines = dict(lines or {})
    errors: list[str] = []
    for item in overrides:
        try:
            key, value = parse_override(item) if isinstance(item, str) else item
            _set_dotted(data, key, value)
            lines.pop(key, None)
        except ConfigError as e:
            errors.extend(e.messages)
    cfg = _build(DistillConfig, data, "", errors, lines)
    if not errors:
        errors.extend(_semantic_checks(cfg, lines))
    if errors:
        raise ConfigError(errors)
    return cfg


def _line_map(text: str) -> dict:
    lines = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                lines[path] = k.start_mark.line + 1
                walk(v, f"{path}.")

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return lines


def load_config(path, overrides=()) -> DistillConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError([f"{path}: not valid YAML: {e}"]) from e
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return build_config(data, overrides, _line_map(text))


def dump_config(cfg: DistillConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def mask_plan(cfg: DistillConfig) -> tuple[str, str, float]:
    """(pattern, schedule, pi0) implied by ``mask.strategy``.

    random/block/grid use a fixed ratio with that pattern; the dynamic
    strategies draw ``mask.pattern`` masks at the scheduled ratio.
    """
    s = cfg.mask.strategy
    if s in DYNAMIC_STRATEGIES:
        return cfg.mask.pattern, s, cfg.mask.pi0
    ratio = 0.75 if s == "grid" else cfg.mask.ratio
    return s, "fixed", ratio
