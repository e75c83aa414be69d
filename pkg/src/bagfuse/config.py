"""Experiment configuration: a flat ``key: value`` text file with defaults.

Dotted keys address sub-sections (``optimizer.lr``, ``phase1.batch_size``);
list values use brackets (``seeds: [1, 2, 3]``, nested for class groups:
``split_override: [[0, 1], [2]]``).  Unknown keys are rejected so typos never
silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ScalingConfig
from .optim import OptimizerConfig

__all__ = [
    "ExperimentConfig",
    "Phase1Config",
    "Phase2Config",
    "SyntheticSpec",
    "parse_config",
    "parse_config_text",
    "serialize_config",
    "parse_dataset_field",
]

_SYNTH_RE = re.compile(r"^synthetic:(\d+)x(\d+)@(\d+),(\d+),(\d+)$")


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int
    per_class: int
    channels: int
    height: int
    width: int


def parse_dataset_field(value: str):
    """Return a SyntheticSpec for ``synthetic:...`` values, else the path string."""
    if value.startswith("synthetic:"):
        m = _SYNTH_RE.match(value)
        if not m:
            raise ConfigError(
                f"dataset: malformed synthetic spec {value!r} "
                "(expected synthetic:<classes>x<per_class>@<C,H,W>)"
            )
        spec = SyntheticSpec(*(int(g) for g in m.groups()))
        if spec.classes < 2:
            raise ConfigError("dataset: synthetic spec needs at least 2 classes")
        return spec
    return value


@dataclass(frozen=True)
class Phase1Config:
    batch_size: int = 25
    max_epochs: int = 200


@dataclass(frozen=True)
class Phase2Config:
    batch_size: int = 10
    patience: int = 10
    max_epochs: int = 150


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    input_size: int = 32
    channel_means: tuple = (0.5, 0.5, 0.5)
    channel_stds: tuple = (0.25, 0.25, 0.25)
    ensemble_size: int = 2
    seeds: tuple = (1, 2, 3, 4, 5)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scaling: ScalingConfig = field(default_factory=ScalingConfig)
    activation: str = "silu"
    resize_kernel: str = "bilinear"
    ensemble_module_list: tuple = ()
    split_override: tuple = ()

    def validate(self) -> "ExperimentConfig":
        if not self.dataset:
            raise ConfigError("dataset: required key is missing")
        parse_dataset_field(self.dataset)
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble_size: must be >= 1, got {self.ensemble_size}")
        if not self.seeds:
            raise ConfigError("seeds: must be non-empty")
        if self.input_size < 1:
            raise ConfigError(f"input_size: must be >= 1, got {self.input_size}")
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise ConfigError("channel_means/channel_stds: need exactly 3 values")
        if any(s <= 0 for s in self.channel_stds):
            raise ConfigError(f"channel_stds: must be positive, got {self.channel_stds}")
        if self.phase1.batch_size < 1 or self.phase2.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.phase1.max_epochs < 0 or self.phase2.max_epochs < 1:
            raise ConfigError("max_epochs: phase1 >= 0, phase2 >= 1")
        if self.phase2.patience < 1:
            raise ConfigError(f"phase2.patience: must be >= 1, got {self.phase2.patience}")
        if self.optimizer.rectify:
            raise ConfigError("optimizer.rectify: the rectified variant is not supported")
        if self.activation not in ("silu", "relu"):
            raise ConfigError(f"activation: must be silu or relu, got {self.activation!r}")
        if self.resize_kernel not in ("bilinear", "nearest"):
            raise ConfigError(f"resize_kernel: must be bilinear or nearest, got {self.resize_kernel!r}")
        if self.split_override:
            for group in self.split_override:
                if not isinstance(group, tuple) or not all(isinstance(c, int) for c in group):
                    raise ConfigError("split_override: expected a list of class-id lists")
        return self


# key -> (section, field, parser)
def _scalar(tok: str):
    tok = tok.strip()
    if tok in ("true", "True"):
        return True
    if tok in ("false", "False"):
        return False
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        pass
    return tok.strip("'\"")


def _parse_value(tok: str):
    tok = tok.strip()
    if not tok.startswith("["):
        return _scalar(tok)
    if not tok.endswith("]"):
        raise ConfigError(f"unterminated list value: {tok!r}")
    items, depth, cur = [], 0, ""
    for ch in tok[1:-1]:
        if ch == "[":
            depth += 1
            cur += ch
        elif ch == "]":
            depth -= 1
            cur += ch
        elif ch == "," and depth == 0:
            items.append(cur)
            cur = ""
        else:
            cur += ch
    if cur.strip():
        items.append(cur)
    return tuple(_parse_value(item) for item in items if item.strip() != "")


def _expect(key: str, value, kind) -> None:
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")


_KNOWN_KEYS = {
    "dataset": str,
    "input_size": int,
    "channel_means": tuple,
    "channel_stds": tuple,
    "ensemble_size": int,
    "seeds": tuple,
    "phase1.batch_size": int,
    "phase1.max_epochs": int,
    "phase2.batch_size": int,
    "phase2.patience": int,
    "phase2.max_epochs": int,
    "optimizer.lr": float,
    "optimizer.beta1": float,
    "optimizer.beta2": float,
    "optimizer.eps": float,
    "optimizer.weight_decay": float,
    "optimizer.decoupled": bool,
    "optimizer.rectify": bool,
    "scaling.phi": float,
    "scaling.alpha": float,
    "scaling.beta": float,
    "scaling.gamma": float,
    "activation": str,
    "resize_kernel": str,
    "ensemble_module_list": tuple,
    "split_override": tuple,
}


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key: value', got {raw!r}")
        key, _, tok = line.partition(":")
        key = key.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        value = _parse_value(tok)
        _expect(key, value, _KNOWN_KEYS[key])
        values[key] = value

    if "dataset" not in values:
        raise ConfigError(f"{source}: missing required key 'dataset'")

    def section(prefix: str, cls):
        kwargs = {}
        for key, value in values.items():
            if key.startswith(prefix + "."):
                kwargs[key[len(prefix) + 1 :]] = value
        try:
            return cls(**kwargs)
        except Exception as exc:  # field validation inside the dataclass
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{prefix}: {exc}") from exc

    top = {k: v for k, v in values.items() if "." not in k}
    cfg = ExperimentConfig(
        **top,
        phase1=section("phase1", Phase1Config),
        phase2=section("phase2", Phase2Config),
        optimizer=section("optimizer", OptimizerConfig),
        scaling=section("scaling", ScalingConfig),
    )
    return cfg.validate()


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text(encoding="utf-8"), source=str(path))


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Emit every key in the file format; parse(serialize(cfg)) == cfg."""
    lines = []
    flat = {
        "dataset": cfg.dataset,
        "input_size": cfg.input_size,
        "channel_means": cfg.channel_means,
        "channel_stds": cfg.channel_stds,
        "ensemble_size": cfg.ensemble_size,
        "seeds": cfg.seeds,
        "activation": cfg.activation,
        "resize_kernel": cfg.resize_kernel,
        "ensemble_module_list": cfg.ensemble_module_list,
        "split_override": cfg.split_override,
    }
    for prefix, sub in (("phase1", cfg.phase1), ("phase2", cfg.phase2), ("optimizer", cfg.optimizer), ("scaling", cfg.scaling)):
        for f in dataclasses.fields(sub):
            flat[f"{prefix}.{f.name}"] = getattr(sub, f.name)
    for key in _KNOWN_KEYS:
        lines.append(f"{key}: {_format_value(flat[key])}")
    return "\n".join(lines) + "\n"
