"""Experiment configuration: a YAML file validated against dataclass schemas.

Every section is optional; omitted keys take the defaults below.  Errors
name the offending key path (``embed_s.steps: expected int, got str``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .attacks import AttackConfig
from .data import TaskConfig
from .model import ModelConfig
from .watermark_b import EmbedConfigB
from .watermark_s import EmbedConfigS

SCHEMES = ("B", "S", "trigger_baseline")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the key path."""


@dataclass
class DataConfig:
    n_train: int = 4000
    n_test: int = 1000
    n_extract: int = 200
    n_attacker: int = 2000
    finetune_task_seed: int = 1


@dataclass
class TrainConfig:
    epochs: int = 6
    lr: float = 3e-3
    batch_size: int = 32


@dataclass
class TriggerConfig:
    pattern: list = field(default_factory=lambda: [60, 61, 62])
    poison_rate: float = 0.1
    epochs: int = 3
    lr: float = 1e-3


@dataclass
class SweepConfig:
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3
    prune_ratios: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    prune_granularity: str = "weight_magnitude"
    quantize_bits: list = field(default_factory=lambda: [8, 6, 5, 4, 3, 2, 1])


@dataclass
class ExperimentConfig:
    seed: int = 0
    scheme: str = "B"
    family: str = "heads_and_within"
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    embed_b: EmbedConfigB = field(default_factory=EmbedConfigB)
    embed_s: EmbedConfigS = field(default_factory=EmbedConfigS)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    attacks: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["attacks"] = [asdict(a) for a in self.attacks]
        return out

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form; includes the dataset generator parameters."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _check_type(path: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def build(cls, raw, path: str):
    """Instantiate dataclass ``cls`` from a mapping, checking keys and types."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(raw).__name__}")
    defaults = cls() if cls is not AttackConfig else None
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(f"{where}: unknown key")
        if defaults is None:
            kwargs[key] = value
            continue
        default = getattr(defaults, key)
        if is_dataclass(default):
            kwargs[key] = build(type(default), value, where)
        elif key == "attacks":
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected a list of attack mappings")
            kwargs[key] = [build(AttackConfig, a, f"{where}[{i}]") for i, a in enumerate(value)]
        else:
            kwargs[key] = _check_type(where, value, default)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.scheme not in SCHEMES:
        raise ConfigError(f"scheme: must be one of {SCHEMES}, got {cfg.scheme!r}")
    if cfg.task.vocab_size != cfg.model.vocab_size:
        raise ConfigError(f"task.vocab_size: {cfg.task.vocab_size} does not match model.vocab_size "
                          f"{cfg.model.vocab_size}")
    longest = cfg.task.seq_len + len(cfg.trigger.pattern)
    if longest > cfg.model.max_seq_len:
        raise ConfigError(f"task.seq_len: sequences with trigger ({longest}) exceed model.max_seq_len "
                          f"{cfg.model.max_seq_len}")
    bad = [t for t in cfg.trigger.pattern if not cfg.model.vocab_size - cfg.task.n_reserved <= t < cfg.model.vocab_size]
    if bad:
        raise ConfigError(f"trigger.pattern: tokens {bad} are not reserved ids")
    from .permutation import FAMILIES
    if cfg.family not in FAMILIES:
        raise ConfigError(f"family: must be one of {FAMILIES}")
    for name in ("n_train", "n_test", "n_extract"):
        if getattr(cfg.data, name) < 0:
            raise ConfigError(f"data.{name}: must be non-negative")
    return cfg


def load(path=None, overrides: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"<file>: not valid YAML ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"<file>: cannot read {path} ({exc.strerror})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"<root>: expected a mapping, got {type(raw).__name__}")
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    return validate(build(ExperimentConfig, raw, ""))
