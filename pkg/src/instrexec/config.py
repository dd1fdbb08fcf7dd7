"""Run configuration: typed sections with defaults, dotted overrides, hashing and seed derivation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .env.gridworld import WorldConfig
from .meta import MetaConfig
from .skill import SkillConfig
from .train.meta_training import MetaTrainConfig
from .train.skill_training import SkillTrainConfig


class ConfigError(KeyError):
    """Unknown or malformed configuration key; ``key`` names the offending dotted path."""

    def __init__(self, key, msg=None):
        super().__init__(key)
        self.key = key
        self.msg = msg or f"unknown config key: {key}"

    def __str__(self):
        return self.msg


@dataclass
class SplitSection:
    scenario: str = "independent"
    file: str | None = None          # YAML split; generated from scenario/holdout/seed when absent
    holdout_fraction: float = 0.2
    seed: int = 0
    objects: list | None = None      # object names; None = all 15


@dataclass
class SkillNet:
    canvas: int = 10
    conv_channels: int = 16
    task_channels: int = 16
    spatial_channels: int = 16
    embed: int = 32
    fc: int = 64
    hidden: int = 64
    prev_action: bool = True


@dataclass
class MetaNet:
    word_embed: int = 32
    k_max: int = 20
    canvas: int = 10
    conv_channels: int = 16
    feat: int = 64
    g_embed: int = 16
    joint: int = 32
    context: int = 64
    hidden: int = 64
    shift_hidden: int = 32
    goal_hidden: int = 64


@dataclass
class CurriculumSection:
    advance: float = 0.85
    retreat: float = 0.5
    window: int = 100
    tiers: int = 4


@dataclass
class EvalSection:
    agents: list = field(default_factory=lambda: ["shortest_path", "near_optimal"])
    instruction_counts: list = field(default_factory=lambda: [4, 20])
    episodes_per_cell: int = 100
    engage_radius: int = 2
    mode: str = "hard"
    greedy: bool = False
    world: WorldConfig = field(default_factory=lambda: WorldConfig(episode_limit=600))


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    tables_file: str | None = None
    split: SplitSection = field(default_factory=SplitSection)
    skill_net: SkillNet = field(default_factory=SkillNet)
    skill_train: SkillTrainConfig = field(default_factory=SkillTrainConfig)
    meta_net: MetaNet = field(default_factory=MetaNet)
    meta_train: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self):
        return _plain(asdict(self))

    def digest(self):
        return config_hash(self)

    def skill_config(self, split):
        return SkillConfig(n_task_actions=split.space.n_actions, n_task_objects=split.space.n_objects,
                           **asdict(self.skill_net))

    def meta_config(self, heads):
        return MetaConfig(heads=tuple(heads), **asdict(self.meta_net))

    def curriculum_ranges(self, base):
        c = self.curriculum
        return replace(base, advance=c.advance, retreat=c.retreat, window=c.window, tiers=c.tiers)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(value, current, key):
    """Match the type of the default where it is unambiguous (YAML and --set values arrive loosely typed)."""
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(key, f"config key {key}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"config key {key}: expected a number, got {value!r}") from None
    if isinstance(current, tuple):
        return tuple(value)
    return value


def _merge(obj, raw, prefix=""):
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", f"config section {prefix.rstrip('.')} must be a mapping")
    names = {f.name for f in fields(obj)}
    updates = {}
    for key, value in raw.items():
        path = prefix + key
        if key not in names:
            raise ConfigError(path)
        current = getattr(obj, key)
        if is_dataclass(current):
            updates[key] = _merge(current, value, path + ".")
        else:
            updates[key] = _coerce(value, current, path)
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip(".") or "<root>", f"invalid config section {prefix.rstrip('.')}: {exc}") \
            from exc


def parse_override(text):
    """``a.b.c=value`` -> nested dict; the value is parsed as YAML (numbers, lists, booleans)."""
    if "=" not in text:
        raise ConfigError(text, f"override {text!r} is not KEY=VALUE")
    key, value = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(text, f"override {text!r} has an empty key")
    out = cur = {}
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = yaml.safe_load(value) if value.strip() else None
    return out


def _deep_update(base, extra):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def load_config(path=None, overrides=(), seed=None):
    """Defaults <- YAML file <- ``--set`` overrides <- ``--seed``; unknown keys raise ConfigError."""
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("<root>", f"{path}: top level must be a mapping")
    for text in overrides:
        _deep_update(raw, parse_override(text))
    if seed is not None:
        raw["seed"] = seed
    return _merge(RunConfig(), raw)


def config_hash(cfg):
    body = json.dumps(cfg.to_dict(), sort_keys=True, default=str)
    return hashlib.sha256(body.encode()).hexdigest()


def derive_seed(seed, stage, index=0):
    """Stage seeds: first 8 bytes of sha256("<seed>/<stage>/<index>")."""
    digest = hashlib.sha256(f"{int(seed)}/{stage}/{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
