"""Object tables: type names, transform outcomes, object groups."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

BLOCK, WATER, ENEMY = "block", "water", "enemy"
REMOVED, BLOCKED, BECOMES = "removed", "blocked", "becomes"


@dataclass(frozen=True)
class WorldTables:
    object_types: tuple
    transform: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.object_types) != 15 or len(set(self.object_types)) != 15:
            raise ValueError("world tables need exactly 15 distinct object types")
        for src, dst in self.transform.items():
            if src not in self.object_types or dst not in self.object_types:
                raise ValueError(f"transform {src}->{dst} names an unknown type")
        for name, members in self.groups.items():
            unknown = set(members) - set(self.object_types)
            if unknown:
                raise ValueError(f"group {name} has unknown types {sorted(unknown)}")

    def type_id(self, name):
        try:
            return self.object_types.index(name)
        except ValueError:
            raise KeyError(f"unknown object type {name!r}") from None

    def group_of(self, obj):
        name = obj if isinstance(obj, str) else self.object_types[obj]
        for group, members in self.groups.items():
            if name in members:
                return group
        return None

    def transform_rule(self, obj):
        """Outcome of transforming ``obj`` (type id or name): (kind, new_type_id or None)."""
        if obj in (BLOCK, WATER):
            return BLOCKED, None
        if obj == ENEMY:
            return REMOVED, None
        if isinstance(obj, int) and not 0 <= obj < len(self.object_types):
            raise KeyError(f"unknown object type id {obj}")
        name = self.object_types[obj] if isinstance(obj, int) else obj
        if name not in self.object_types:
            raise KeyError(f"unknown object type {obj!r}")
        if name in self.transform:
            return BECOMES, self.type_id(self.transform[name])
        return REMOVED, None

    def to_dict(self):
        return {"object_types": list(self.object_types), "transform": dict(self.transform),
                "groups": {k: list(v) for k, v in self.groups.items()}}

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_tables(path=None):
    """Load tables from a YAML file; ``None`` loads the shipped defaults."""
    if path is None:
        text = resources.files("instrexec.data").joinpath("world.yaml").read_text()
    else:
        text = Path(path).read_text()
    raw = yaml.safe_load(text)
    unknown = set(raw) - {"object_types", "transform", "groups"}
    if unknown:
        raise ValueError(f"unknown keys in world tables: {sorted(unknown)}")
    return WorldTables(tuple(raw["object_types"]), dict(raw.get("transform") or {}),
                       {k: tuple(v) for k, v in (raw.get("groups") or {}).items()})


_DEFAULT = None


def default_tables():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_tables()
    return _DEFAULT


def use_tables(tables):
    """Install ``tables`` as the process-wide default (the CLI does this for a configured table file)."""
    global _DEFAULT
    _DEFAULT = tables
    return tables
