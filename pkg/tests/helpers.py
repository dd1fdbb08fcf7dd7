"""Hand-built worlds for oracle tests."""
import numpy as np

from instrexec.env.gridworld import BLOCK, EMPTY, OBJ0, WATER, Instruction, WorldConfig, reset
from instrexec.env.tables import default_tables

CODES = {".": EMPTY, "#": BLOCK, "~": WATER}


def world(rows, instructions, agent, objects=None, enemy=None, limit=80, spawn=0.0):
    """``rows`` are strings over ``.#~`` plus letters mapped through ``objects`` (letter -> type name)."""
    tables = default_tables()
    objects = objects or {}
    h, w = len(rows), len(rows[0])
    cells = np.zeros((h, w), dtype=np.int8)
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            cells[r, c] = CODES[ch] if ch in CODES else OBJ0 + tables.type_id(objects[ch])
    cfg = WorldConfig(height=h, width=w, wall_density=0.0, water_density=0.0, object_density=0.0,
                      enemy_spawn_prob=spawn, episode_limit=limit)
    ins = [Instruction(*i) if isinstance(i, tuple) else i for i in instructions]
    state, _ = reset(cfg, ins)
    state.cells = cells
    state.agent = agent
    state.enemy = enemy
    state.completed = 0
    state.segment_start = 0
    return state


def tid(name):
    return default_tables().type_id(name)
