"""2D grid-world with objects, water, blocks and a wandering enemy."""
from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .tables import BECOMES, BLOCKED, ENEMY, REMOVED, default_tables

N_OBJECT_TYPES = 15
N_CHANNELS = 3 + N_OBJECT_TYPES
CH_AGENT, CH_BLOCK, CH_WATER = 0, 1, 2

# cell codes
EMPTY, BLOCK, WATER = 0, 1, 2
OBJ0 = 3

TIME_PENALTY = -0.1
WATER_PENALTY = -0.3
ENEMY_REWARD = 0.9
SUCCESS_REWARD = 1.0


class Action(IntEnum):
    NOOP = 0
    MOVE_N = 1
    MOVE_S = 2
    MOVE_W = 3
    MOVE_E = 4
    PICKUP_N = 5
    PICKUP_S = 6
    PICKUP_W = 7
    PICKUP_E = 8
    TRANSFORM_N = 9
    TRANSFORM_S = 10
    TRANSFORM_W = 11
    TRANSFORM_E = 12


N_ACTIONS = len(Action)
DIRECTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))  # N, S, W, E
DIR_NAMES = "NSWE"
MOVE, PICKUP, TRANSFORM = 0, 1, 2


def action_kind(a):
    """(kind, direction index) for a non-noop action, else (None, None)."""
    a = int(a)
    if a == 0:
        return None, None
    return (a - 1) // 4, (a - 1) % 4


def make_action(kind, direction):
    return Action(1 + 4 * kind + direction)


VISIT, PICK, XFORM, INTERACT = "visit", "pickup", "transform", "interact"
VERBS = (VISIT, PICK, XFORM, INTERACT)


@dataclass(frozen=True)
class Instruction:
    """Env-level goal: a verb applied to an object type, optionally to all of them."""

    verb: str
    obj: int
    all: bool = False

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        if not 0 <= self.obj < N_OBJECT_TYPES:
            raise ValueError(f"object id {self.obj} out of range")
        if self.all and self.verb not in (PICK, XFORM):
            raise ValueError("only pickup/transform have an 'all' variant")


class GenerationError(RuntimeError):
    pass


class EpisodeDone(RuntimeError):
    pass


@dataclass
class WorldConfig:
    height: int = 10
    width: int = 10
    wall_density: float = 0.05
    water_density: float = 0.05
    object_density: float = 0.1
    enemy_spawn_prob: float = 0.03
    enemy_lifetime: int = 10
    episode_limit: int = 80
    seed: int = 0
    object_types: tuple | None = None  # distractor palette (type ids); None = all 15
    max_retries: int = 50

    def __post_init__(self):
        if not (2 <= self.height <= 10 and 2 <= self.width <= 10):
            raise ValueError("height and width must be in [2, 10]")
        if not 0 <= self.wall_density <= 0.1:
            raise ValueError("wall_density must be in [0, 0.1]")
        if not 0 <= self.water_density <= 0.1:
            raise ValueError("water_density must be in [0, 0.1]")
        if not 0 <= self.object_density <= 0.8:
            raise ValueError("object_density must be in [0, 0.8]")
        if not 0 <= self.enemy_spawn_prob <= 1:
            raise ValueError("enemy_spawn_prob must be in [0, 1]")
        if self.enemy_lifetime < 1 or self.episode_limit < 1:
            raise ValueError("enemy_lifetime and episode_limit must be positive")
        if self.object_types is not None:
            self.object_types = tuple(int(t) for t in self.object_types)
            if not self.object_types or any(not 0 <= t < N_OBJECT_TYPES for t in self.object_types):
                raise ValueError("object_types palette must be non-empty type ids")


@dataclass
class GridState:
    cells: np.ndarray  # int8 [H, W] cell codes
    agent: tuple
    enemy: tuple | None  # (row, col, remaining lifetime)
    steps: int
    instructions: tuple
    completed: int
    segment_start: int
    events: tuple  # (step, kind, type) with kind in {"pickup", "transform"}; type -1 = enemy
    rng: random.Random
    config: WorldConfig
    tables: object = field(repr=False)
    done: bool = False

    def copy(self):
        rng = random.Random()
        rng.setstate(self.rng.getstate())
        return replace(self, cells=self.cells.copy(), rng=rng)

    @property
    def shape(self):
        return self.cells.shape

    def count(self, obj):
        return int((self.cells == OBJ0 + obj).sum())

    def object_at(self, pos):
        code = int(self.cells[pos])
        return code - OBJ0 if code >= OBJ0 else None

    def enemy_pos(self):
        return None if self.enemy is None else (self.enemy[0], self.enemy[1])

    def current_instruction(self):
        if self.completed < len(self.instructions):
            return self.instructions[self.completed]
        return None


# --------------------------------------------------------------------- generation

def passable(cells, pos):
    h, w = cells.shape
    r, c = pos
    return 0 <= r < h and 0 <= c < w and cells[r, c] != BLOCK


def _connected(cells):
    free = list(zip(*np.nonzero(cells != BLOCK)))
    if not free:
        return False
    seen = {free[0]}
    queue = deque([free[0]])
    while queue:
        r, c = queue.popleft()
        for dr, dc in DIRECTIONS:
            nxt = (r + dr, c + dc)
            if nxt not in seen and passable(cells, nxt):
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(free)


def required_counts(instructions):
    """Minimum copies of each object type an instruction list needs on the grid."""
    need = {}
    for ins in instructions:
        if ins.all:
            need[ins.obj] = max(need.get(ins.obj, 0), 1)
        else:
            need[ins.obj] = need.get(ins.obj, 0) + 1
    # an 'all' instruction must still see at least one copy after earlier consumers
    for ins in instructions:
        if ins.all:
            before = sum(1 for j in instructions if j.obj == ins.obj and not j.all)
            need[ins.obj] = max(need[ins.obj], before + 1)
    return need


def _generate(config, instructions, rng):
    h, w = config.height, config.width
    n = h * w
    need = required_counts(instructions)
    palette = config.object_types or tuple(range(N_OBJECT_TYPES))
    for _ in range(config.max_retries):
        cells = np.zeros((h, w), dtype=np.int8)
        order = rng.permutation(n)
        n_block = int(round(config.wall_density * n))
        cells.flat[order[:n_block]] = BLOCK
        if not _connected(cells):
            continue
        rest = order[n_block:]
        n_water = int(round(config.water_density * n))
        cells.flat[rest[:n_water]] = WATER
        free = rest[n_water:]
        n_free = len(free)
        n_req = sum(need.values())
        n_obj = max(int(round(config.object_density * n_free)), n_req)
        n_obj = min(n_obj, n_free - 1)
        if n_req > n_obj:
            continue
        objs = [t for t, k in sorted(need.items()) for _ in range(k)]
        objs += list(rng.choice(palette, size=n_obj - len(objs))) if n_obj > len(objs) else []
        slots = free[rng.permutation(n_free)]
        for pos, t in zip(slots, objs):
            cells.flat[pos] = OBJ0 + int(t)
        agent_flat = int(slots[n_obj])
        return cells, (agent_flat // w, agent_flat % w)
    raise GenerationError(
        f"could not place {sum(need.values())} required objects in a {h}x{w} world after {config.max_retries} tries")


def reset(config, instructions, tables=None, episode=0):
    """Generate a world for ``instructions``; deterministic in (config.seed, episode)."""
    instructions = tuple(instructions)
    if not instructions:
        raise ValueError("instruction list must be non-empty")
    tables = tables or default_tables()
    rng = np.random.default_rng([config.seed & (2**63 - 1), episode])
    cells, agent = _generate(config, instructions, rng)
    state = GridState(cells=cells, agent=agent, enemy=None, steps=0, instructions=instructions,
                      completed=0, segment_start=0, events=(), tables=tables,
                      rng=random.Random(int(rng.integers(2**63))), config=config)
    _advance_instructions(state)
    return state, observe(state)


# --------------------------------------------------------------------- observation

_LUT = np.zeros((OBJ0 + N_OBJECT_TYPES, N_CHANNELS))
_LUT[BLOCK, CH_BLOCK] = 1
_LUT[WATER, CH_WATER] = 1
for _k in range(N_OBJECT_TYPES):
    _LUT[OBJ0 + _k, 3 + _k] = 1


def observe(state):
    """Binary [18, H, W] tensor; an enemy shows as block+water on an otherwise empty cell."""
    obs = _LUT[state.cells].transpose(2, 0, 1).copy()
    obs[CH_AGENT][state.agent] = 1
    if state.enemy is not None:
        r, c, _ = state.enemy
        obs[CH_BLOCK, r, c] = 1
        obs[CH_WATER, r, c] = 1
    return obs


# --------------------------------------------------------------------- completion

def _segment_events(state, since):
    return [e for e in state.events if e[0] >= since]


def subtask_status(state, verb, obj, all_=False, since=None):
    """Whether the goal (verb, obj[, all]) is satisfied in ``state``.

    Event-based goals only count pickups/transforms at or after step ``since``
    (default: the start of the current instruction segment).
    """
    if all_:
        return state.count(obj) == 0
    if verb == VISIT:
        return state.object_at(state.agent) == obj
    since = state.segment_start if since is None else since
    if verb == INTERACT:
        group = state.tables.group_of(obj)
        verb = PICK if group == "A" else XFORM
    kind = "pickup" if verb == PICK else "transform"
    return any(k == kind and t == obj for _, k, t in _segment_events(state, since))


def instruction_done(state, ins, since=None):
    return subtask_status(state, ins.verb, ins.obj, ins.all, since)


def _advance_instructions(state):
    while state.completed < len(state.instructions) and instruction_done(state, state.instructions[state.completed]):
        state.completed += 1
        state.segment_start = state.steps


# --------------------------------------------------------------------- dynamics

def _in_bounds(cells, pos):
    return 0 <= pos[0] < cells.shape[0] and 0 <= pos[1] < cells.shape[1]


def _enemy_moves(state, r, c):
    cells = state.cells
    out = []
    for dr, dc in DIRECTIONS:
        nxt = (r + dr, c + dc)
        if _in_bounds(cells, nxt) and cells[nxt] == EMPTY and nxt != state.agent:
            out.append(nxt)
    return out


def _enemy_dynamics(state, killed):
    cfg = state.config
    if state.enemy is not None:
        r, c, life = state.enemy
        moves = _enemy_moves(state, r, c)
        if moves:
            r, c = moves[state.rng.randrange(len(moves))]
        life -= 1
        state.enemy = (r, c, life) if life > 0 else None
    elif not killed and state.rng.random() < cfg.enemy_spawn_prob:
        empty = [tuple(p) for p in np.argwhere(state.cells == EMPTY) if tuple(p) != state.agent]
        if empty:
            r, c = empty[state.rng.randrange(len(empty))]
            state.enemy = (r, c, cfg.enemy_lifetime)


def step(state, action, inplace=False):
    """Apply ``action``; returns (state', obs, reward, done, info).

    ``info["components"]`` holds the reward split (time, water, enemy, success).
    """
    if state.done:
        raise EpisodeDone("step() called on a finished episode")
    action = Action(int(action))
    s = state if inplace else state.copy()
    water = enemy_bonus = success = 0.0
    killed = False
    kind, d = action_kind(action)
    if kind is not None:
        dr, dc = DIRECTIONS[d]
        target = (s.agent[0] + dr, s.agent[1] + dc)
        if kind == MOVE:
            if passable(s.cells, target):
                s.agent = target
                if s.cells[target] == WATER:
                    water = WATER_PENALTY
        elif _in_bounds(s.cells, target):
            enemy_here = s.enemy is not None and (s.enemy[0], s.enemy[1]) == target
            obj = s.object_at(target)
            if kind == TRANSFORM and enemy_here:
                s.enemy = None
                killed = True
                enemy_bonus = ENEMY_REWARD
                s.events = s.events + ((s.steps, "transform", -1),)
            elif obj is not None and kind == PICKUP:
                s.cells[target] = EMPTY
                s.events = s.events + ((s.steps, "pickup", obj),)
            elif obj is not None and kind == TRANSFORM:
                outcome, new = s.tables.transform_rule(obj)
                if outcome == REMOVED:
                    s.cells[target] = EMPTY
                elif outcome == BECOMES:
                    s.cells[target] = OBJ0 + new
                if outcome != BLOCKED:
                    s.events = s.events + ((s.steps, "transform", obj),)
    _enemy_dynamics(s, killed)
    s.steps += 1
    before = s.completed
    _advance_instructions(s)
    all_done = s.completed == len(s.instructions)
    if all_done:
        success = SUCCESS_REWARD
    truncated = not all_done and s.steps >= s.config.episode_limit
    s.done = all_done or truncated
    reward = TIME_PENALTY + water + enemy_bonus + success
    info = {
        "components": (TIME_PENALTY, water, enemy_bonus, success),
        "completed": s.completed,
        "newly_completed": s.completed - before,
        "success": all_done,
        "truncated": truncated,
    }
    return s, observe(s), reward, s.done, info


def transform_rule(obj, tables=None):
    return (tables or default_tables()).transform_rule(obj)


# --------------------------------------------------------------------- traces

def trace_record(step_index, action, reward, done, completed):
    return {"step": step_index, "action": int(action), "reward": reward, "done": bool(done), "completed": completed}


def write_trace(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
