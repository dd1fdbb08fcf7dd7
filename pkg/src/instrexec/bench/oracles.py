"""Scripted BFS policies: the distillation teacher and the two hand-designed baselines."""
from __future__ import annotations

from collections import deque

import numpy as np

from ..env.gridworld import (
    BLOCK, DIRECTIONS, INTERACT, MOVE, PICK, PICKUP, TRANSFORM, VISIT, WATER, XFORM, Action, action_kind, make_action,
    passable,
)

UNREACHABLE = -1


def _bfs(cells, sources, avoid_water, start):
    h, w = cells.shape
    dist = np.full((h, w), UNREACHABLE, dtype=np.int64)
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(s)
    while queue:
        r, c = queue.popleft()
        for dr, dc in DIRECTIONS:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w) or dist[nr, nc] != UNREACHABLE:
                continue
            code = cells[nr, nc]
            if code == BLOCK or (avoid_water and code == WATER and (nr, nc) != start):
                continue
            dist[nr, nc] = dist[r, c] + 1
            queue.append((nr, nc))
    return dist


def resolve_verb(state, verb, obj):
    if verb == INTERACT:
        return PICK if state.tables.group_of(obj) == "A" else XFORM
    return verb


def goal_cells(state, verb, obj):
    """Cells where the agent must stand to finish ``verb`` on ``obj`` (next to it, unless visiting)."""
    targets = [tuple(p) for p in np.argwhere(state.cells == 3 + obj)]
    if verb == VISIT:
        return targets
    cells = state.cells
    h, w = cells.shape
    out = set()
    for r, c in targets:
        for dr, dc in DIRECTIONS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and cells[nr, nc] != BLOCK:
                out.add((nr, nc))
    return sorted(out)


def distance_map(state, goals, avoid_water=True):
    """Moves needed from each cell to the nearest goal; water is avoided when a dry path exists."""
    dist = _bfs(state.cells, goals, avoid_water, state.agent)
    if avoid_water and dist[state.agent] == UNREACHABLE:
        dist = _bfs(state.cells, goals, False, state.agent)
    return dist


def goal_distance(state, verb, obj):
    verb = resolve_verb(state, verb, obj)
    goals = goal_cells(state, verb, obj)
    if not goals:
        return UNREACHABLE
    return int(distance_map(state, goals)[state.agent])


def _interaction_dirs(state, obj):
    r, c = state.agent
    h, w = state.cells.shape
    out = []
    for d, (dr, dc) in enumerate(DIRECTIONS):
        nr, nc = r + dr, c + dc
        if 0 <= nr < h and 0 <= nc < w and state.cells[nr, nc] == 3 + obj:
            out.append(d)
    return out


def _moves_down(state, dist):
    r, c = state.agent
    here = dist[r, c]
    h, w = dist.shape
    out = []
    for d, (dr, dc) in enumerate(DIRECTIONS):
        nr, nc = r + dr, c + dc
        if 0 <= nr < h and 0 <= nc < w and dist[nr, nc] == here - 1 and state.cells[nr, nc] != BLOCK:
            out.append(make_action(MOVE, d))
    return out


def optimal_actions(state, verb, obj):
    """All first actions on a shortest completion plan, in N, S, W, E order (NOOP if none)."""
    verb = resolve_verb(state, verb, obj)
    if verb != VISIT:
        dirs = _interaction_dirs(state, obj)
        if dirs:
            kind = PICKUP if verb == PICK else TRANSFORM
            return [make_action(kind, d) for d in dirs]
    goals = goal_cells(state, verb, obj)
    if not goals:
        return [Action.NOOP]
    dist = distance_map(state, goals)
    if dist[state.agent] <= 0:
        return [Action.NOOP]
    return _moves_down(state, dist) or [Action.NOOP]


def teacher_distribution(state, verb, obj, n_actions=13):
    """Uniform distribution over the optimal first actions."""
    acts = optimal_actions(state, verb, obj)
    dist = np.zeros(n_actions)
    dist[[int(a) for a in acts]] = 1.0 / len(acts)
    return dist


def shortest_path_policy(state):
    """Follow the current instruction along a BFS path; enemies are ignored."""
    ins = state.current_instruction()
    if ins is None:
        return Action.NOOP
    return optimal_actions(state, ins.verb, ins.obj)[0]


def _enemy_engagement(state, engage_radius):
    """Transform an adjacent enemy; otherwise end the step two cells from it.

    The enemy moves every step, changing the Manhattan distance by exactly one,
    so walking straight at it never ends adjacent.  Standing at distance two
    lets its own move bring it next to the agent.  Shortest-path moves are
    preferred, then other moves, then waiting.
    """
    enemy = state.enemy_pos()
    if enemy is None:
        return None
    ar, ac = state.agent
    er, ec = enemy
    if abs(ar - er) + abs(ac - ec) > engage_radius:
        return None
    for d, (dr, dc) in enumerate(DIRECTIONS):
        if (ar + dr, ac + dc) == enemy:
            return make_action(TRANSFORM, d)
    ins = state.current_instruction()
    preferred = [a for a in optimal_actions(state, ins.verb, ins.obj) if action_kind(a)[0] == MOVE]
    others = [make_action(MOVE, d) for d in range(len(DIRECTIONS))]
    for a in preferred + [a for a in others if a not in preferred] + [Action.NOOP]:
        r, c = ar, ac
        if a != Action.NOOP:
            dr, dc = DIRECTIONS[action_kind(a)[1]]
            r, c = ar + dr, ac + dc
            if not passable(state.cells, (r, c)) or state.cells[r, c] == WATER:
                continue
        if abs(r - er) + abs(c - ec) == 2:
            return a
    return None


def near_optimal_policy(state, engage_radius=2):
    """Shortest-path policy that detours to transform an enemy within ``engage_radius`` (Manhattan)."""
    if state.current_instruction() is None:
        return Action.NOOP
    engage = _enemy_engagement(state, engage_radius)
    return engage if engage is not None else shortest_path_policy(state)
