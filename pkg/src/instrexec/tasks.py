"""Task parameters, train/unseen splits, analogy quadruples and sentences."""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .env.gridworld import INTERACT, PICK, VISIT, XFORM, Instruction
from .env.tables import default_tables
from .tensor import ops

INDEPENDENT, OBJECT_DEPENDENT = "independent", "object-dependent"
SCENARIOS = (INDEPENDENT, OBJECT_DEPENDENT)
ACTION_NAMES = {VISIT: "Visit", PICK: "Pick up", XFORM: "Transform", INTERACT: "Interact with"}


@dataclass(frozen=True, order=True)
class TaskParams:
    """One subtask: indices into the action list and the object list of a TaskSpace."""

    action: int
    obj: int

    def onehots(self, n_actions, n_objects):
        if not (0 <= self.action < n_actions and 0 <= self.obj < n_objects):
            raise ValueError(f"{self} outside a {n_actions}x{n_objects} task space")
        g1, g2 = np.zeros(n_actions), np.zeros(n_objects)
        g1[self.action] = 1
        g2[self.obj] = 1
        return g1, g2


def from_onehots(g1, g2):
    """Inverse of TaskParams.onehots; rejects anything that is not exactly one-hot."""
    for g in (g1, g2):
        g = np.asarray(g)
        if g.ndim != 1 or not np.isin(g, (0, 1)).all() or g.sum() != 1:
            raise ValueError(f"task parameter is not one-hot: {g}")
    return TaskParams(int(np.argmax(g1)), int(np.argmax(g2)))


@dataclass(frozen=True)
class TaskSpace:
    actions: tuple  # verbs, e.g. ("visit", "pickup", "transform")
    objects: tuple  # env object type ids

    @property
    def n_actions(self):
        return len(self.actions)

    @property
    def n_objects(self):
        return len(self.objects)

    def all_tasks(self):
        return [TaskParams(a, o) for a in range(self.n_actions) for o in range(self.n_objects)]

    def instruction(self, g):
        return Instruction(self.actions[g.action], self.objects[g.obj])

    def name(self, g, tables=None):
        tables = tables or default_tables()
        return f"[{ACTION_NAMES[self.actions[g.action]]}, {tables.object_types[self.objects[g.obj]]}]"


@dataclass
class TaskSplit:
    scenario: str
    space: TaskSpace
    train: tuple
    unseen: tuple
    groups: dict = field(default_factory=dict)  # object index -> "A" | "B"
    seed: int = 0

    def __post_init__(self):
        self.train = tuple(sorted(self.train))
        self.unseen = tuple(sorted(self.unseen))
        if set(self.train) & set(self.unseen):
            raise ValueError("train and unseen task sets overlap")
        if {g.action for g in self.train} != set(range(self.space.n_actions)):
            raise ValueError("some action never appears in a train task")
        if {g.obj for g in self.train} != set(range(self.space.n_objects)):
            raise ValueError("some object never appears in a train task")

    def to_dict(self, tables=None):
        tables = tables or default_tables()
        names = [tables.object_types[o] for o in self.space.objects]
        enc = lambda gs: [[self.space.actions[g.action], names[g.obj]] for g in gs]  # noqa: E731
        out = {"scenario": self.scenario, "actions": list(self.space.actions), "objects": names,
               "train": enc(self.train), "unseen": enc(self.unseen), "seed": self.seed}
        if self.groups:
            out["groups"] = {names[o]: grp for o, grp in sorted(self.groups.items())}
        return out

    @classmethod
    def from_dict(cls, raw, tables=None):
        tables = tables or default_tables()
        unknown = set(raw) - {"scenario", "actions", "objects", "train", "unseen", "groups", "seed"}
        if unknown:
            raise ValueError(f"unknown split keys: {sorted(unknown)}")
        space = TaskSpace(tuple(raw["actions"]), tuple(tables.type_id(n) for n in raw["objects"]))
        obj_index = {n: i for i, n in enumerate(raw["objects"])}
        dec = lambda pairs: tuple(TaskParams(space.actions.index(a), obj_index[o]) for a, o in pairs)  # noqa: E731
        groups = {obj_index[n]: g for n, g in (raw.get("groups") or {}).items()}
        return cls(raw["scenario"], space, dec(raw["train"]), dec(raw["unseen"]), groups, raw.get("seed", 0))

    def save(self, path, tables=None):
        Path(path).write_text(yaml.safe_dump(self.to_dict(tables), sort_keys=False))

    @classmethod
    def load(cls, path, tables=None):
        return cls.from_dict(yaml.safe_load(Path(path).read_text()), tables)


def _covered(train, n_actions, n_objects):
    return ({g.action for g in train} == set(range(n_actions))
            and {g.obj for g in train} == set(range(n_objects)))


def build_split(scenario, holdout_fraction, seed, objects=None, tables=None):
    """Hold out a fraction of task combinations for zero-shot evaluation.

    Independent: random combinations over {Visit, Pick up, Transform} x objects,
    keeping every action and object in at least one train task.
    Object-dependent: whole objects are held out of "Interact with" only.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if not 0 < holdout_fraction < 0.5:
        raise ValueError("holdout_fraction must be in (0, 0.5)")
    tables = tables or default_tables()
    objects = tuple(range(15)) if objects is None else tuple(objects)
    rng = np.random.default_rng(seed)
    if scenario == INDEPENDENT:
        space = TaskSpace((VISIT, PICK, XFORM), objects)
        tasks = space.all_tasks()
        n_hold = int(round(holdout_fraction * len(tasks)))
        unseen = []
        for i in rng.permutation(len(tasks)):
            if len(unseen) == n_hold:
                break
            cand = unseen + [tasks[i]]
            train = [g for g in tasks if g not in cand]
            # each action row and object column keeps a train entry, and no row/column loses more than its share
            if _covered(train, space.n_actions, space.n_objects) and _balanced(cand, space):
                unseen = cand
        if len(unseen) < n_hold or n_hold == 0:
            raise ValueError(f"cannot hold out {n_hold} of {len(tasks)} tasks with full coverage")
        train = [g for g in tasks if g not in unseen]
        return TaskSplit(scenario, space, tuple(train), tuple(unseen), {}, seed)

    space = TaskSpace((VISIT, PICK, XFORM, INTERACT), objects)
    groups = {}
    for i, o in enumerate(objects):
        grp = tables.group_of(o)
        if grp is None:
            raise ValueError(f"object {tables.object_types[o]} has no group")
        groups[i] = grp
    n_hold = int(round(holdout_fraction * len(objects)))
    held = []
    for i in rng.permutation(len(objects)):
        if len(held) == n_hold:
            break
        rest = [j for j in range(len(objects)) if j not in held + [int(i)]]
        # every group keeps at least two Interact-with objects so within-group analogies exist
        if all(sum(groups[j] == grp for j in rest) >= 2 for grp in set(groups.values())):
            held.append(int(i))
    if len(held) < n_hold or n_hold == 0:
        raise ValueError(f"cannot hold out {n_hold} objects from Interact-with")
    interact = space.actions.index(INTERACT)
    unseen = [TaskParams(interact, o) for o in held]
    train = [g for g in space.all_tasks() if g not in unseen]
    return TaskSplit(scenario, space, tuple(train), tuple(unseen), groups, seed)


def _balanced(unseen, space):
    per_obj = Counter(g.obj for g in unseen)
    per_act = Counter(g.action for g in unseen)
    return (max(per_obj.values()) <= space.n_actions - 1
            and max(per_act.values()) <= max(1, -(-len(unseen) // space.n_actions)) + 1)


# ---------------------------------------------------------------- analogies

@dataclass
class AnalogyBatch:
    sim: list = field(default_factory=list)   # (A, B, C, D) with A:B :: C:D
    dis: list = field(default_factory=list)   # (A, B, C, D) with A:B != C:D
    diff: list = field(default_factory=list)  # (A, B) with A != B


def is_analogy(split, a, b, c, d):
    """A:B :: C:D under the split's scenario.

    Generic parallelogram condition: the multisets {A, D} and {B, C} agree on
    actions and on objects.  In the object-dependent scenario a quadruple that
    involves "Interact with" across different objects only holds inside one group.
    """
    quad = (a, b, c, d)
    if Counter([a.action, d.action]) != Counter([b.action, c.action]):
        return False
    if Counter([a.obj, d.obj]) != Counter([b.obj, c.obj]):
        return False
    if split.scenario == OBJECT_DEPENDENT:
        interact = split.space.actions.index(INTERACT)
        objs = {g.obj for g in quad}
        if any(g.action == interact for g in quad) and len(objs) > 1:
            if len({split.groups[o] for o in objs}) > 1:
                return False
    return True


def enumerate_analogies(split, budget, seed):
    """Sample ``budget`` items of each kind, using train tasks only."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    train = list(split.train)
    tset = set(train)
    n_act, n_obj = split.space.n_actions, split.space.n_objects

    sim_pool, dis_pool = [], []
    for t1, t2 in itertools.permutations(range(n_act), 2):
        for x, y in itertools.permutations(range(n_obj), 2):
            quad = (TaskParams(t1, x), TaskParams(t1, y), TaskParams(t2, x), TaskParams(t2, y))
            if not all(g in tset for g in quad):
                continue
            (sim_pool if is_analogy(split, *quad) else dis_pool).append(quad)
            # near miss: swap the action of the last task, [V,X]:[V,Y] != [T,X]:[P,Y]
            for t3 in range(n_act):
                if t3 in (t1, t2):
                    continue
                miss = quad[:3] + (TaskParams(t3, y),)
                if miss[3] in tset and not is_analogy(split, *miss):
                    dis_pool.append(miss)
    batch = AnalogyBatch()
    if sim_pool:
        batch.sim = [sim_pool[i] for i in rng.integers(0, len(sim_pool), budget)]
    if dis_pool:
        batch.dis = [dis_pool[i] for i in rng.integers(0, len(dis_pool), budget)]
    if len(train) > 1:
        for _ in range(budget):
            i, j = rng.choice(len(train), size=2, replace=False)
            batch.diff.append((train[i], train[j]))
    return batch


# ---------------------------------------------------------------- sentences

TEMPLATES = (
    ("visit",),
    ("pick", "up"),
    ("transform",),
    ("pick", "up", "all"),
    ("transform", "all"),
)
TEMPLATE_GOALS = ((VISIT, False), (PICK, False), (XFORM, False), (PICK, True), (XFORM, True))
TEMPLATE_WORDS = ("visit", "pick", "up", "transform", "all")


def vocabulary(tables=None):
    """Fixed word list: template words then object names."""
    tables = tables or default_tables()
    return TEMPLATE_WORDS + tuple(tables.object_types)


@dataclass(frozen=True)
class Sentence:
    template: int
    obj: int  # env object type id

    def __post_init__(self):
        if not 0 <= self.template < len(TEMPLATES):
            raise ValueError(f"unknown template {self.template}")
        if not 0 <= self.obj < 15:
            raise ValueError(f"unknown object id {self.obj}")

    def words(self, tables=None):
        tables = tables or default_tables()
        return TEMPLATES[self.template] + (tables.object_types[self.obj],)

    def word_ids(self, tables=None):
        vocab = vocabulary(tables)
        return [vocab.index(w) for w in self.words(tables)]

    def text(self, tables=None):
        return " ".join(self.words(tables)).replace("pick up", "Pick up").capitalize()

    def instruction(self):
        verb, all_ = TEMPLATE_GOALS[self.template]
        return Instruction(verb, self.obj, all_)

    def subtask(self, space):
        """The subtask the sentence asks for, in ``space`` coordinates (None if outside it)."""
        verb, _ = TEMPLATE_GOALS[self.template]
        if verb not in space.actions or self.obj not in space.objects:
            return None
        return TaskParams(space.actions.index(verb), space.objects.index(self.obj))


def parse_sentence(text, tables=None):
    words = text.lower().split()
    for i, tmpl in enumerate(TEMPLATES):
        if tuple(words[:-1]) == tmpl:
            return Sentence(i, (tables or default_tables()).type_id(words[-1]))
    raise ValueError(f"not an instruction: {text!r}")


def _sentences_for(split, tasks):
    out = []
    for tmpl, (verb, _) in enumerate(TEMPLATE_GOALS):
        if verb not in split.space.actions:
            continue
        a = split.space.actions.index(verb)
        out += [Sentence(tmpl, split.space.objects[o]) for o in range(split.space.n_objects) if TaskParams(a, o) in tasks]
    return out


def sample_instructions(n, split, unseen, seed):
    """Sample a feasible instruction list.

    No sentence targets an object type after an "all" instruction already
    cleared it.  With ``unseen`` the pool includes held-out subtasks and at
    least one held-out sentence is guaranteed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    train_pool = _sentences_for(split, set(split.train))
    unseen_pool = _sentences_for(split, set(split.unseen)) if unseen else []
    pool = train_pool + unseen_pool
    out, dead = [], set()
    objects = {s.obj for s in pool}
    force = rng.integers(n) if unseen_pool else -1

    def ok(s, last):
        # an "all" sentence may not clear the last live object type while sentences remain
        return s.obj not in dead and (last or not TEMPLATE_GOALS[s.template][1] or len(objects - dead) > 1)

    for i in range(n):
        src = unseen_pool if i == force else pool
        cands = [s for s in src if ok(s, i == n - 1)]
        if not cands:
            cands = [s for s in pool if ok(s, i == n - 1)]
        s = cands[rng.integers(len(cands))]
        out.append(s)
        if TEMPLATE_GOALS[s.template][1]:
            dead.add(s.obj)
    return out


def encode_sentence(sentence, word_embeddings, tables=None):
    """Bag of words: sum of the sentence's word embedding rows."""
    ids = sentence.word_ids(tables) if isinstance(sentence, Sentence) else list(sentence)
    n_words = word_embeddings.shape[0]
    if any(not 0 <= i < n_words for i in ids):
        raise ValueError(f"word id out of vocabulary (size {n_words}): {ids}")
    return ops.sum(ops.embedding_lookup(word_embeddings, np.asarray(ids)), axis=0)
