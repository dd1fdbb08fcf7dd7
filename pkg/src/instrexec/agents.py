"""Learned agents: the meta controller driving the frozen skill, and the flat variant."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .meta import batch_memory, initial_state, meta_step, with_termination, word_counts
from .skill import SkillState, skill_forward
from .tasks import TaskParams
from .tensor.core import Tensor, no_grad
from .train.rollout import Agent

GATES = ("learned", "always", "termination")


@dataclass
class ControllerSpec:
    meta_params: dict
    meta_cfg: object
    mode: str = "hard"
    gate: str = "learned"         # learned | always (hier_short) | termination (hier_long)
    skill_params: dict = None     # None for the flat controller
    skill_cfg: object = None
    greedy: bool = False

    def __post_init__(self):
        if self.gate not in GATES:
            raise ValueError(f"unknown gate {self.gate!r}; expected one of {GATES}")

    @property
    def flat(self):
        return self.skill_params is None


class BatchController:
    """Runs B episodes in lockstep: skill termination -> meta step -> skill (or primitive) action.

    ``act`` takes the rows still running; finished rows drop out and their
    recurrent state is gathered away, which keeps the graph differentiable.
    """

    def __init__(self, spec, sentence_lists, rng):
        self.spec = spec
        cfg = spec.meta_cfg
        self.rng = rng
        self.counts, self.mask = word_counts(sentence_lists, cfg.k_max, cfg.vocab)
        n = len(sentence_lists)
        self.lengths = np.array([len(s) for s in sentence_lists])
        memory = batch_memory(self.counts, spec.meta_params["word_embed"])
        self.state = initial_state(memory, self.lengths, cfg)
        self.rows = np.arange(n)
        if not spec.flat:
            hid = spec.skill_cfg.hidden
            self.skill_h = np.zeros((n, hid))
            self.skill_c = np.zeros((n, hid))
            self.skill_prev = -np.ones(n, dtype=np.int64)

    def _skill(self, obs, g, rows):
        scfg = self.spec.skill_cfg
        tasks = [TaskParams(int(a), int(o)) for a, o in g]
        with no_grad():
            return skill_forward(obs, tasks, SkillState(self.skill_h[rows], self.skill_c[rows], self.skill_prev[rows]),
                                 self.spec.skill_params, scfg)

    def act(self, obs, idx):
        """Actions for episodes ``idx`` (ascending) given their observations [len(idx), 18, H, W]."""
        spec, cfg = self.spec, self.spec.meta_cfg
        idx = np.asarray(idx)
        obs = np.asarray(obs)
        state = self.state
        if len(idx) != len(self.rows) or (idx != self.rows).any():
            state = state.rows(np.searchsorted(self.rows, idx))
        n = len(idx)
        g_prev = state.g
        has_prev = (g_prev >= 0).all(axis=1)
        b = np.zeros(n)
        beta = np.full(n, np.nan)
        prev_out = None
        if not spec.flat and has_prev.any():
            prev_out = self._skill(obs, np.where(has_prev[:, None], g_prev, 0), idx)
            beta = np.where(has_prev, prev_out.term_prob.data, np.nan)
            b = np.where(has_prev, (prev_out.term_prob.data > 0.5).astype(np.float64), 0.0)
        state = with_termination(state, b)
        force_c = None
        if spec.gate == "always":
            force_c = np.ones(n)
        elif spec.gate == "termination":
            force_c = b
        memory = batch_memory(self.counts[idx], spec.meta_params["word_embed"])
        out = meta_step(spec.mode, obs, state, memory, spec.meta_params, cfg, self.rng, force_c=force_c)
        self.state, self.rows = out.state, idx
        g = out.g
        if spec.flat:
            actions = g[:, 0].copy()
        else:
            changed = ~has_prev | (g != g_prev).any(axis=1)
            self.skill_h[idx[changed]] = 0.0
            self.skill_c[idx[changed]] = 0.0
            self.skill_prev[idx[changed]] = -1
            probs = np.zeros((n, 13))
            h_new = np.zeros((n, spec.skill_cfg.hidden))
            c_new = np.zeros_like(h_new)
            if prev_out is not None:
                keep = ~changed
                probs[keep] = prev_out.probs[keep]
                h_new[keep], c_new[keep] = prev_out.h.data[keep], prev_out.c.data[keep]
            if changed.any():
                fresh = self._skill(obs[changed], g[changed], idx[changed])
                probs[changed] = fresh.probs
                h_new[changed], c_new[changed] = fresh.h.data, fresh.c.data
            if spec.greedy:
                actions = probs.argmax(axis=1)
            else:
                actions = np.array([self.rng.choice(13, p=p / p.sum()) for p in probs])
            self.skill_h[idx], self.skill_c[idx] = h_new, c_new
            self.skill_prev[idx] = actions
        extras = {"b": b, "beta": beta, "g": g}
        return actions, out, extras


class ControllerAgent(Agent):
    """Per-episode wrapper of BatchController for rollout_batch / evaluate."""

    def __init__(self, spec, name):
        self.spec = spec
        self.name = name

    def start(self, state, spec, rng):
        if not spec.sentences:
            raise ValueError(f"{self.name} needs the instruction sentences of the episode")
        return _Episode(BatchController(self.spec, [list(spec.sentences)], rng))


class _Episode:
    def __init__(self, ctrl):
        self.ctrl = ctrl

    def act(self, state, obs):
        with no_grad():
            actions, out, extras = self.ctrl.act(obs[None], np.array([0]))
        g = out.g[0]
        diag = {"c": float(out.diag["c"][0]), "b": float(extras["b"][0]), "g": [int(x) for x in g],
                "value": float(out.terms.value.data[0]), "update_prob": float(out.diag["update_prob"][0])}
        return int(actions[0]), diag


def as_tensor_dict(params):
    return {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True) for k, v in params.items()}
