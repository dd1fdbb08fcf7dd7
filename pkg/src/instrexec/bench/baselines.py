"""Agent factory: the learned controller, its three ablations and the scripted policies."""
from __future__ import annotations

from pathlib import Path

from ..agents import ControllerAgent, ControllerSpec
from ..env.gridworld import N_ACTIONS
from ..meta import MetaConfig, init_params, load_meta
from ..skill import load_skill
from ..train.rollout import NoopAgent, RandomAgent, ScriptedAgent
from .oracles import near_optimal_policy, shortest_path_policy

BASELINES = ("flat", "hier_short", "hier_long")
LEARNED = ("ours",) + BASELINES
SCRIPTED = ("shortest_path", "near_optimal", "noop", "random")


class MissingCheckpoint(FileNotFoundError):
    """A dependent artifact (usually the skill) is required but absent."""


def _skill_from(skill_ckpt):
    if skill_ckpt is None:
        raise MissingCheckpoint("hierarchical agents need a skill checkpoint")
    if isinstance(skill_ckpt, (str, Path)):
        if not Path(skill_ckpt).exists():
            raise MissingCheckpoint(f"skill checkpoint not found: {skill_ckpt}")
        params, cfg, _ = load_skill(skill_ckpt)
        return params, cfg
    return skill_ckpt  # (params, SkillConfig)


def _meta_from(meta_ckpt, heads, seed):
    if meta_ckpt is None:
        cfg = MetaConfig(heads=heads)
        return init_params(cfg, seed), cfg
    if isinstance(meta_ckpt, (str, Path)):
        if not Path(meta_ckpt).exists():
            raise MissingCheckpoint(f"meta checkpoint not found: {meta_ckpt}")
        params, cfg, _ = load_meta(meta_ckpt)
        return params, cfg
    return meta_ckpt


def make_baseline(kind, skill_ckpt=None, meta_ckpt=None, mode="hard", seed=0, greedy=False, meta_cfg=None,
                  engage_radius=2):
    """Build an agent.

    flat       : meta architecture whose single head picks one of the 13 primitive actions
    hier_short : meta controller forced to update (c = 1) at every step
    hier_long  : update gate replaced by the skill's termination bit (c = 1 iff b = 1)
    ours       : learned update gate

    ``skill_ckpt`` / ``meta_ckpt`` are paths or already-loaded ``(params, config)`` pairs;
    without ``meta_ckpt`` a freshly initialised controller is used (wiring checks).
    """
    if kind in SCRIPTED:
        if kind == "shortest_path":
            return ScriptedAgent(shortest_path_policy, "shortest_path")
        if kind == "near_optimal":
            return ScriptedAgent(near_optimal_policy, "near_optimal", engage_radius=engage_radius)
        return NoopAgent() if kind == "noop" else RandomAgent()
    if kind not in LEARNED:
        raise ValueError(f"unknown agent kind {kind!r}")
    if kind == "flat":
        if meta_cfg is not None and meta_ckpt is None:
            meta_ckpt = (init_params(meta_cfg, seed), meta_cfg)
        params, cfg = _meta_from(meta_ckpt, (N_ACTIONS,), seed)
        if cfg.heads != (N_ACTIONS,):
            raise ValueError(f"flat agent needs a single {N_ACTIONS}-way head, checkpoint has {cfg.heads}")
        return ControllerAgent(ControllerSpec(params, cfg, "hard", "always", greedy=greedy), "flat")
    skill_params, scfg = _skill_from(skill_ckpt)
    heads = (scfg.n_task_actions, scfg.n_task_objects)
    if meta_cfg is not None and meta_ckpt is None:
        meta_ckpt = (init_params(meta_cfg, seed), meta_cfg)
    params, cfg = _meta_from(meta_ckpt, heads, seed)
    if cfg.heads != heads:
        raise ValueError(f"controller heads {cfg.heads} do not match the skill's task space {heads}")
    gate = {"ours": "learned", "hier_short": "always", "hier_long": "termination"}[kind]
    return ControllerAgent(ControllerSpec(params, cfg, mode, gate, skill_params, scfg, greedy), kind)
