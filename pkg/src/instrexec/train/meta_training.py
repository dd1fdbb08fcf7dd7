"""Meta-controller training: soft architecture, soft fine-tune, then hard fine-tune on a frozen skill."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from ..agents import BatchController, ControllerSpec
from ..env.gridworld import N_ACTIONS, WorldConfig, reset, step
from ..meta import MetaConfig, init_params, meta_loss, save_meta, subtask_embed_fn
from ..skill import analogy_loss, stack_observations
from ..tasks import enumerate_analogies, sample_instructions, vocabulary
from ..tensor.core import NonFiniteError, backward
from ..tensor.optim import RMSProp
from .curriculum import META_RANGES, CurriculumState, record_and_adjust
from .gae import batched_gae
from .skill_training import TrainingDiverged, clip_grads, entropy_weight

META_STAGES = ("soft", "soft_finetune", "hard_finetune")


class MissingSoftCheckpoint(RuntimeError):
    pass


class VocabularyMismatch(ValueError):
    pass


@dataclass
class MetaTrainConfig:
    iterations: int = 2000
    batch: int = 16
    lr_soft: float = 2.5e-4
    lr_finetune: float = 1e-4
    smoothing: float = 0.97
    eps: float = 1e-6
    grad_clip: float = 5.0
    gamma: float = 0.99
    lam: float = 0.96
    eta: float = 0.001
    xi: float = 0.0               # analogy on subtask embeddings; off by default for the controller
    rho1: float = 1.0
    rho2: float = 1.0
    tau_dis: float = 3.0
    tau_diff: float = 3.0
    analogy_budget: int = 16
    value_weight: float = 0.5
    entropy_start: float = 0.015
    entropy_midpoint: float = 0.5
    episode_limit: int = 150
    curriculum: bool = True       # soft stage only; fine-tune stages sample the full ranges
    water_density: float = 0.05
    enemy_spawn_prob: float = 0.03

    def lr(self, stage):
        return self.lr_soft if stage == "soft" else self.lr_finetune


def stage_mode(stage):
    if stage not in META_STAGES:
        raise ValueError(f"unknown meta stage {stage!r}; expected one of {META_STAGES}")
    return "hard" if stage == "hard_finetune" else "soft"


def check_compatible(split, skill_cfg, meta_cfg):
    """The skill's task space and the controller's heads / vocabulary must agree with the split."""
    if (skill_cfg.n_task_actions, skill_cfg.n_task_objects) != (split.space.n_actions, split.space.n_objects):
        raise VocabularyMismatch(
            f"skill task space {(skill_cfg.n_task_actions, skill_cfg.n_task_objects)} does not match the split "
            f"{(split.space.n_actions, split.space.n_objects)}")
    if meta_cfg.heads != (split.space.n_actions, split.space.n_objects):
        raise VocabularyMismatch(f"controller heads {meta_cfg.heads} do not match the split")
    if meta_cfg.vocab != len(vocabulary()):
        raise VocabularyMismatch(f"controller vocabulary {meta_cfg.vocab} != {len(vocabulary())} words")


@dataclass
class MetaBatch:
    steps: list
    rows: list
    step_masks: list
    rewards: np.ndarray
    values: np.ndarray
    masks: np.ndarray
    bootstraps: np.ndarray
    success: np.ndarray
    steps_taken: np.ndarray
    total_reward: np.ndarray
    completed: np.ndarray
    update_rate: float


def collect_meta(spec, worlds, sentence_lists, episodes, rng):
    """Run one episode per instruction list in lockstep with the controller; keeps the meta graph."""
    n = len(worlds)
    states, obs = [], []
    for w, sents, e in zip(worlds, sentence_lists, episodes):
        s, o = reset(w, [x.instruction() for x in sents], episode=e)
        states.append(s)
        obs.append(o)
    ctrl = BatchController(spec, sentence_lists, rng)
    active = np.ones(n, dtype=bool)
    final = np.zeros(n, dtype=bool)
    steps, rows, step_masks, rewards, values, masks = [], [], [], [], [], []
    success = np.zeros(n, dtype=bool)
    bootstraps = np.zeros(n)
    taken = np.zeros(n, dtype=np.int64)
    total = np.zeros(n)
    c_sum, c_n = 0.0, 0
    while active.any() or final.any():
        idx = np.nonzero(active | final)[0]
        actions, out, _ = ctrl.act(stack_observations([obs[i] for i in idx]), idx)
        act_rows = active[idx]
        r_t, v_t, m_t = np.zeros(n), np.zeros(n), np.zeros(n)
        free = ~out.terms.forced & act_rows
        c_sum += float(out.terms.c[free].sum())
        c_n += int(free.sum())
        for j, i in enumerate(idx):
            if not act_rows[j]:
                # extra pass on the final observation: V(s_T) bootstraps a time-limit cut
                bootstraps[i] = 0.0 if success[i] else out.terms.value.data[j]
                final[i] = False
                continue
            states[i], obs[i], r, done, info = step(states[i], int(actions[j]), inplace=True)
            r_t[i], v_t[i], m_t[i] = r, out.terms.value.data[j], 1.0
            total[i] += r
            taken[i] += 1
            if done:
                active[i] = False
                success[i] = info["success"]
                final[i] = not success[i]
        steps.append(out.terms)
        rows.append(idx)
        step_masks.append(act_rows.astype(np.float64))
        rewards.append(r_t)
        values.append(v_t)
        masks.append(m_t)
    return MetaBatch(steps, rows, step_masks, np.array(rewards), np.array(values), np.array(masks), bootstraps,
                     success, taken, total, np.array([s.completed for s in states]),
                     c_sum / c_n if c_n else float("nan"))


@dataclass
class MetaRun:
    params: dict
    metrics: list
    optimizer: RMSProp
    curriculum: CurriculumState | None = None


def _episode_setup(tcfg, split, rng, curriculum):
    base = WorldConfig(water_density=tcfg.water_density, enemy_spawn_prob=tcfg.enemy_spawn_prob,
                       episode_limit=tcfg.episode_limit)
    world, count = curriculum.sample(rng, base)
    return world, sample_instructions(count, split, False, int(rng.integers(2**31)))


def train_meta(stage, skill, split, tcfg=None, meta_cfg=None, params=None, seed=0, start_iteration=0,
               iterations=None, optimizer_state=None, metrics_path=None, divergence_path=None, log=None,
               curriculum=None, gate="learned"):
    """Train the controller on top of ``skill = (skill_params, SkillConfig)``, which stays frozen.

    ``gate`` picks the variant: learned (ours), always (hier_short), termination (hier_long)
    or flat, which needs no skill and emits primitive actions.

    hard_finetune starts from soft-trained controller ``params`` and refuses to run without them.
    """
    mode = stage_mode(stage)
    flat = gate == "flat"
    tcfg = tcfg or MetaTrainConfig()
    if flat:
        skill_params, scfg = {}, None
        meta_cfg = meta_cfg or MetaConfig(heads=(N_ACTIONS,))
        if meta_cfg.heads != (N_ACTIONS,):
            raise VocabularyMismatch(f"flat controller needs a single {N_ACTIONS}-way head, got {meta_cfg.heads}")
    else:
        if skill is None:
            raise FileNotFoundError("meta training needs a trained skill")
        skill_params, scfg = skill
        meta_cfg = meta_cfg or MetaConfig(heads=(split.space.n_actions, split.space.n_objects))
        check_compatible(split, scfg, meta_cfg)
    if stage != "soft" and params is None:
        raise MissingSoftCheckpoint(f"{stage} starts from a soft-trained controller checkpoint")
    params = params if params is not None else init_params(meta_cfg, seed)
    frozen = {k: v.data.copy() for k, v in skill_params.items()}
    opt = RMSProp(params, tcfg.lr(stage), tcfg.smoothing, tcfg.eps)
    if optimizer_state is not None:
        opt.state = {k: v.copy() for k, v in optimizer_state.items()}
    total = tcfg.iterations if iterations is None else start_iteration + iterations
    adaptive = stage == "soft" and tcfg.curriculum
    if curriculum is None:
        curriculum = CurriculumState(0, META_RANGES)
    if not adaptive:
        curriculum = CurriculumState(curriculum.ranges.tiers - 1, curriculum.ranges)
    metrics = []
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for it in range(start_iteration, total):
            rng = np.random.default_rng([seed, 10 + META_STAGES.index(stage), it])
            setups = [_episode_setup(tcfg, split, rng, curriculum) for _ in range(tcfg.batch)]
            t0 = time.perf_counter()
            snapshot = {k: v.data.copy() for k, v in params.items()}
            spec = ControllerSpec(params, meta_cfg, mode, "always" if flat else gate, skill_params or None, scfg)
            batch = collect_meta(spec, [w for w, _ in setups], [s for _, s in setups],
                                 [it * tcfg.batch + b for b in range(tcfg.batch)], rng)
            analogy = None
            if tcfg.xi > 0 and not flat:
                ab = enumerate_analogies(split, tcfg.analogy_budget, seed=int(rng.integers(2**31)))
                analogy = analogy_loss(subtask_embed_fn(params, meta_cfg), ab, tcfg.tau_dis, tcfg.tau_diff)
            ent_w = entropy_weight(it, total, tcfg.entropy_start, tcfg.entropy_midpoint)
            try:
                adv, ret = batched_gae(batch.rewards, batch.values, batch.masks, batch.bootstraps, tcfg.gamma,
                                       tcfg.lam)
                loss = meta_loss(batch.steps, adv, ret, mode, tcfg.eta, tcfg.xi, analogy, tcfg.rho1, tcfg.rho2,
                                 tcfg.value_weight, ent_w, masks=batch.step_masks, rows=batch.rows)
                grads = backward(loss, leaves=list(params.values()))
                named = {k: grads[v] for k, v in params.items()}
                if not np.isfinite(loss.item()) or not all(np.isfinite(g).all() for g in named.values()):
                    raise NonFiniteError("non-finite loss or gradient")
            except NonFiniteError as exc:
                for k, v in snapshot.items():
                    params[k].data = v
                path = None
                if divergence_path:
                    path = str(divergence_path)
                    save_meta(path, params, meta_cfg, seed, {"stage": stage, "iteration": it, "diverged": True})
                raise TrainingDiverged(f"{stage} diverged at iteration {it}: {exc}", path) from exc
            named, gnorm = clip_grads(named, tcfg.grad_clip)
            opt.step(named)
            row = {
                "iteration": it,
                "stage": stage,
                "loss": loss.item(),
                "mean_reward": float(batch.total_reward.mean()),
                "success_rate": float(batch.success.mean()),
                "mean_steps": float(batch.steps_taken.mean()),
                "mean_completed": float(batch.completed.mean()),
                "update_rate": batch.update_rate,
                "entropy_weight": ent_w,
                "grad_norm": gnorm,
                "curriculum_tier": curriculum.tier,
                "seconds": time.perf_counter() - t0,
            }
            if adaptive:
                curriculum = record_and_adjust(curriculum, batch.success)
            metrics.append(row)
            if sink:
                sink.write(json.dumps(row) + "\n")
                sink.flush()
            if log:
                log(row)
    finally:
        if sink:
            sink.close()
    for k, v in skill_params.items():
        if not np.array_equal(v.data, frozen[k]):
            raise RuntimeError(f"skill parameter {k} was modified during meta training")
    return MetaRun(params, metrics, opt, curriculum)
