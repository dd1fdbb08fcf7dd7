"""Skill training: policy distillation from BFS teachers, then actor-critic fine-tuning."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..bench.oracles import teacher_distribution
from ..env.gridworld import N_ACTIONS, WorldConfig, reset, step, subtask_status
from ..skill import (
    ACTerms, SkillConfig, SkillState, analogy_loss, analogy_objective, distillation_loss, init_params, save_skill,
    skill_ac_loss, skill_forward, stack_observations, task_embed, termination_xent,
)
from ..tasks import enumerate_analogies
from ..tensor import ops
from ..tensor.core import NonFiniteError, Tensor, backward, no_grad
from ..tensor.optim import RMSProp
from .curriculum import CurriculumRanges, CurriculumState, record_and_adjust
from .gae import batched_gae

STAGES = ("distill", "actor_critic")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class SkillTrainConfig:
    iterations: int = 2000
    batch: int = 32               # episodes per update
    lr_distill: float = 3e-3       # desk scale; RMSProp moves each weight by about lr per step
    lr_ac: float = 2.5e-4
    smoothing: float = 0.97
    eps: float = 1e-6
    grad_clip: float = 5.0        # global-norm clip; 0 disables
    gamma: float = 0.99
    lam: float = 0.96
    alpha: float = 0.1
    xi: float = 1.0
    rho1: float = 1.0
    rho2: float = 1.0
    tau_dis: float = 3.0
    tau_diff: float = 3.0
    value_weight: float = 0.5
    entropy_start: float = 0.1
    entropy_midpoint: float = 0.5  # fraction of the stage at which the entropy weight reaches 0
    analogy_budget: int = 16
    teacher_mix: float = 0.5       # distillation: probability of executing the teacher's action
    episode_limit: int = 80
    curriculum: bool = True
    sizes: tuple = (5, 6, 7, 8)
    wall_density: tuple = (0.0, 0.1)
    object_density: tuple = (0.1, 0.8)
    water_density: float = 0.05
    enemy_spawn_prob: float = 0.03

    def lr(self, stage):
        return self.lr_distill if stage == "distill" else self.lr_ac


def entropy_weight(iteration, total, start=0.1, midpoint=0.5):
    """Linear decay from ``start`` to 0 at ``midpoint * total`` iterations, then 0."""
    end = midpoint * total
    if end <= 0 or iteration >= end:
        return 0.0
    return start * (1.0 - iteration / end)


@dataclass
class Batch:
    """One lockstep collection: [T, B] arrays plus graph terms."""

    terms: ACTerms
    teacher: list
    rewards: np.ndarray
    values: np.ndarray
    masks: np.ndarray
    bootstraps: np.ndarray
    success: np.ndarray
    steps: np.ndarray
    term_pred: list = field(default_factory=list)   # (prob, label) pairs over supervised rows
    total_reward: np.ndarray = None


def world_for(tcfg, rng, curriculum=None, objects=None):
    if curriculum is not None:
        base = WorldConfig(water_density=tcfg.water_density, enemy_spawn_prob=tcfg.enemy_spawn_prob,
                           episode_limit=tcfg.episode_limit, object_types=objects)
        return curriculum.sample(rng, base)[0]
    size = int(rng.choice(tcfg.sizes))
    return WorldConfig(height=size, width=size, wall_density=float(rng.uniform(*tcfg.wall_density)),
                       water_density=tcfg.water_density, object_density=float(rng.uniform(*tcfg.object_density)),
                       enemy_spawn_prob=tcfg.enemy_spawn_prob, episode_limit=tcfg.episode_limit,
                       seed=int(rng.integers(2**62)), object_types=objects)


def collect(params, scfg, space, tasks, worlds, episodes, rng, teacher_mix=0.0, greedy=False, want_teacher=False):
    """Run one episode per task in lockstep; finished episodes drop out of the batch.

    Each episode gets one extra forward pass on its final observation, which
    supervises termination (label from the oracle) and supplies V(s_T).
    """
    n = len(tasks)
    states, obs = [], []
    for g, w, e in zip(tasks, worlds, episodes):
        s, o = reset(w, [space.instruction(g)], episode=e)
        states.append(s)
        obs.append(o)
    goals = [space.instruction(g) for g in tasks]
    active = np.ones(n, dtype=bool)
    final = np.zeros(n, dtype=bool)
    hidden = (Tensor(np.zeros((n, scfg.hidden))), Tensor(np.zeros((n, scfg.hidden))))
    prev_rows = np.arange(n)
    prev_action = -np.ones(n, dtype=np.int64)
    terms, teacher = ACTerms(), []
    rewards, values, masks = [], [], []
    bootstraps = np.zeros(n)
    total_reward = np.zeros(n)
    success = np.zeros(n, dtype=bool)
    steps = np.zeros(n, dtype=np.int64)
    term_pred = []
    while active.any() or final.any():
        idx = np.nonzero(active | final)[0]
        pos = np.searchsorted(prev_rows, idx)
        h, c = hidden
        if len(idx) != len(prev_rows):
            h, c = ops.embedding_lookup(h, pos), ops.embedding_lookup(c, pos)
        out = skill_forward(stack_observations([obs[i] for i in idx]), [tasks[i] for i in idx],
                            SkillState(h, c, prev_action[idx]), params, scfg)
        act_rows = active[idx]
        labels = np.array([float(subtask_status(states[i], goals[i].verb, goals[i].obj, False, since=0))
                           for i in idx])
        term_pred += list(zip(out.term_prob.data, labels))
        probs = out.probs
        actions = np.zeros(len(idx), dtype=np.int64)
        dists = np.zeros((len(idx), N_ACTIONS))
        for j, i in enumerate(idx):
            if not act_rows[j]:
                continue
            if want_teacher:
                dists[j] = teacher_distribution(states[i], goals[i].verb, goals[i].obj)
            if want_teacher and rng.random() < teacher_mix:
                actions[j] = rng.choice(N_ACTIONS, p=dists[j])
            elif greedy:
                actions[j] = int(np.argmax(probs[j]))
            else:
                p = probs[j] / probs[j].sum()
                actions[j] = rng.choice(N_ACTIONS, p=p)
        r_t, v_t, m_t = np.zeros(n), np.zeros(n), np.zeros(n)
        for j, i in enumerate(idx):
            if not act_rows[j]:
                # final observation: bootstrap from V(s_T) only if the episode was cut by the limit
                bootstraps[i] = 0.0 if success[i] else out.value.data[j]
                final[i] = False
                continue
            states[i], obs[i], r, done, info = step(states[i], actions[j], inplace=True)
            r_t[i], v_t[i], m_t[i] = r, out.value.data[j], 1.0
            total_reward[i] += r
            steps[i] += 1
            if done:
                active[i] = False
                final[i] = True
                success[i] = info["success"]
        terms.log_probs.append(out.log_probs)
        terms.term_probs.append(out.term_prob)
        terms.values.append(out.value)
        terms.actions.append(actions)
        terms.masks.append(act_rows.astype(np.float64))
        terms.term_labels.append(labels)
        terms.term_masks.append(np.ones(len(idx)))
        terms.rows.append(idx)
        teacher.append(dists)
        rewards.append(r_t)
        values.append(v_t)
        masks.append(m_t)
        hidden = (out.h, out.c)
        prev_rows = idx
        prev_action = prev_action.copy()
        prev_action[idx] = actions
    return Batch(terms, teacher, np.array(rewards), np.array(values), np.array(masks), bootstraps,
                 success, steps, term_pred, total_reward)


def termination_accuracy(term_pred, balanced=True):
    """Accuracy of thresholding beta at 0.5; balanced = mean of the per-class accuracies."""
    if not term_pred:
        return float("nan")
    p = np.array([a for a, _ in term_pred])
    y = np.array([b for _, b in term_pred]) > 0.5
    hit = (p > 0.5) == y
    if not balanced:
        return float(hit.mean())
    parts = [hit[y].mean() if y.any() else None, hit[~y].mean() if (~y).any() else None]
    parts = [x for x in parts if x is not None]
    return float(np.mean(parts))


def _distill_loss(batch, alpha):
    """Returns (KL part, termination part) averaged over supervised rows."""
    terms = batch.terms
    n_pol = max(sum(m.sum() for m in terms.masks), 1.0)
    n_term = max(sum(m.sum() for m in terms.term_masks), 1.0)
    kl_total, term_total = Tensor(0.0), Tensor(0.0)
    for t, logp in enumerate(terms.log_probs):
        m = terms.masks[t]
        if m.any():
            dist = batch.teacher[t].copy()
            dist[m == 0] = 1.0 / N_ACTIONS  # rows without a teacher are masked out
            kl = distillation_loss(dist, ops.exp(logp), 0.0, None, 0.0, mask=m)
            kl_total = ops.add(kl_total, ops.scale(kl, m.sum() / n_pol))
        if alpha > 0:
            xent = termination_xent(terms.term_probs[t], terms.term_labels[t])
            term_total = ops.add(term_total, ops.sum(ops.mul(xent, Tensor(alpha * terms.term_masks[t] / n_term))))
    return kl_total, term_total


def clip_grads(grads, max_norm):
    if max_norm <= 0:
        return grads, float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads, norm


@dataclass
class SkillRun:
    params: dict
    metrics: list
    optimizer: RMSProp
    curriculum: CurriculumState | None = None


def train_skill(stage, split, tcfg=None, scfg=None, params=None, seed=0, start_iteration=0, iterations=None,
                optimizer_state=None, metrics_path=None, divergence_path=None, log=None, curriculum=None):
    """Run ``iterations`` updates of ``stage`` and return the trained parameters and per-iteration metrics.

    Every source of randomness derives from ``(seed, iteration)``, so a run resumed
    from a checkpoint at iteration k reproduces the remaining metrics exactly.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown skill stage {stage!r}; expected one of {STAGES}")
    tcfg = tcfg or SkillTrainConfig()
    scfg = scfg or SkillConfig(n_task_actions=split.space.n_actions, n_task_objects=split.space.n_objects)
    if not split.train:
        raise ValueError("split has no train tasks")
    params = params if params is not None else init_params(scfg, seed)
    opt = RMSProp(params, tcfg.lr(stage), tcfg.smoothing, tcfg.eps)
    if optimizer_state is not None:
        opt.state = {k: v.copy() for k, v in optimizer_state.items()}
    total = tcfg.iterations if iterations is None else start_iteration + iterations
    if curriculum is None and tcfg.curriculum:
        curriculum = CurriculumState(0, CurriculumRanges(sizes=tuple(tcfg.sizes), wall_density=tuple(tcfg.wall_density),
                                                         object_density=tuple(tcfg.object_density)))
    objects = tuple(split.space.objects)
    metrics = []
    train = list(split.train)
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for it in range(start_iteration, total):
            rng = np.random.default_rng([seed, STAGES.index(stage), it])
            tasks = [train[i] for i in rng.integers(0, len(train), tcfg.batch)]
            worlds = [world_for(tcfg, rng, curriculum, objects) for _ in tasks]
            episodes = [it * tcfg.batch + b for b in range(tcfg.batch)]
            t0 = time.perf_counter()
            snapshot = {k: v.data.copy() for k, v in params.items()}
            batch = collect(params, scfg, split.space, tasks, worlds, episodes, rng,
                            teacher_mix=tcfg.teacher_mix, want_teacher=stage == "distill")
            analogy = None
            if tcfg.xi > 0:
                ab = enumerate_analogies(split, tcfg.analogy_budget, seed=int(rng.integers(2**31)))
                analogy = analogy_loss(lambda gs: task_embed(gs, params, scfg), ab, tcfg.tau_dis, tcfg.tau_diff)
            ent_w = entropy_weight(it, total, tcfg.entropy_start, tcfg.entropy_midpoint)
            try:
                if stage == "distill":
                    kl, term = _distill_loss(batch, tcfg.alpha)
                    parts = {"kl": kl.item(), "termination_loss": term.item()}
                    loss = ops.add(kl, term)
                    if analogy is not None:
                        loss = ops.add(loss, ops.scale(analogy_objective(*analogy, tcfg.rho1, tcfg.rho2), tcfg.xi))
                else:
                    parts = {}
                    adv, ret = batched_gae(batch.rewards, batch.values, batch.masks, batch.bootstraps,
                                           tcfg.gamma, tcfg.lam)
                    loss = skill_ac_loss(batch.terms, adv, ret, tcfg.alpha, analogy, tcfg.xi, tcfg.rho1,
                                         tcfg.rho2, tcfg.value_weight, ent_w)
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
                    save_skill(path, params, scfg, seed, {"stage": stage, "iteration": it, "diverged": True})
                raise TrainingDiverged(f"{stage} diverged at iteration {it}: {exc}", path) from exc
            named, gnorm = clip_grads(named, tcfg.grad_clip)
            opt.step(named)
            row = {
                "iteration": it,
                "stage": stage,
                "loss": loss.item(),
                **parts,
                "analogy": [a.item() for a in analogy] if analogy is not None else None,
                "mean_reward": float(batch.total_reward.mean()),
                "success_rate": float(batch.success.mean()),
                "termination_accuracy": termination_accuracy(batch.term_pred),
                "mean_steps": float(batch.steps.mean()),
                "entropy_weight": ent_w,
                "grad_norm": gnorm,
                "curriculum_tier": curriculum.tier if curriculum else None,
                "seconds": time.perf_counter() - t0,
            }
            if curriculum is not None:
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
    return SkillRun(params, metrics, opt, curriculum)


def evaluate_skill(params, scfg, space, tasks, world, n_episodes=200, seed=10_000, greedy=False, batch=50):
    """Success rate, balanced termination accuracy and mean steps on fresh world seeds."""
    rng = np.random.default_rng(seed)
    succ, steps, preds, rewards = [], [], [], []
    with no_grad():
        for start in range(0, n_episodes, batch):
            k = min(batch, n_episodes - start)
            ts = [tasks[(start + i) % len(tasks)] for i in range(k)]
            ws = [WorldConfig(**{**asdict(world), "seed": seed}) for _ in range(k)]
            out = collect(params, scfg, space, ts, ws, [start + i for i in range(k)], rng, greedy=greedy)
            succ += list(out.success)
            steps += list(out.steps)
            rewards += list(out.total_reward)
            preds += out.term_pred
    return {
        "success_rate": float(np.mean(succ)),
        "termination_accuracy": termination_accuracy(preds),
        "termination_accuracy_raw": termination_accuracy(preds, balanced=False),
        "mean_steps": float(np.mean(steps)),
        "mean_reward": float(np.mean(rewards)),
        "episodes": n_episodes,
    }


def write_metrics(path, rows):
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows))
