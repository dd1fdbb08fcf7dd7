"""Parameterized skill: policy, termination and value heads conditioned on a task embedding."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .env.gridworld import CH_BLOCK, N_ACTIONS, N_CHANNELS
from .tasks import TaskParams, from_onehots
from .tensor import archive, init, ops
from .tensor.core import Tensor

PROB_FLOOR = 1e-12


@dataclass
class SkillConfig:
    n_task_actions: int = 3
    n_task_objects: int = 15
    canvas: int = 10          # observations are padded to canvas x canvas
    conv_channels: int = 16
    task_channels: int = 16   # output of the task-predicted 1x1 conv
    spatial_channels: int = 16
    embed: int = 32
    fc: int = 64
    hidden: int = 64
    prev_action: bool = True  # feed the previous action to the recurrent core


def pad_observation(obs, canvas):
    """Embed an [18, H, W] observation in a canvas; outside cells read as blocks."""
    c, h, w = obs.shape
    if h > canvas or w > canvas:
        raise ValueError(f"observation {h}x{w} larger than canvas {canvas}")
    if h == canvas and w == canvas:
        return obs
    out = np.zeros((c, canvas, canvas))
    out[CH_BLOCK] = 1
    out[:, :h, :w] = obs
    return out


def stack_observations(obs_list):
    """Stack observations of mixed world sizes, padding each to the largest extent in the batch."""
    size = max(max(o.shape[1:]) for o in obs_list)
    return np.stack([pad_observation(o, size) for o in obs_list])


def init_params(cfg, seed=0):
    """Fresh skill parameters: orthogonal recurrent weights, fan-in uniform elsewhere, zero biases."""
    rng = np.random.default_rng(seed)
    u = lambda *s, fan_in=None: init.uniform_fan_in(rng, s, fan_in)  # noqa: E731
    f_in = cfg.fc + (N_ACTIONS if cfg.prev_action else 0)
    head_in = cfg.hidden + cfg.fc
    flat = cfg.spatial_channels * cfg.canvas * cfg.canvas
    p = {
        "embed_action": Tensor(rng.uniform(0.1, 1.0, (cfg.n_task_actions, cfg.embed)), requires_grad=True),
        "embed_object": Tensor(rng.uniform(0.1, 1.0, (cfg.n_task_objects, cfg.embed)), requires_grad=True),
        "conv1_w": u(cfg.conv_channels, N_CHANNELS, 1, 1, fan_in=N_CHANNELS),
        "conv1_b": init.zeros((cfg.conv_channels,)),
        "pconv_u": u(cfg.embed, cfg.task_channels * cfg.conv_channels, fan_in=cfg.embed * cfg.conv_channels),
        "pconv_b": init.zeros((cfg.task_channels,)),
        "conv3_w": u(cfg.spatial_channels, cfg.task_channels, 3, 3, fan_in=9 * cfg.task_channels),
        "conv3_b": init.zeros((cfg.spatial_channels,)),
        "fc_w": u(flat, cfg.fc),
        "fc_b": init.zeros((cfg.fc,)),
        "lstm_in_w": u(f_in, cfg.embed),
        "lstm_in_wp": u(cfg.embed, 4 * cfg.hidden),
        "lstm_in_b": init.zeros((4 * cfg.hidden,)),
        "lstm_wh": init.orthogonal(rng, (cfg.hidden, 4 * cfg.hidden)),
        "lstm_b": init.zeros((4 * cfg.hidden,)),
        "pi_w": u(head_in, N_ACTIONS),
        "pi_b": init.zeros((N_ACTIONS,)),
        "term_w": u(head_in, 1),
        "term_b": init.zeros((1,)),
        "value_w": u(head_in, 1),
        "value_b": init.zeros((1,)),
    }
    return p


def zero_params(cfg):
    return {k: Tensor(np.zeros_like(v.data), requires_grad=True) for k, v in init_params(cfg).items()}


@dataclass
class SkillState:
    h: np.ndarray
    c: np.ndarray
    prev_action: np.ndarray  # int, -1 = none

    @classmethod
    def zeros(cls, batch, cfg):
        return cls(np.zeros((batch, cfg.hidden)), np.zeros((batch, cfg.hidden)), -np.ones(batch, dtype=np.int64))


@dataclass
class SkillOutput:
    logits: Tensor
    log_probs: Tensor
    term_prob: Tensor
    value: Tensor
    h: Tensor
    c: Tensor
    embedding: Tensor = field(repr=False, default=None)

    @property
    def probs(self):
        return np.exp(self.log_probs.data)


def _as_task_arrays(g, cfg):
    """Accept TaskParams, a list of them, or a pair of one-hot arrays; return index arrays."""
    if isinstance(g, TaskParams):
        g = [g]
    if isinstance(g, tuple) and len(g) == 2 and not isinstance(g[0], TaskParams):
        g = [from_onehots(g[0], g[1])]
    acts = np.array([t.action for t in g], dtype=np.int64)
    objs = np.array([t.obj for t in g], dtype=np.int64)
    if (acts < 0).any() or (acts >= cfg.n_task_actions).any() or (objs < 0).any() or (objs >= cfg.n_task_objects).any():
        raise ValueError("task parameters outside the skill's task space")
    return acts, objs


def task_embed(g, params, cfg):
    """phi(g) = ReLU(W1 g1 * W2 g2), one row per task."""
    acts, objs = _as_task_arrays(g, cfg)
    return ops.relu(ops.mul(ops.embedding_lookup(params["embed_action"], acts),
                            ops.embedding_lookup(params["embed_object"], objs)))


def skill_forward(obs, g, state, params, cfg):
    """One step for a batch.  ``obs`` is [B, 18, H, W] (or a single [18, H, W])."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 3:
        obs = obs[None]
    if obs.ndim != 4 or obs.shape[1] != N_CHANNELS:
        raise ValueError(f"skill_forward: observation must be [B, {N_CHANNELS}, H, W], got {obs.shape}")
    if obs.shape[2] != cfg.canvas or obs.shape[3] != cfg.canvas:
        obs = np.stack([pad_observation(o, cfg.canvas) for o in obs])
    batch = obs.shape[0]
    e = task_embed(g, params, cfg)
    if e.shape[0] != batch:
        raise ValueError(f"skill_forward: {e.shape[0]} tasks for a batch of {batch}")
    x = Tensor(obs)
    h1 = ops.relu(ops.conv2d(x, params["conv1_w"], params["conv1_b"]))
    h2 = ops.relu(ops.predicted_conv2d(h1, e, params["pconv_u"], params["pconv_b"],
                                       out_channels=cfg.task_channels, kernel=1))
    h3 = ops.relu(ops.conv2d(h2, params["conv3_w"], params["conv3_b"], padding=1))
    f = ops.relu(ops.linear(ops.reshape(h3, (batch, -1)), params["fc_w"], params["fc_b"]))
    f_in = f
    if cfg.prev_action:
        pa = np.zeros((batch, N_ACTIONS))
        has = state.prev_action >= 0
        pa[np.nonzero(has)[0], state.prev_action[has]] = 1.0
        f_in = ops.concat([f, Tensor(pa)])
    z = ops.factored_linear(f_in, e, params["lstm_in_w"], params["lstm_in_wp"], params["lstm_in_b"])
    h_prev = state.h if isinstance(state.h, Tensor) else Tensor(state.h)
    c_prev = state.c if isinstance(state.c, Tensor) else Tensor(state.c)
    h, c = ops.lstm_cell(z, h_prev, c_prev, params["lstm_wh"], params["lstm_b"])
    head = ops.concat([h, f])
    logits = ops.linear(head, params["pi_w"], params["pi_b"])
    term = ops.reshape(ops.sigmoid(ops.linear(head, params["term_w"], params["term_b"])), (batch,))
    value = ops.reshape(ops.linear(head, params["value_w"], params["value_b"]), (batch,))
    return SkillOutput(logits, ops.log_softmax(logits), term, value, h, c, e)


def advance_state(state, out, actions):
    return SkillState(out.h.data, out.c.data, np.asarray(actions, dtype=np.int64))


# ---------------------------------------------------------------- losses

def _zero():
    return Tensor(0.0)


def analogy_loss(embed_fn, batch, tau_dis=3.0, tau_diff=3.0):
    """Contrastive analogy terms (L_sim, L_dis, L_diff) on task embeddings.

    ``embed_fn(tasks)`` maps a list of TaskParams to an [N, E] tensor.
    """
    if tau_dis <= 0 or tau_diff <= 0:
        raise ValueError("analogy thresholds must be positive")
    tasks = sorted({g for quad in batch.sim + batch.dis for g in quad} | {g for pair in batch.diff for g in pair})
    if not tasks:
        return _zero(), _zero(), _zero()
    index = {g: i for i, g in enumerate(tasks)}
    emb = embed_fn(tasks)

    def rows(items, k):
        return ops.embedding_lookup(emb, np.array([index[q[k]] for q in items]))

    def quad_gap(quads):
        d1 = ops.sub(rows(quads, 0), rows(quads, 1))
        d2 = ops.sub(rows(quads, 2), rows(quads, 3))
        return ops.sub(d1, d2)

    l_sim = l_dis = l_diff = _zero()
    if batch.sim:
        gap = quad_gap(batch.sim)
        l_sim = ops.mean(ops.sum(ops.mul(gap, gap), axis=-1))
    if batch.dis:
        hinge = ops.relu(ops.sub(tau_dis, ops.l2_norm(quad_gap(batch.dis))))
        l_dis = ops.mean(ops.mul(hinge, hinge))
    if batch.diff:
        d = ops.sub(rows(batch.diff, 0), rows(batch.diff, 1))
        hinge = ops.relu(ops.sub(tau_diff, ops.l2_norm(d)))
        l_diff = ops.mean(ops.mul(hinge, hinge))
    return l_sim, l_dis, l_diff


def analogy_objective(l_sim, l_dis, l_diff, rho1=1.0, rho2=1.0):
    return ops.add(l_sim, ops.add(ops.scale(l_dis, rho1), ops.scale(l_diff, rho2)))


def termination_xent(term_prob, target):
    """Binary cross-entropy per element, probabilities floored at 1e-12."""
    target = np.asarray(target, dtype=np.float64)
    pos = ops.mul(ops.log(term_prob, floor=PROB_FLOOR), Tensor(target))
    neg = ops.mul(ops.log(ops.sub(1.0, term_prob), floor=PROB_FLOOR), Tensor(1.0 - target))
    return ops.scale(ops.add(pos, neg), -1.0)


def distillation_loss(teacher_dist, student_probs, term_target, term_prob, alpha, mask=None):
    """Mean over rows of KL(teacher || student) + alpha * termination cross-entropy.

    ``student_probs`` is a tensor of probabilities; log terms are floored at 1e-12.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    teacher = np.asarray(teacher_dist, dtype=np.float64)
    if teacher.ndim == 1:
        teacher = teacher[None]
    if np.any(teacher < 0) or not np.allclose(teacher.sum(-1), 1.0):
        raise ValueError("teacher distribution must be a simplex")
    n = teacher.shape[0]
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    denom = max(mask.sum(), 1.0)
    t_log_t = np.where(teacher > 0, teacher * np.log(np.maximum(teacher, PROB_FLOOR)), 0.0).sum(-1)
    cross = ops.sum(ops.mul(ops.log(student_probs, floor=PROB_FLOOR), Tensor(teacher)), axis=-1)
    kl = ops.sub(Tensor(t_log_t), cross)
    loss = ops.scale(ops.sum(ops.mul(kl, Tensor(mask))), 1.0 / denom)
    if alpha > 0:
        term = termination_xent(term_prob, np.broadcast_to(np.asarray(term_target, dtype=np.float64), (n,)))
        loss = ops.add(loss, ops.scale(ops.sum(ops.mul(term, Tensor(mask))), alpha / denom))
    return loss


@dataclass
class ACTerms:
    """Per-step tensors collected during a graph-recording rollout."""

    log_probs: list = field(default_factory=list)   # [B, 13] per step
    term_probs: list = field(default_factory=list)  # [B]
    values: list = field(default_factory=list)      # [B]
    actions: list = field(default_factory=list)     # int [B]
    masks: list = field(default_factory=list)       # float [B], 1 where the step is real
    term_labels: list = field(default_factory=list)
    term_masks: list = field(default_factory=list)  # steps where termination is supervised
    rows: list = field(default_factory=list)        # episode index of each row, when steps are compacted


def skill_ac_loss(terms, advantages, returns, alpha=0.1, analogy=None, xi=1.0, rho1=1.0, rho2=1.0,
                  value_weight=0.5, entropy_weight=0.0):
    """Actor-critic loss with termination, value, entropy and analogy terms.

    ``advantages`` and ``returns`` are [T, B] arrays aligned with ``terms``;
    when ``terms.rows`` is filled, step ``t`` only covers episodes ``rows[t]``.
    Losses are averaged over real steps.
    """
    adv = np.asarray(advantages, dtype=np.float64)
    ret = np.asarray(returns, dtype=np.float64)
    if adv.shape[0] != len(terms.log_probs) or ret.shape != adv.shape:
        raise ValueError(f"advantage shape {adv.shape} does not match {len(terms.log_probs)} recorded steps")
    n = max(sum(m.sum() for m in terms.masks), 1.0)
    n_term = max(sum(m.sum() for m in terms.term_masks), 1.0)
    total = _zero()
    for t, logp in enumerate(terms.log_probs):
        m = terms.masks[t]
        adv_t, ret_t = (adv[t], ret[t]) if not terms.rows else (adv[t, terms.rows[t]], ret[t, terms.rows[t]])
        if m.any():
            chosen = ops.pick(logp, terms.actions[t])
            total = ops.add(total, ops.sum(ops.mul(chosen, Tensor(-adv_t * m / n))))
            verr = ops.sub(terms.values[t], Tensor(ret_t))
            total = ops.add(total, ops.sum(ops.mul(ops.mul(verr, verr), Tensor(value_weight * m / n))))
            if entropy_weight > 0:
                neg_ent = ops.sum(ops.mul(ops.exp(logp), logp), axis=-1)
                total = ops.add(total, ops.sum(ops.mul(neg_ent, Tensor(entropy_weight * m / n))))
    if alpha > 0:
        for t, tp in enumerate(terms.term_probs):
            tm = terms.term_masks[t]
            if tm.any():
                xent = termination_xent(tp, terms.term_labels[t])
                total = ops.add(total, ops.sum(ops.mul(xent, Tensor(alpha * tm / n_term))))
    if analogy is not None and xi > 0:
        total = ops.add(total, ops.scale(analogy_objective(*analogy, rho1=rho1, rho2=rho2), xi))
    return total


def config_dict(cfg):
    return asdict(cfg)


def save_skill(path, params, cfg, seed=0, manifest=None):
    manifest = dict(manifest or {})
    manifest["kind"] = "skill"
    manifest["skill_config"] = config_dict(cfg)
    archive.save(path, {k: v.data for k, v in params.items()}, seed, manifest)


def load_skill(path):
    """Returns (params, SkillConfig, manifest)."""
    entries, _, manifest = archive.load(path)
    if not manifest or manifest.get("kind") != "skill":
        raise ValueError(f"{path} is not a skill checkpoint")
    cfg = SkillConfig(**manifest["skill_config"])
    return {k: Tensor(v, requires_grad=True) for k, v in entries.items()}, cfg, manifest
