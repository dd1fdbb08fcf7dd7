"""Meta controller: instruction memory, pointer shifts, subtask policy and a learned update gate."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .env.gridworld import N_CHANNELS
from .skill import PROB_FLOOR, analogy_objective, pad_observation
from .tasks import encode_sentence, vocabulary
from .tensor import archive, init, ops
from .tensor.core import Tensor

MODES = ("soft", "hard")
SHIFTS = (-1, 0, 1)


@dataclass
class MetaConfig:
    vocab: int = len(vocabulary())
    word_embed: int = 32
    k_max: int = 20
    canvas: int = 10
    conv_channels: int = 16
    feat: int = 64
    g_embed: int = 16
    joint: int = 32
    context: int = 64       # width of s_t
    hidden: int = 64        # h = [h_low, h_high]
    shift_hidden: int = 32
    goal_hidden: int = 64
    heads: tuple = (3, 15)  # arity of each subtask parameter; (13,) for the flat baseline

    def __post_init__(self):
        self.heads = tuple(int(h) for h in self.heads)
        if self.hidden % 4:
            raise ValueError("hidden must be divisible by 4 (h_low:h_high = 1:3)")

    @property
    def low(self):
        return self.hidden // 4


# ---------------------------------------------------------------- memory and pointer

@dataclass
class InstructionMemory:
    """Column k of ``matrix`` (E x K) is the bag-of-words embedding of sentence k."""

    matrix: Tensor
    sentences: tuple

    @property
    def size(self):
        return len(self.sentences)


def build_memory(sentences, word_embeddings, k_max=20):
    sentences = tuple(sentences)
    if not sentences:
        raise ValueError("instruction list must be non-empty")
    if len(sentences) > k_max:
        raise ValueError(f"{len(sentences)} instructions exceed K_max={k_max}")
    cols = [ops.reshape(encode_sentence(s, word_embeddings), (-1, 1)) for s in sentences]
    return InstructionMemory(ops.concat(cols, axis=-1), sentences)


def word_counts(sentence_lists, k_max, vocab):
    """[B, K_max, V] word-count tensor and [B, K_max] presence mask."""
    counts = np.zeros((len(sentence_lists), k_max, vocab))
    mask = np.zeros((len(sentence_lists), k_max))
    for b, sents in enumerate(sentence_lists):
        if not sents or len(sents) > k_max:
            raise ValueError(f"episode {b}: need 1..{k_max} instructions, got {len(sents)}")
        for k, s in enumerate(sents):
            for w in s.word_ids():
                counts[b, k, w] += 1
            mask[b, k] = 1
    return counts, mask


def batch_memory(counts, word_embeddings):
    """[B, K, E] memory from word counts (same bag-of-words sums as build_memory)."""
    b, k, v = counts.shape
    flat = ops.matmul(Tensor(counts.reshape(b * k, v)), word_embeddings)
    return ops.reshape(flat, (b, k, -1))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def shift_pointer(l, p, lengths=None):
    """p'[k] = l[-1] p[k+1] + l[0] p[k] + l[+1] p[k-1]; mass pushed past either end stays on the end index.

    ``l`` is [B, 3] ordered (-1, 0, +1), ``p`` is [B, K]; ``lengths`` gives the
    number of real instructions per row (default K).  Numpy inputs give numpy output.
    """
    numpy_in = not isinstance(l, Tensor) and not isinstance(p, Tensor)
    l, p = _as_tensor(l), _as_tensor(p)
    squeeze = p.data.ndim == 1
    if squeeze:
        l, p = ops.reshape(l, (1, 3)), ops.reshape(p, (1, -1))
    n, k = p.shape
    lengths = np.full(n, k) if lengths is None else np.asarray(lengths)
    last = np.zeros((n, k))
    last[np.arange(n), lengths - 1] = 1.0
    first = np.zeros((n, k))
    first[:, 0] = 1.0
    if k == 1:
        out = p
    else:
        zero = Tensor(np.zeros((n, 1)))
        back = ops.concat([ops.slice_last(p, 1, k), zero])      # p[k+1]
        back = ops.add(back, ops.mul(ops.slice_last(p, 0, 1), Tensor(first)))
        fwd = ops.concat([zero, ops.slice_last(p, 0, k - 1)])   # p[k-1]
        overflow = ops.sum(ops.mul(p, Tensor(last)), axis=-1, keepdims=True)
        fwd = ops.add(ops.mul(fwd, Tensor(np.cumsum(last[:, ::-1], axis=1)[:, ::-1])), ops.mul(overflow, Tensor(last)))
        out = ops.add(ops.add(ops.mul(ops.slice_last(l, 0, 1), back), ops.mul(ops.slice_last(l, 1, 2), p)),
                      ops.mul(ops.slice_last(l, 2, 3), fwd))
    if squeeze:
        out = ops.reshape(out, (-1,))
    return out.data if numpy_in else out


def retrieve(memory, p):
    """r = M p for batched memory [B, K, E] and pointer [B, K]."""
    b, k = p.shape
    return ops.sum(ops.mul(memory, ops.reshape(p, (b, k, 1))), axis=1)


# ---------------------------------------------------------------- parameters

def init_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    u = lambda *s, fan_in=None: init.uniform_fan_in(rng, s, fan_in)  # noqa: E731
    flat = cfg.conv_channels * cfg.canvas * cfg.canvas
    g_in = cfg.g_embed + cfg.word_embed + 1
    p = {
        "word_embed": u(cfg.vocab, cfg.word_embed, fan_in=cfg.word_embed),
        "conv1_w": u(cfg.conv_channels, N_CHANNELS, 1, 1, fan_in=N_CHANNELS),
        "conv1_b": init.zeros((cfg.conv_channels,)),
        "pconv_u": u(cfg.joint, cfg.conv_channels * cfg.conv_channels, fan_in=cfg.joint * cfg.conv_channels),
        "pconv_b": init.zeros((cfg.conv_channels,)),
        "fc_w": u(flat, cfg.feat),
        "fc_b": init.zeros((cfg.feat,)),
        "joint_w": u(g_in, cfg.joint),
        "joint_b": init.zeros((cfg.joint,)),
        "ctx_w": u(cfg.feat, cfg.joint),
        "ctx_wp": u(cfg.joint, cfg.context),
        "ctx_b": init.zeros((cfg.context,)),
        "lstm_wx": u(cfg.context, 4 * cfg.hidden),
        "lstm_wh": init.orthogonal(rng, (cfg.hidden, 4 * cfg.hidden)),
        "lstm_b": init.zeros((4 * cfg.hidden,)),
        "update_w": u(cfg.context + cfg.hidden, 1),
        "update_b": init.zeros((1,)),
        "shift_w1": u(cfg.hidden, cfg.shift_hidden),
        "shift_b1": init.zeros((cfg.shift_hidden,)),
        "shift_w2": u(cfg.shift_hidden, 3),
        "shift_b2": init.zeros((3,)),
        "goal_w": u(cfg.hidden + cfg.word_embed, cfg.goal_hidden),
        "goal_b": init.zeros((cfg.goal_hidden,)),
        "value_w": u(2 * cfg.k_max + cfg.goal_hidden, 1),
        "value_b": init.zeros((1,)),
    }
    for i, n in enumerate(cfg.heads):
        # one extra row per table is the learned "null" parameter used before the first decision
        p[f"g_embed_{i}"] = Tensor(rng.uniform(0.1, 1.0, (n + 1, cfg.g_embed)), requires_grad=True)
        p[f"head_w_{i}"] = u(cfg.goal_hidden, n)
        p[f"head_b_{i}"] = init.zeros((n,))
    return p


def zero_params(cfg):
    return {k: Tensor(np.zeros_like(v.data), requires_grad=True) for k, v in init_params(cfg).items()}


# ---------------------------------------------------------------- state

@dataclass
class MetaState:
    p: Tensor            # [B, K_max] pointer
    r: Tensor            # [B, E] retrieved instruction
    h: Tensor            # [B, H] context, [h_low | h_high]
    cell: Tensor         # [B, H] LSTM cell
    g: np.ndarray        # [B, n_heads] previous subtask, -1 = null
    b: np.ndarray        # [B] previous termination bit
    c: np.ndarray        # [B] previous update weight
    lengths: np.ndarray  # [B] number of instructions

    @property
    def batch(self):
        return len(self.lengths)

    def rows(self, idx):
        """Sub-batch for rows ``idx`` (differentiable gather on the tensor fields)."""
        idx = np.asarray(idx)
        take = lambda t: ops.embedding_lookup(t, idx)  # noqa: E731
        return MetaState(take(self.p), take(self.r), take(self.h), take(self.cell), self.g[idx], self.b[idx],
                         self.c[idx], self.lengths[idx])


def initial_state(memory, lengths, cfg):
    """p = one-hot(0), r = M p, null g, b = 0; the first step always updates (c = 1)."""
    n = len(lengths)
    p = np.zeros((n, cfg.k_max))
    p[:, 0] = 1.0
    p = Tensor(p)
    return MetaState(p, retrieve(memory, p), Tensor(np.zeros((n, cfg.hidden))), Tensor(np.zeros((n, cfg.hidden))),
                     -np.ones((n, len(cfg.heads)), dtype=np.int64), np.zeros(n), np.ones(n), np.asarray(lengths))


# ---------------------------------------------------------------- forward pieces

def subtask_embed(g, params, cfg):
    """phi(g) = ReLU(prod_i W_i g_i); index -1 selects each table's null row."""
    g = np.asarray(g, dtype=np.int64)
    out = None
    for i, n in enumerate(cfg.heads):
        ids = np.where(g[:, i] < 0, n, g[:, i])
        e = ops.embedding_lookup(params[f"g_embed_{i}"], ids)
        out = e if out is None else ops.mul(out, e)
    return ops.relu(out)


def _prep_obs(obs, canvas):
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 3:
        obs = obs[None]
    if obs.ndim != 4 or obs.shape[1] != N_CHANNELS:
        raise ValueError(f"meta controller: observation must be [B, {N_CHANNELS}, H, W], got {obs.shape}")
    if obs.shape[2:] != (canvas, canvas):
        obs = np.stack([pad_observation(o, canvas) for o in obs])
    return obs


def context_encode(obs, r_prev, g_prev, b, params, cfg):
    """s_t = f(x_t, r_{t-1}, g_{t-1}, b_t): a joint embedding of (g, r, b) conditions the conv and the projection."""
    obs = _prep_obs(obs, cfg.canvas)
    n = obs.shape[0]
    r_prev = _as_tensor(r_prev)
    if r_prev.shape != (n, cfg.word_embed):
        raise ValueError(f"context_encode: r has shape {r_prev.shape}, expected {(n, cfg.word_embed)}")
    b = np.asarray(b, dtype=np.float64).reshape(n, 1)
    joint_in = ops.concat([subtask_embed(g_prev, params, cfg), r_prev, Tensor(b)])
    j = ops.relu(ops.linear(joint_in, params["joint_w"], params["joint_b"]))
    x = ops.relu(ops.conv2d(Tensor(obs), params["conv1_w"], params["conv1_b"]))
    x = ops.relu(ops.predicted_conv2d(x, j, params["pconv_u"], params["pconv_b"],
                                      out_channels=cfg.conv_channels, kernel=1))
    feat = ops.relu(ops.linear(ops.reshape(x, (n, -1)), params["fc_w"], params["fc_b"]))
    return ops.relu(ops.factored_linear(feat, j, params["ctx_w"], params["ctx_wp"], params["ctx_b"]))


def _onehot(idx, n):
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


@dataclass
class StepTerms:
    """Differentiable quantities of one meta step, consumed by meta_loss."""

    mode: str
    value: Tensor
    update_prob: Tensor          # sigma(phi_update) [B]
    logp_g: Tensor               # [B]: soft = sum_i log mixture; hard = sum_i log pi
    logp_l: Tensor | None        # [B] (hard only)
    logp_c: Tensor | None        # [B] (hard only)
    entropy: Tensor              # [B] summed entropy of the subtask heads
    c: np.ndarray                # update weight actually used
    forced: np.ndarray           # rows whose c was not sampled (first step or override)


@dataclass
class StepOutput:
    state: MetaState
    g: np.ndarray
    diag: dict
    terms: StepTerms = field(repr=False)


def _merge(c, new, old):
    """c * new + (1 - c) * old with c a [B] tensor or array."""
    c = _as_tensor(c)
    c = ops.reshape(c, (c.shape[0], 1))
    return ops.add(ops.mul(c, new), ops.mul(ops.sub(1.0, c), old))


def meta_step(mode, obs, state, memory, params, cfg, rng=None, force_c=None, force_l=None, force_g=None):
    """One controller step (soft = differentiable update/copy merge, hard = sampled update or copy).

    ``memory`` is the [B, K_max, E] batch memory.  ``force_c``/``force_l``/``force_g``
    override the gate, the shift (indices or one-hot rows) and the subtask.
    """
    if mode not in MODES:
        raise ValueError(f"unknown meta mode {mode!r}; expected one of {MODES}")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = state.batch
    s = context_encode(obs, state.r, state.g, state.b, params, cfg)
    sigma = ops.reshape(ops.sigmoid(ops.linear(ops.concat([s, state.h]), params["update_w"], params["update_b"])), (n,))
    h_new, cell_new = ops.lstm_cell(s, state.h, state.cell, params["lstm_wh"], params["lstm_b"], wx=params["lstm_wx"])
    shift_h = ops.relu(ops.linear(h_new, params["shift_w1"], params["shift_b1"]))
    shift_logits = ops.linear(shift_h, params["shift_w2"], params["shift_b2"])
    l_soft = ops.softmax(shift_logits)
    l_logp = ops.log_softmax(shift_logits)

    first = (state.g < 0).all(axis=1)
    forced = first.copy()
    if force_c is not None:
        fc = np.broadcast_to(np.asarray(force_c, dtype=np.float64), (n,))
        forced = np.ones(n, dtype=bool)
    if mode == "soft":
        if force_c is None and not first.any():
            c_used = sigma
        else:
            base = np.where(first, 1.0, sigma.data) if force_c is None else np.where(first, 1.0, fc)
            keep = Tensor(np.where(forced, 0.0, 1.0))
            c_used = ops.add(ops.mul(sigma, keep), Tensor(np.where(forced, base, 0.0)))
        c_val = c_used.data.copy()
    else:
        if force_c is None:
            c_val = (rng.random(n) < sigma.data).astype(np.float64)
        else:
            c_val = fc.astype(np.float64)
        c_val = np.where(first, 1.0, c_val)
        c_used = Tensor(c_val)

    l_idx = None
    if force_l is not None:
        fl = np.asarray(force_l)
        l_mat = fl.astype(np.float64) if fl.ndim == 2 else _onehot(np.broadcast_to(fl, (n,)), 3)
        l_use = Tensor(l_mat)
        l_idx = np.argmax(l_mat, axis=1)
    elif mode == "soft":
        l_use = l_soft
    else:
        l_idx = np.array([rng.choice(3, p=row / row.sum()) for row in l_soft.data])
        l_use = Tensor(_onehot(l_idx, 3))
    p_new = shift_pointer(l_use, state.p, state.lengths)
    r_new = retrieve(memory, p_new)

    low = cfg.low
    h_low = ops.slice_last(h_new, 0, low)
    cell_low = ops.slice_last(cell_new, 0, low)
    h_high = _merge(c_used, ops.slice_last(h_new, low, cfg.hidden), ops.slice_last(state.h, low, cfg.hidden))
    cell_high = _merge(c_used, ops.slice_last(cell_new, low, cfg.hidden), ops.slice_last(state.cell, low, cfg.hidden))
    p_out = _merge(c_used, p_new, state.p)
    r_out = _merge(c_used, r_new, state.r)

    goal_h = ops.relu(ops.linear(ops.concat([h_new, r_new]), params["goal_w"], params["goal_b"]))
    g_new = np.zeros((n, len(cfg.heads)), dtype=np.int64)
    logp_g = Tensor(np.zeros(n))
    entropy = Tensor(np.zeros(n))
    for i, k in enumerate(cfg.heads):
        logits = ops.linear(goal_h, params[f"head_w_{i}"], params[f"head_b_{i}"])
        pi = ops.softmax(logits)
        logpi = ops.log_softmax(logits)
        prev = state.g[:, i]
        copy = np.zeros((n, k))
        has_prev = prev >= 0
        copy[np.nonzero(has_prev)[0], prev[has_prev]] = 1.0
        mix = pi.data * c_val[:, None] + copy * (1.0 - c_val[:, None])
        if force_g is not None:
            choice = np.asarray(force_g, dtype=np.int64).reshape(n, -1)[:, i]
        else:
            choice = np.array([rng.choice(k, p=row / row.sum()) for row in mix])
        g_new[:, i] = choice
        if mode == "soft":
            same = (choice == prev).astype(np.float64)
            mix_t = ops.add(ops.mul(c_used, ops.pick(pi, choice)), ops.mul(ops.sub(1.0, c_used), Tensor(same)))
            logp_g = ops.add(logp_g, ops.log(mix_t, floor=PROB_FLOOR))
        else:
            logp_g = ops.add(logp_g, ops.pick(logpi, choice))
        entropy = ops.sub(entropy, ops.sum(ops.mul(pi, logpi), axis=-1))

    mask = (np.arange(cfg.k_max)[None, :] < state.lengths[:, None]).astype(np.float64)
    v_in = ops.concat([p_out, Tensor(mask), goal_h])
    value = ops.reshape(ops.linear(v_in, params["value_w"], params["value_b"]), (n,))

    logp_l = logp_c = None
    if mode == "hard":
        logp_l = ops.pick(l_logp, l_idx)
        logp_c = ops.add(ops.mul(ops.log(sigma, floor=PROB_FLOOR), Tensor(c_val)),
                         ops.mul(ops.log(ops.sub(1.0, sigma), floor=PROB_FLOOR), Tensor(1.0 - c_val)))
    new_state = MetaState(p_out, r_out, ops.concat([h_low, h_high]), ops.concat([cell_low, cell_high]),
                          g_new, state.b.copy(), c_val, state.lengths)
    diag = {"c": c_val, "l": l_use.data.copy(), "p": p_out.data.copy(), "update_prob": sigma.data.copy()}
    terms = StepTerms(mode, value, sigma, logp_g, logp_l, logp_c, entropy, c_val, forced)
    return StepOutput(new_state, g_new, diag, terms)


def with_termination(state, b):
    """Set the termination bit b_t fed to the next step."""
    return MetaState(state.p, state.r, state.h, state.cell, state.g, np.asarray(b, dtype=np.float64),
                     state.c, state.lengths)


# ---------------------------------------------------------------- loss

def meta_loss(steps, advantages, returns, mode, eta=0.001, xi=1.0, analogy=None, rho1=1.0, rho2=1.0,
              value_weight=0.5, entropy_weight=0.0, masks=None, rows=None):
    """Actor-critic objective for the controller, averaged over real steps.

    hard: -sum c (sum_i log pi + log P(l)) A - sum log P(c) A + eta sum sigma + value + xi L_AM
    soft: -sum sum_i log[c pi + (1 - c) 1{g = g_prev}] A + value + xi L_AM

    ``steps`` is a list of StepTerms; ``advantages``/``returns`` are [T, B];
    ``rows[t]`` maps the rows of step t to batch columns when steps are compacted.
    """
    if mode not in MODES:
        raise ValueError(f"unknown meta mode {mode!r}")
    adv = np.asarray(advantages, dtype=np.float64)
    ret = np.asarray(returns, dtype=np.float64)
    if adv.shape[0] != len(steps) or ret.shape != adv.shape:
        raise ValueError(f"advantages {adv.shape} do not match {len(steps)} steps")
    masks = masks or [np.ones(st.value.shape[0]) for st in steps]
    n = max(sum(m.sum() for m in masks), 1.0)
    total = Tensor(0.0)
    for t, st in enumerate(steps):
        if st.mode != mode:
            raise ValueError(f"step {t} was recorded in {st.mode} mode, loss requested for {mode}")
        m = masks[t]
        if not m.any():
            continue
        a = adv[t] if rows is None else adv[t, rows[t]]
        r = ret[t] if rows is None else ret[t, rows[t]]
        if mode == "soft":
            pg = ops.mul(st.logp_g, Tensor(-a * m / n))
        else:
            pg = ops.mul(ops.add(st.logp_g, st.logp_l), Tensor(-st.c * a * m / n))
            free = (~st.forced).astype(np.float64)
            pg = ops.add(pg, ops.mul(st.logp_c, Tensor(-a * m * free / n)))
            if eta:
                pg = ops.add(pg, ops.mul(st.update_prob, Tensor(eta * m * free / n)))
        total = ops.add(total, ops.sum(pg))
        verr = ops.sub(st.value, Tensor(r))
        total = ops.add(total, ops.sum(ops.mul(ops.mul(verr, verr), Tensor(value_weight * m / n))))
        if entropy_weight:
            total = ops.add(total, ops.sum(ops.mul(st.entropy, Tensor(-entropy_weight * m / n))))
    if analogy is not None and xi > 0:
        total = ops.add(total, ops.scale(analogy_objective(*analogy, rho1=rho1, rho2=rho2), xi))
    return total


def subtask_embed_fn(params, cfg):
    """embed_fn for analogy_loss over TaskParams (two-head controllers only)."""
    def fn(tasks):
        return subtask_embed(np.array([[g.action, g.obj] for g in tasks]), params, cfg)
    return fn


# ---------------------------------------------------------------- checkpoints

def config_dict(cfg):
    return asdict(cfg)


def save_meta(path, params, cfg, seed=0, manifest=None):
    manifest = dict(manifest or {})
    manifest["kind"] = "meta"
    manifest["meta_config"] = config_dict(cfg)
    archive.save(path, {k: v.data for k, v in params.items()}, seed, manifest)


def load_meta(path):
    entries, _, manifest = archive.load(path)
    if not manifest or manifest.get("kind") != "meta":
        raise ValueError(f"{path} is not a meta-controller checkpoint")
    cfg = MetaConfig(**manifest["meta_config"])
    return {k: Tensor(v, requires_grad=True) for k, v in entries.items()}, cfg, manifest


# ---------------------------------------------------------------- gradient check

def gradcheck_builder(mode="soft", batch=2, seed_shift=0):
    """Builder for grad_check: one full soft meta_step with the sampled subtask held fixed."""
    cfg = MetaConfig(vocab=6, word_embed=3, k_max=3, canvas=2, conv_channels=2, feat=3, g_embed=3, joint=2, context=3,
                     hidden=4, shift_hidden=2, goal_hidden=3, heads=(2, 3))

    def build(rng):
        params = init_params(cfg, int(rng.integers(2**31)))
        for v in params.values():
            v.data += 0.1 * rng.standard_normal(v.shape)
        obs = (rng.random((batch, N_CHANNELS, 2, 2)) < 0.3).astype(np.float64)
        counts = rng.integers(0, 2, (batch, cfg.k_max, cfg.vocab)).astype(np.float64)
        lengths = np.array([cfg.k_max, cfg.k_max - 1][:batch])
        p0 = rng.dirichlet(np.ones(cfg.k_max), batch) * (np.arange(cfg.k_max) < lengths[:, None])
        p0 /= p0.sum(1, keepdims=True)
        h0, c0 = rng.standard_normal((batch, cfg.hidden)), rng.standard_normal((batch, cfg.hidden))
        g_prev = np.stack([rng.integers(0, n, batch) for n in cfg.heads], axis=1)
        g_fix = np.stack([rng.integers(0, n, batch) for n in cfg.heads], axis=1)
        b = rng.integers(0, 2, batch)
        proj = {k: rng.standard_normal(s) for k, s in
                (("p", (batch, cfg.k_max)), ("r", (batch, cfg.word_embed)), ("h", (batch, cfg.hidden)),
                 ("v", (batch,)), ("g", (batch,)))}

        def loss():
            memory = batch_memory(counts, params["word_embed"])
            p = Tensor(p0)
            state = MetaState(p, retrieve(memory, p), Tensor(h0), Tensor(c0), g_prev, b.astype(float),
                              np.zeros(batch), lengths)
            out = meta_step(mode, obs, state, memory, params, cfg, force_g=g_fix)
            st = out.state
            parts = [ops.sum(ops.mul(st.p, Tensor(proj["p"]))), ops.sum(ops.mul(st.r, Tensor(proj["r"]))),
                     ops.sum(ops.mul(st.h, Tensor(proj["h"]))), ops.sum(ops.mul(out.terms.value, Tensor(proj["v"]))),
                     ops.sum(ops.mul(out.terms.logp_g, Tensor(proj["g"])))]
            total = parts[0]
            for x in parts[1:]:
                total = ops.add(total, x)
            return total
        return params, loss
    return build
