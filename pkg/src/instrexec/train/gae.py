"""Generalized advantage estimation."""
from __future__ import annotations

import numpy as np


def compute_gae(rewards, values, bootstrap, gamma=0.99, lam=0.96):
    """Backward recursion A_t = delta_t + gamma*lam*A_{t+1}.

    ``bootstrap`` is V(s_T): zero on a true terminal state, the critic's
    estimate when the episode was cut by the time limit.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape or r.ndim != 1:
        raise ValueError(f"rewards {r.shape} and values {v.shape} must be equal-length vectors")
    if not (0 <= gamma <= 1 and 0 <= lam <= 1):
        raise ValueError("gamma and lambda must lie in [0, 1]")
    adv = np.zeros_like(r)
    nxt_v, acc = float(bootstrap), 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * nxt_v - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        nxt_v = v[t]
    return adv


def gae_bruteforce(rewards, values, bootstrap, gamma=0.99, lam=0.96):
    """Direct double sum over (gamma*lam)^l delta_{t+l}; the reference for compute_gae."""
    r = np.asarray(rewards, dtype=np.float64)
    v_next = np.append(np.asarray(values, dtype=np.float64)[1:], bootstrap)
    delta = r + gamma * v_next - np.asarray(values, dtype=np.float64)
    n = len(r)
    return np.array([sum((gamma * lam) ** k * delta[t + k] for k in range(n - t)) for t in range(n)])


def batched_gae(rewards, values, masks, bootstraps, gamma=0.99, lam=0.96):
    """GAE per column of lockstep [T, B] arrays; steps with mask 0 are padding after the episode end."""
    rewards, values, masks = (np.asarray(x, dtype=np.float64) for x in (rewards, values, masks))
    adv = np.zeros_like(rewards)
    for b in range(rewards.shape[1]):
        n = int(masks[:, b].sum())
        if n:
            adv[:n, b] = compute_gae(rewards[:n, b], values[:n, b], bootstraps[b], gamma, lam)
    return adv, adv + values * masks
