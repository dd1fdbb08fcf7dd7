"""RMSProp without momentum or centering."""
from __future__ import annotations

import numpy as np


class RMSProp:
    """Keeps one squared-gradient accumulator per named parameter.

    ``m <- smoothing * m + (1 - smoothing) * g**2`` then
    ``p <- p - lr * g / sqrt(m + eps)``.
    """

    def __init__(self, params, lr, smoothing=0.97, eps=1e-6):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= smoothing < 1:
            raise ValueError("smoothing must be in [0, 1)")
        if eps <= 0:
            raise ValueError("eps must be > 0")
        self.params = params
        self.lr, self.smoothing, self.eps = lr, smoothing, eps
        self.state = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads):
        rmsprop_step(self.params, grads, self.lr, self.smoothing, self.eps, self.state)


def rmsprop_step(params, grads, lr, smoothing, eps, state):
    """In-place update of ``params`` (name -> Tensor) from ``grads`` (name -> array).

    Parameters without a gradient entry are left untouched.
    """
    if lr < 0 or not 0 <= smoothing < 1 or eps <= 0:
        raise ValueError(f"rmsprop: invalid lr={lr}, smoothing={smoothing}, eps={eps}")
    for name, g in grads.items():
        if name not in state:
            raise KeyError(f"rmsprop: no accumulator for {name!r}")
        m = state[name]
        m *= smoothing
        m += (1.0 - smoothing) * g * g
        params[name].data -= lr * g / np.sqrt(m + eps)
