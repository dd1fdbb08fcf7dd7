"""Weight initializers.  Biases start at zero."""
import numpy as np

from .core import Tensor


def uniform_fan_in(rng, shape, fan_in=None):
    fan_in = fan_in or shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def orthogonal(rng, shape, gain=1.0):
    rows, cols = shape[0], int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return Tensor(np.ascontiguousarray(gain * q[:rows, :cols]).reshape(shape), requires_grad=True)


def zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)
