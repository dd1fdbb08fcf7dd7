"""Finite-difference gradient checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .core import Tensor, backward


@dataclass
class LeafReport:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    leaves: list = field(default_factory=list)

    @property
    def passed(self):
        return all(leaf.passed for leaf in self.leaves)

    @property
    def max_rel_err(self):
        return max((leaf.max_rel_err for leaf in self.leaves), default=0.0)

    def lines(self):
        status = "PASS" if self.passed else "FAIL"
        yield f"{status} {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tolerance:g})"
        for leaf in self.leaves:
            yield f"    {leaf.name}: {leaf.max_rel_err:.3e}"


def rel_error(analytic, numeric, floor=1e-4):
    """Elementwise |a - n| / max(|a|, |n|, floor); the floor keeps tiny gradients from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(loss_fn, leaf, eps=1e-5):
    leaf.data = np.ascontiguousarray(leaf.data)  # the probe below must write through a view
    g = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def grad_check(builder, tolerance=1e-5, seed=0, eps=1e-5, name="check"):
    """Compare backward() against central differences for every leaf.

    ``builder(rng)`` returns ``(leaves, loss_fn)`` where ``leaves`` maps
    names to requires-grad tensors and ``loss_fn()`` rebuilds the scalar
    loss from their current values.  Failures are reported, not raised.
    """
    rng = np.random.default_rng(seed)
    leaves, loss_fn = builder(rng)
    loss = loss_fn()
    analytic = backward(loss, leaves=list(leaves.values()))
    report = GradCheckReport(name, tolerance)
    for lname, leaf in leaves.items():
        num = numeric_grad(loss_fn, leaf, eps)
        err = float(rel_error(analytic[leaf], num).max()) if leaf.size else 0.0
        report.leaves.append(LeafReport(lname, err, err < tolerance))
    return report


# ------------------------------------------------------------ default op suite

def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weights(rng, n):
    # fixed random projection so every output element matters
    return Tensor(rng.standard_normal(n))


def _reduce(y, w):
    return ops.sum(ops.mul(y, w))


def _unary(fn, shape=(3, 5), out=None):
    def build(rng):
        x = _leaf(rng, *shape)
        w = _weights(rng, out or shape)
        return {"x": x}, lambda: _reduce(fn(x), w)
    return build


def _relu_build(rng):
    # keep inputs away from the kink
    x = Tensor(rng.uniform(0.1, 1.0, (3, 5)) * rng.choice([-1.0, 1.0], (3, 5)), requires_grad=True)
    w = _weights(rng, (3, 5))
    return {"x": x}, lambda: _reduce(ops.relu(x), w)


def _binary(fn, sa=(3, 4), sb=(3, 4)):
    def build(rng):
        a, b = _leaf(rng, *sa), _leaf(rng, *sb)
        w = _weights(rng, np.broadcast_shapes(sa, sb))
        return {"a": a, "b": b}, lambda: _reduce(fn(a, b), w)
    return build


def _linear_build(rng):
    x, w, b = _leaf(rng, 2, 4), _leaf(rng, 4, 3), _leaf(rng, 3)
    proj = _weights(rng, (2, 3))
    return {"x": x, "W": w, "b": b}, lambda: _reduce(ops.linear(x, w, b), proj)


def _matmul_build(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    proj = _weights(rng, (3, 2))
    return {"a": a, "b": b}, lambda: _reduce(ops.matmul(a, b), proj)


def _conv_build(rng):
    x, w, b = _leaf(rng, 2, 3, 6, 6), _leaf(rng, 4, 3, 3, 3, scale=0.5), _leaf(rng, 4)
    proj = _weights(rng, (2, 4, 3, 3))
    return {"x": x, "w": w, "b": b}, lambda: _reduce(ops.conv2d(x, w, b, stride=2, padding=1), proj)


def _pconv_build(rng):
    x, e = _leaf(rng, 2, 3, 5, 5), _leaf(rng, 2, 4)
    u, b = _leaf(rng, 4, 2 * 3 * 3 * 3, scale=0.3), _leaf(rng, 2)
    proj = _weights(rng, (2, 2, 5, 5))
    return {"x": x, "e": e, "U": u, "b": b}, lambda: _reduce(
        ops.predicted_conv2d(x, e, u, b, out_channels=2, kernel=3, padding=1), proj)


def _lstm_build(rng, units=8, inputs=5, batch=2):
    x, h, c = _leaf(rng, batch, inputs), _leaf(rng, batch, units), _leaf(rng, batch, units)
    wx = _leaf(rng, inputs, 4 * units, scale=0.4)
    wh = _leaf(rng, units, 4 * units, scale=0.4)
    b = _leaf(rng, 4 * units, scale=0.1)
    ph, pc = _weights(rng, (batch, units)), _weights(rng, (batch, units))

    def loss():
        h2, c2 = ops.lstm_cell(x, h, c, wh, b, wx=wx)
        return ops.add(_reduce(h2, ph), _reduce(c2, pc))
    return {"x": x, "h": h, "c": c, "Wx": wx, "Wh": wh, "b": b}, loss


def _embedding_build(rng):
    table = _leaf(rng, 6, 3)
    ids = np.array([[0, 2], [5, 2]])
    proj = _weights(rng, (2, 2, 3))
    return {"table": table}, lambda: _reduce(ops.embedding_lookup(table, ids), proj)


def _concat_build(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 4)
    proj = _weights(rng, (2, 7))
    return {"a": a, "b": b}, lambda: _reduce(ops.concat([a, b]), proj)


def _reduce_build(fn):
    def build(rng):
        x = _leaf(rng, 3, 4)
        proj = _weights(rng, (4,))
        return {"x": x}, lambda: ops.sum(ops.mul(fn(x), proj))
    return build


def _l2_build(rng):
    x = _leaf(rng, 3, 4)
    proj = _weights(rng, (3,))
    return {"x": x}, lambda: _reduce(ops.l2_norm(x), proj)


def _factored_build(rng):
    x, e = _leaf(rng, 2, 4), _leaf(rng, 2, 5)
    w, wp, b = _leaf(rng, 4, 5), _leaf(rng, 5, 3), _leaf(rng, 3)
    proj = _weights(rng, (2, 3))
    return {"x": x, "e": e, "W": w, "W'": wp, "b": b}, lambda: _reduce(ops.factored_linear(x, e, w, wp, b), proj)


def _log_build(rng):
    x = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    proj = _weights(rng, (3, 4))
    return {"x": x}, lambda: _reduce(ops.log(x, floor=1e-12), proj)


def _pick_build(rng):
    x = _leaf(rng, 3, 5)
    idx = rng.integers(0, 5, size=3)
    proj = _weights(rng, (3,))
    return {"x": x}, lambda: _reduce(ops.pick(x, idx), proj)


def _mlp_build(rng):
    x = Tensor(rng.standard_normal((4, 6)))
    w1, b1 = _leaf(rng, 6, 8, scale=0.5), _leaf(rng, 8, scale=0.1)
    w2, b2 = _leaf(rng, 8, 3, scale=0.5), _leaf(rng, 3, scale=0.1)
    target = rng.integers(0, 3, size=4)

    def loss():
        hid = ops.tanh(ops.linear(x, w1, b1))
        logp = ops.log_softmax(ops.linear(hid, w2, b2))
        return ops.scale(ops.mean(ops.pick(logp, target)), -1.0)
    return {"W1": w1, "b1": b1, "W2": w2, "b2": b2}, loss


OP_BUILDERS = {
    "linear": _linear_build,
    "matmul": _matmul_build,
    "conv2d": _conv_build,
    "predicted_conv2d": _pconv_build,
    "lstm_cell": _lstm_build,
    "embedding_lookup": _embedding_build,
    "softmax": _unary(ops.softmax),
    "log_softmax": _unary(ops.log_softmax),
    "sigmoid": _unary(ops.sigmoid),
    "tanh": _unary(ops.tanh),
    "relu": _relu_build,
    "log": _log_build,
    "exp": _unary(ops.exp),
    "concat": _concat_build,
    "add": _binary(ops.add, (3, 4), (4,)),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul, (3, 4), (1, 4)),
    "scale": _unary(lambda x: ops.scale(x, -2.5)),
    "sum": _reduce_build(lambda x: ops.sum(x, axis=0)),
    "mean": _reduce_build(lambda x: ops.mean(x, axis=0)),
    "l2_norm": _l2_build,
    "factored_linear": _factored_build,
    "slice": _unary(lambda x: ops.slice_last(x, 1, 4), out=(3, 3)),
    "reshape": _unary(lambda x: ops.reshape(x, (5, 3)), out=(5, 3)),
    "pick": _pick_build,
    "mlp": _mlp_build,
}


def run_suite(builders=None, seeds=range(20), tolerance=1e-5):
    """Run every builder over every seed; returns one report per (name, seed)."""
    builders = builders or OP_BUILDERS
    return [grad_check(b, tolerance, seed=s, name=f"{name}[seed={s}]")
            for name, b in builders.items() for s in seeds]
