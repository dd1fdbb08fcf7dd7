"""Primitive operations with forward and backward rules.

Every primitive is registered in ``RULES`` under its kind name.  Backward
rules are looked up at backward time, so tests can swap a rule to check
that the gradient checker notices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import core
from .core import DTYPE, ShapeError, Tensor, as_tensor, check_finite, grad_enabled


@dataclass
class Rule:
    forward: Callable
    backward: Callable


RULES: dict[str, Rule] = {}


def register(kind, forward, backward):
    RULES[kind] = Rule(forward, backward)


def apply_primitive(kind, inputs, attrs=None):
    """Run primitive ``kind`` on ``inputs`` and record it if any input needs grad."""
    if kind not in RULES:
        raise ValueError(f"unknown op kind {kind!r}")
    attrs = dict(attrs or {})
    inputs = [as_tensor(x) for x in inputs]
    out, saved = RULES[kind].forward([t.data for t in inputs], attrs, kind)
    out = np.asarray(out, dtype=DTYPE)
    check_finite(out, kind)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = None
    t.parents = ()
    t.saved = None
    t.attrs = None
    t.id = next(core._ids)
    t.requires_grad = grad_enabled() and any(x.requires_grad for x in inputs)
    if t.requires_grad:
        t.op = kind
        t.parents = tuple(inputs)
        t.saved = saved
        t.attrs = attrs
    return t


def _shape_error(kind, msg, *shapes):
    dims = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{kind}: {msg} (got {dims})")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def _broadcast_check(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(kind, "operands do not broadcast", a.shape, b.shape) from None


def _add_fwd(xs, attrs, kind):
    _broadcast_check(kind, *xs)
    return xs[0] + xs[1], None


def _add_bwd(t, g):
    a, b = t.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(xs, attrs, kind):
    _broadcast_check(kind, *xs)
    return xs[0] - xs[1], None


def _sub_bwd(t, g):
    a, b = t.parents
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_fwd(xs, attrs, kind):
    _broadcast_check(kind, *xs)
    return xs[0] * xs[1], None


def _mul_bwd(t, g):
    a, b = t.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _scale_fwd(xs, attrs, kind):
    return xs[0] * attrs["k"], None


def _scale_bwd(t, g):
    return (g * t.attrs["k"],)


def _sigmoid_fwd(xs, attrs, kind):
    x = xs[0]
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, None


def _sigmoid_bwd(t, g):
    s = t.data
    return (g * s * (1.0 - s),)


def _tanh_fwd(xs, attrs, kind):
    return np.tanh(xs[0]), None


def _tanh_bwd(t, g):
    return (g * (1.0 - t.data ** 2),)


def _relu_fwd(xs, attrs, kind):
    return np.maximum(xs[0], 0.0), None


def _relu_bwd(t, g):
    return (g * (t.parents[0].data > 0),)


def _exp_fwd(xs, attrs, kind):
    return np.exp(xs[0]), None


def _exp_bwd(t, g):
    return (g * t.data,)


def _log_fwd(xs, attrs, kind):
    floor = attrs.get("floor", 0.0)
    x = xs[0]
    if floor <= 0 and (x <= 0).any():
        raise ValueError("log: non-positive input without a floor")
    return np.log(np.maximum(x, floor) if floor > 0 else x), None


def _log_bwd(t, g):
    x = t.parents[0].data
    floor = t.attrs.get("floor", 0.0)
    denom = np.maximum(x, floor) if floor > 0 else x
    return (np.where(x > floor, g / denom, 0.0),)


register("add", _add_fwd, _add_bwd)
register("sub", _sub_fwd, _sub_bwd)
register("mul", _mul_fwd, _mul_bwd)
register("scale", _scale_fwd, _scale_bwd)
register("sigmoid", _sigmoid_fwd, _sigmoid_bwd)
register("tanh", _tanh_fwd, _tanh_bwd)
register("relu", _relu_fwd, _relu_bwd)
register("log", _log_fwd, _log_bwd)
register("exp", _exp_fwd, _exp_bwd)


# ---------------------------------------------------------------- softmax family

def _softmax_fwd(xs, attrs, kind):
    x = xs[0]
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True), None


def _softmax_bwd(t, g):
    y = t.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(xs, attrs, kind):
    x = xs[0]
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), None


def _log_softmax_bwd(t, g):
    p = np.exp(t.data)
    return (g - p * g.sum(axis=-1, keepdims=True),)


register("softmax", _softmax_fwd, _softmax_bwd)
register("log_softmax", _log_softmax_fwd, _log_softmax_bwd)


# ---------------------------------------------------------------- reductions

def _sum_fwd(xs, attrs, kind):
    return xs[0].sum(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _sum_bwd(t, g):
    x = t.parents[0]
    return (np.array(_expand_reduced(g, x.shape, t.attrs.get("axis"), t.attrs.get("keepdims", False))),)


def _mean_fwd(xs, attrs, kind):
    return xs[0].mean(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None


def _mean_bwd(t, g):
    x = t.parents[0]
    n = x.data.size / max(t.data.size, 1)
    return (np.array(_expand_reduced(g, x.shape, t.attrs.get("axis"), t.attrs.get("keepdims", False))) / n,)


def _l2_norm_fwd(xs, attrs, kind):
    return np.sqrt((xs[0] ** 2).sum(axis=-1)), None


def _l2_norm_bwd(t, g):
    x = t.parents[0].data
    n = t.data[..., None]
    # subgradient 0 at the origin
    safe = np.where(n > 0, n, 1.0)
    return (np.where(n > 0, x / safe, 0.0) * g[..., None],)


register("sum", _sum_fwd, _sum_bwd)
register("mean", _mean_fwd, _mean_bwd)
register("l2_norm", _l2_norm_fwd, _l2_norm_bwd)


# ---------------------------------------------------------------- structural

def _concat_fwd(xs, attrs, kind):
    axis = attrs.get("axis", -1)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
            raise _shape_error(kind, "non-concat dims differ", ref, x.shape)
    return np.concatenate(xs, axis=axis), None


def _concat_bwd(t, g):
    axis = t.attrs.get("axis", -1)
    sizes = [p.shape[axis] for p in t.parents]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _slice_fwd(xs, attrs, kind):
    x = xs[0]
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= x.shape[-1]:
        raise _shape_error(kind, f"slice [{start}:{stop}] out of range", x.shape)
    return x[..., start:stop], None


def _slice_bwd(t, g):
    x = t.parents[0]
    out = np.zeros_like(x.data)
    out[..., t.attrs["start"]:t.attrs["stop"]] = g
    return (out,)


def _reshape_fwd(xs, attrs, kind):
    try:
        return xs[0].reshape(attrs["shape"]), None
    except ValueError:
        raise _shape_error(kind, f"cannot reshape to {attrs['shape']}", xs[0].shape) from None


def _reshape_bwd(t, g):
    return (g.reshape(t.parents[0].shape),)


def _pick_fwd(xs, attrs, kind):
    x = xs[0]
    idx = attrs["index"]
    if idx.shape != x.shape[:-1]:
        raise _shape_error(kind, "index shape must match leading dims", x.shape, idx.shape)
    return np.take_along_axis(x, idx[..., None], axis=-1)[..., 0], None


def _pick_bwd(t, g):
    x = t.parents[0]
    out = np.zeros_like(x.data)
    np.put_along_axis(out, t.attrs["index"][..., None], g[..., None], axis=-1)
    return (out,)


def _embedding_fwd(xs, attrs, kind):
    table = xs[0]
    ids = attrs["ids"]
    if table.ndim != 2:
        raise _shape_error(kind, "table must be 2-D", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise _shape_error(kind, f"ids out of range [0,{table.shape[0]})", table.shape, ids.shape)
    return table[ids], None


def _embedding_bwd(t, g):
    table = t.parents[0]
    out = np.zeros_like(table.data)
    np.add.at(out, t.attrs["ids"], g)
    return (out,)


register("concat", _concat_fwd, _concat_bwd)
register("slice", _slice_fwd, _slice_bwd)
register("reshape", _reshape_fwd, _reshape_bwd)
register("pick", _pick_fwd, _pick_bwd)
register("embedding_lookup", _embedding_fwd, _embedding_bwd)


# ---------------------------------------------------------------- dense layers

def _matmul_fwd(xs, attrs, kind):
    a, b = xs
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise _shape_error(kind, "inner dims must agree and rhs must be 2-D", a.shape, b.shape)
    return a @ b, None


def _matmul_bwd(t, g):
    a, b = t.parents
    ga = g @ b.data.T
    gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return ga, gb


def _linear_fwd(xs, attrs, kind):
    x, w, b = xs
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise _shape_error(kind, "expected x[..., in], W[in, out], b[out]", x.shape, w.shape, b.shape)
    return x @ w + b, None


def _linear_bwd(t, g):
    x, w, b = t.parents
    g2 = g.reshape(-1, g.shape[-1])
    return g @ w.data.T, x.data.reshape(-1, x.shape[-1]).T @ g2, g2.sum(axis=0)


def _factored_fwd(xs, attrs, kind):
    # y = W' diag(e) W x + b, written for row vectors
    x, e, w, wp, b = xs
    if (w.ndim != 2 or wp.ndim != 2 or x.shape[-1] != w.shape[0] or e.shape[-1] != w.shape[1]
            or wp.shape[0] != w.shape[1] or b.shape != (wp.shape[1],) or e.shape[:-1] != x.shape[:-1]):
        raise _shape_error(kind, "expected x[B,in], e[B,F], W[in,F], W'[F,out], b[out]",
                           x.shape, e.shape, w.shape, wp.shape, b.shape)
    u = x @ w
    return (u * e) @ wp + b, u


def _factored_bwd(t, g):
    x, e, w, wp, b = t.parents
    u = t.saved
    gv = g @ wp.data.T
    v = u * e.data
    gu = gv * e.data
    return (gu @ w.data.T, gv * u, x.data.reshape(-1, x.shape[-1]).T @ gu.reshape(-1, gu.shape[-1]),
            v.reshape(-1, v.shape[-1]).T @ g.reshape(-1, g.shape[-1]), g.reshape(-1, g.shape[-1]).sum(axis=0))


register("matmul", _matmul_fwd, _matmul_bwd)
register("linear", _linear_fwd, _linear_bwd)
register("factored_linear", _factored_fwd, _factored_bwd)


# ---------------------------------------------------------------- lstm

def _sig(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _lstm_fwd(xs, attrs, kind):
    # inputs: x, h, c, Wh, b[, Wx]; without Wx, x is already the input projection [B, 4H]
    x, h, c, wh, b = xs[:5]
    wx = xs[5] if len(xs) > 5 else None
    n = h.shape[-1]
    if c.shape != h.shape or wh.shape != (n, 4 * n) or b.shape != (4 * n,):
        raise _shape_error(kind, "expected h,c[B,H], Wh[H,4H], b[4H]", h.shape, c.shape, wh.shape, b.shape)
    if wx is None:
        if x.shape != h.shape[:-1] + (4 * n,):
            raise _shape_error(kind, "projected input must be [B, 4H]", x.shape, h.shape)
        zx = x
    else:
        if wx.shape != (x.shape[-1], 4 * n) or x.shape[:-1] != h.shape[:-1]:
            raise _shape_error(kind, "expected x[B,I], Wx[I,4H]", x.shape, wx.shape)
        zx = x @ wx
    z = zx + h @ wh + b
    i, f, gg, o = (z[..., k * n:(k + 1) * n] for k in range(4))
    i, f, o, gg = _sig(i), _sig(f), _sig(o), np.tanh(gg)
    c2 = f * c + i * gg
    tc = np.tanh(c2)
    h2 = o * tc
    return np.concatenate([h2, c2], axis=-1), (i, f, gg, o, tc)


def _lstm_bwd(t, g):
    x, h, c, wh, b = t.parents[:5]
    wx = t.parents[5] if len(t.parents) > 5 else None
    i, f, gg, o, tc = t.saved
    n = h.shape[-1]
    gh2, gc2 = g[..., :n], g[..., n:]
    gc = gc2 + gh2 * o * (1.0 - tc ** 2)
    dz = np.concatenate([
        gc * gg * i * (1.0 - i),
        gc * c.data * f * (1.0 - f),
        gc * i * (1.0 - gg ** 2),
        gh2 * tc * o * (1.0 - o),
    ], axis=-1)
    dz2 = dz.reshape(-1, 4 * n)
    grads = [None, dz @ wh.data.T, gc * f, h.data.reshape(-1, n).T @ dz2, dz2.sum(axis=0)]
    if wx is None:
        grads[0] = dz
    else:
        grads[0] = dz @ wx.data.T
        grads.append(x.data.reshape(-1, x.shape[-1]).T @ dz2)
    return tuple(grads)


register("lstm_cell", _lstm_fwd, _lstm_bwd)


# ---------------------------------------------------------------- convolution

def _conv_geometry(kind, x, k, stride, padding):
    if stride < 1:
        raise ValueError(f"{kind}: stride must be >= 1")
    if padding < 0:
        raise ValueError(f"{kind}: padding must be >= 0")
    if x.ndim != 4:
        raise _shape_error(kind, "input must be [B, C, H, W]", x.shape)
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if hp < k or wp < k:
        raise _shape_error(kind, f"kernel {k} larger than padded input", x.shape)
    return (hp - k) // stride + 1, (wp - k) // stride + 1


def _pad(x, p):
    return x if p == 0 else np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(x, k, s, ho, wo):
    for di in range(k):
        for dj in range(k):
            yield di, dj, x[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s]


def _conv_fwd(xs, attrs, kind):
    x, w, b = xs
    s, p = attrs.get("stride", 1), attrs.get("padding", 0)
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise _shape_error(kind, "expected x[B,C,H,W], w[O,C,k,k], b[O]", x.shape, w.shape, b.shape)
    k = w.shape[2]
    ho, wo = _conv_geometry(kind, x, k, s, p)
    xp = _pad(x, p)
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for di, dj, win in _windows(xp, k, s, ho, wo):
        out += np.einsum("bchw,oc->bohw", win, w[:, :, di, dj], optimize=True)
    return out + b[None, :, None, None], (ho, wo)


def _conv_bwd(t, g):
    x, w, b = t.parents
    s, p = t.attrs.get("stride", 1), t.attrs.get("padding", 0)
    k = w.shape[2]
    ho, wo = t.saved
    xp = _pad(x.data, p)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w.data)
    for di, dj, win in _windows(xp, k, s, ho, wo):
        gw[:, :, di, dj] = np.einsum("bohw,bchw->oc", g, win, optimize=True)
        gxp[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s] += np.einsum(
            "bohw,oc->bchw", g, w.data[:, :, di, dj], optimize=True)
    gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
    return gx, gw, g.sum(axis=(0, 2, 3))


def _pconv_fwd(xs, attrs, kind):
    # per-sample kernel = reshape(e @ U); output bias shared
    x, e, u, b = xs
    s, p = attrs.get("stride", 1), attrs.get("padding", 0)
    k, cout = attrs.get("kernel", 1), attrs["out_channels"]
    cin = x.shape[1] if x.ndim == 4 else -1
    if (e.ndim != 2 or x.ndim != 4 or e.shape[0] != x.shape[0] or u.shape != (e.shape[1], cout * cin * k * k)
            or b.shape != (cout,)):
        raise _shape_error(kind, "expected x[B,C,H,W], e[B,E], U[E,O*C*k*k], b[O]", x.shape, e.shape, u.shape, b.shape)
    ho, wo = _conv_geometry(kind, x, k, s, p)
    kern = (e @ u).reshape(x.shape[0], cout, cin, k, k)
    xp = _pad(x, p)
    out = np.zeros((x.shape[0], cout, ho, wo))
    for di, dj, win in _windows(xp, k, s, ho, wo):
        out += np.einsum("bchw,boc->bohw", win, kern[:, :, :, di, dj], optimize=True)
    return out + b[None, :, None, None], (kern, ho, wo)


def _pconv_bwd(t, g):
    x, e, u, b = t.parents
    s, p = t.attrs.get("stride", 1), t.attrs.get("padding", 0)
    kern, ho, wo = t.saved
    k = kern.shape[-1]
    xp = _pad(x.data, p)
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(kern)
    for di, dj, win in _windows(xp, k, s, ho, wo):
        gk[:, :, :, di, dj] = np.einsum("bohw,bchw->boc", g, win, optimize=True)
        gxp[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s] += np.einsum(
            "bohw,boc->bchw", g, kern[:, :, :, di, dj], optimize=True)
    gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
    gk2 = gk.reshape(x.shape[0], -1)
    return gx, gk2 @ u.data.T, e.data.T @ gk2, g.sum(axis=(0, 2, 3))


register("conv2d", _conv_fwd, _conv_bwd)
register("predicted_conv2d", _pconv_fwd, _pconv_bwd)


# ---------------------------------------------------------------- public wrappers

def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def scale(x, k):
    return apply_primitive("scale", [x], {"k": float(k)})


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def relu(x):
    return apply_primitive("relu", [x])


def exp(x):
    return apply_primitive("exp", [x])


def log(x, floor=0.0):
    return apply_primitive("log", [x], {"floor": floor})


def softmax(x):
    return apply_primitive("softmax", [x])


def log_softmax(x):
    return apply_primitive("log_softmax", [x])


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return apply_primitive("sum", [x], {"axis": axis, "keepdims": keepdims})


def mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", [x], {"axis": axis, "keepdims": keepdims})


def l2_norm(x):
    return apply_primitive("l2_norm", [x])


def concat(xs, axis=-1):
    return apply_primitive("concat", list(xs), {"axis": axis})


def slice_last(x, start, stop):
    return apply_primitive("slice", [x], {"start": start, "stop": stop})


def reshape(x, shape):
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


def pick(x, index):
    """x[..., index] along the last axis, one index per leading position."""
    return apply_primitive("pick", [x], {"index": np.asarray(index, dtype=np.int64)})


def embedding_lookup(table, ids):
    return apply_primitive("embedding_lookup", [table], {"ids": np.asarray(ids, dtype=np.int64)})


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def linear(x, w, b):
    return apply_primitive("linear", [x, w, b])


def factored_linear(x, e, w, wp, b):
    return apply_primitive("factored_linear", [x, e, w, wp, b])


def lstm_cell(x, h, c, wh, b, wx=None):
    """One LSTM step; returns (h', c').  Pass ``wx=None`` when x is already projected to 4H."""
    inputs = [x, h, c, wh, b] + ([wx] if wx is not None else [])
    hc = apply_primitive("lstm_cell", inputs)
    n = as_tensor(h).shape[-1]
    return slice_last(hc, 0, n), slice_last(hc, n, 2 * n)


def conv2d(x, w, b, stride=1, padding=0):
    return apply_primitive("conv2d", [x, w, b], {"stride": stride, "padding": padding})


def predicted_conv2d(x, e, u, b, out_channels, kernel=1, stride=1, padding=0):
    return apply_primitive("predicted_conv2d", [x, e, u, b],
                           {"out_channels": out_channels, "kernel": kernel, "stride": stride, "padding": padding})
