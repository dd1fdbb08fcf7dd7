import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from instrexec.tensor import archive, ops
from instrexec.tensor.core import NonFiniteError, ShapeError, Tensor, backward, no_grad
from instrexec.tensor.gradcheck import OP_BUILDERS, grad_check, run_suite
from instrexec.tensor.init import orthogonal
from instrexec.tensor.optim import RMSProp, rmsprop_step

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- forward oracles

def test_softmax_uniform_on_equal_logits():
    np.testing.assert_allclose(ops.softmax(Tensor([1.0, 1.0, 1.0])).data, [1 / 3] * 3, atol=1e-15)


def test_sigmoid_zero():
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4, 5))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), stride=1)
    np.testing.assert_array_equal(out.data, x)


def test_factored_linear_identity():
    x = np.arange(8.0).reshape(2, 4)
    eye = Tensor(np.eye(4))
    out = ops.factored_linear(Tensor(x), Tensor(np.ones((2, 4))), eye, eye, Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_lstm_zero_everything_gives_zero_hidden():
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    h, c = ops.lstm_cell(z(2, 3), z(2, 4), z(2, 4), z(4, 16), z(16), wx=z(3, 16))
    assert not h.data.any() and not c.data.any()


def test_embedding_lookup_gathers_rows():
    table = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(ops.embedding_lookup(Tensor(table), [3, 0, 3]).data, table[[3, 0, 3]])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite))
def test_softmax_is_simplex(x):
    p = ops.softmax(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite),
       st.floats(-50, 50, allow_nan=False))
def test_softmax_shift_invariance(x, k):
    np.testing.assert_allclose(ops.softmax(Tensor(x + k)).data, ops.softmax(Tensor(x)).data, atol=1e-12)


# ---------------------------------------------------------------- errors

def test_shape_mismatch_names_op_and_dims():
    with pytest.raises(ShapeError, match="linear"):
        ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_rejected():
    with pytest.raises(NonFiniteError):
        ops.exp(Tensor([1000.0]))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ops.scale(x, 2.0))


# ---------------------------------------------------------------- backward oracles

def test_grad_of_weighted_sum_is_input():
    x = np.array([1.0, -2.0, 3.5])
    w = Tensor(np.zeros(3), requires_grad=True)
    grads = backward(ops.sum(ops.mul(w, Tensor(x))))
    np.testing.assert_array_equal(grads[w], x)


def test_sigmoid_grad_at_zero():
    z = Tensor(0.0, requires_grad=True)
    grads = backward(ops.scale(ops.sigmoid(z), 3.0))
    assert grads[z] == pytest.approx(0.75, abs=1e-15)


def test_unreachable_leaf_gets_zero_grad():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    grads = backward(ops.sum(a), leaves=[a, b])
    np.testing.assert_array_equal(grads[b], np.zeros(3))


def test_shared_subexpression_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = ops.mul(x, x)
    grads = backward(ops.add(y, y))
    assert grads[x] == pytest.approx(8.0)


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(3)
        leaves, loss_fn = OP_BUILDERS["lstm_cell"](rng)
        g = backward(loss_fn())
        return [g[v] for v in leaves.values()]
    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ops.sum(ops.mul(x, x))
    assert y.is_leaf


def test_grad_check_linear_and_lstm_examples():
    assert grad_check(OP_BUILDERS["linear"], seed=0).passed
    assert grad_check(OP_BUILDERS["lstm_cell"], seed=0).passed


@pytest.mark.parametrize("kind", sorted(OP_BUILDERS))
def test_every_op_kind_passes_gradcheck(kind):
    reports = run_suite({kind: OP_BUILDERS[kind]}, seeds=range(3))
    assert all(r.passed for r in reports), [list(r.lines()) for r in reports if not r.passed]


def test_corrupted_backward_rule_is_caught(monkeypatch):
    rule = ops.RULES["sigmoid"]
    bad = ops.Rule(rule.forward, lambda out, g: tuple(1.5 * x for x in rule.backward(out, g)))
    monkeypatch.setitem(ops.RULES, "sigmoid", bad)

    def build(rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        return {"x": x}, lambda: ops.sum(ops.sigmoid(x))
    report = grad_check(build, seed=0)
    assert not report.passed
    assert report.max_rel_err >= 1e-2


def test_orthogonal_init_is_orthonormal():
    q = orthogonal(np.random.default_rng(0), (8, 8)).data
    np.testing.assert_allclose(q @ q.T, np.eye(8), atol=1e-12)
    assert q.flags["C_CONTIGUOUS"]


# ---------------------------------------------------------------- RMSProp

def test_rmsprop_first_step_magnitude():
    p = {"w": Tensor(np.zeros(1))}
    opt = RMSProp(p, lr=0.1, smoothing=0.97, eps=1e-6)
    opt.step({"w": np.ones(1)})
    assert -p["w"].data[0] == pytest.approx(0.1 / np.sqrt(0.03 + 1e-6), rel=1e-12)
    assert -p["w"].data[0] == pytest.approx(0.57733, abs=2e-5)


def test_rmsprop_zero_grad_leaves_params():
    p = {"w": Tensor(np.arange(3.0))}
    RMSProp(p, lr=0.1).step({"w": np.zeros(3)})
    np.testing.assert_array_equal(p["w"].data, np.arange(3.0))


def test_rmsprop_successive_steps_shrink():
    p = {"w": Tensor(np.zeros(1))}
    opt = RMSProp(p, lr=0.1)
    opt.step({"w": np.ones(1)})
    first = -p["w"].data[0]
    opt.step({"w": np.ones(1)})
    assert 0 < -p["w"].data[0] - first < first


def test_rmsprop_missing_accumulator():
    with pytest.raises(KeyError):
        rmsprop_step({"w": Tensor(np.zeros(1))}, {"w": np.ones(1)}, 0.1, 0.97, 1e-6, {})


@pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(lr=0.1, smoothing=1.0), dict(lr=0.1, eps=0.0)])
def test_rmsprop_rejects_bad_hyperparameters(kw):
    with pytest.raises(ValueError):
        RMSProp({"w": Tensor(np.zeros(1))}, **kw)


# ---------------------------------------------------------------- archive

@given(st.dictionaries(st.text("abcxyz_", min_size=1, max_size=6),
                       arrays(np.float64, st.tuples(st.integers(0, 3), st.integers(1, 4)), elements=finite),
                       max_size=4),
       st.integers(0, 2**63))
def test_archive_round_trip(entries, seed):
    blob = archive.dumps(entries, seed, {"kind": "test"})
    out, seed2, manifest = archive.loads(blob)
    assert seed2 == seed and manifest == {"kind": "test"}
    assert set(out) == set(entries)
    for k in entries:
        np.testing.assert_array_equal(out[k], entries[k])


def test_archive_rejects_garbage():
    with pytest.raises(archive.ArchiveError):
        archive.loads(b"nope")
