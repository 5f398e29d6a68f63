import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from layerpos import diffcore as dc
from layerpos.diffcore import Tape, finite_diff_gradient


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


# ---------------------------------------------------------------- shapes

def test_matmul_shape():
    t = Tape()
    out = t.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 4))))
    assert out.value.shape == (2, 4)


def test_add_shape_and_value():
    t = Tape()
    a = np.arange(5.0)
    out = t.add(t.leaf(a), t.leaf(2 * a))
    assert out.value.shape == (5,)
    np.testing.assert_array_equal(out.value, 3 * a)


def test_matmul_inner_dimension_mismatch():
    t = Tape()
    with pytest.raises(dc.ShapeMismatch):
        t.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3))))


def test_elementwise_requires_equal_shapes():
    t = Tape()
    with pytest.raises(dc.ShapeMismatch):
        t.mul(t.leaf(np.ones(3)), t.leaf(np.ones(4)))


def test_unknown_primitive_and_foreign_node():
    t, other = Tape(), Tape()
    x = other.leaf(np.ones(2))
    with pytest.raises(ValueError):
        t.record_op("no_such_op", [t.leaf(np.ones(2))])
    with pytest.raises(ValueError):
        t.relu(x)


def test_non_finite_result_is_an_error():
    t = Tape()
    with pytest.raises(dc.NonFiniteError):
        t.scale(t.leaf(np.array([1e308])), 10.0)


def test_leaf_rejects_non_finite():
    with pytest.raises(dc.NonFiniteError):
        Tape().leaf(np.array([np.nan]))


# ---------------------------------------------------------------- backward

def test_dot_self_gradient():
    t = Tape()
    x = t.leaf(np.array([3.0]), trainable=True)
    g = t.backward(t.dot(x, x))
    np.testing.assert_allclose(g[x], [6.0])


def test_sigmoid_gradient_at_zero():
    t = Tape()
    x = t.leaf(np.array(0.0), trainable=True)
    g = t.backward(t.sigmoid(x))
    assert g[x] == pytest.approx(0.25, abs=1e-15)


def test_relu_subgradient_at_zero_is_zero():
    t = Tape()
    x = t.leaf(np.array([0.0, 1.0, -1.0]), trainable=True)
    g = t.backward(t.sum(t.relu(x)))
    np.testing.assert_array_equal(g[x], [0.0, 1.0, 0.0])


def test_backward_requires_scalar_output():
    t = Tape()
    x = t.leaf(np.ones(3), trainable=True)
    with pytest.raises(dc.NotScalarError):
        t.backward(t.relu(x))


def test_non_trainable_leaves_get_no_entry():
    t = Tape()
    x = t.leaf(np.ones(3), trainable=True)
    c = t.leaf(np.ones(3))
    g = t.backward(t.dot(x, c))
    assert x in g and c not in g


def test_unused_trainable_leaf_gets_zero_gradient():
    t = Tape()
    x = t.leaf(np.ones(3), trainable=True)
    y = t.leaf(np.ones(2), trainable=True)
    g = t.backward(t.sum(x))
    np.testing.assert_array_equal(g[y], np.zeros(2))


def test_norm_of_matrix_vector_product_matches_finite_differences():
    rng = np.random.default_rng(7)
    W0 = rng.uniform(-1, 1, (4, 4))
    v = rng.uniform(-1, 1, 4)

    def build(tape, W):
        return tape.l2norm(tape.matmul(W, tape.leaf(v)))

    t = Tape()
    W = t.leaf(W0, trainable=True)
    g = t.backward(build(t, W))[W]
    fd = finite_diff_gradient(lambda w: float(np.linalg.norm(w @ v)), W0, 1e-5)
    assert rel_err(g, fd) < 1e-6


def test_composite_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(3)
    X = rng.uniform(-1, 1, (5, 3))
    W1 = rng.uniform(-1, 1, (4, 3))
    W2 = rng.uniform(-1, 1, (2, 4))
    b1 = rng.uniform(-1, 1, 4)

    def f(w1):
        h = np.maximum(X @ w1.T + b1, 0)
        return float(np.mean((h @ W2.T) ** 2))

    t = Tape()
    w = t.leaf(W1, trainable=True)
    h = t.relu(t.add_bias(t.matmul(t.leaf(X), t.transpose(w)), t.leaf(b1)))
    y = t.matmul(h, t.transpose(t.leaf(W2)))
    loss = t.mean(t.mul(y, y))
    assert loss.value == pytest.approx(f(W1), rel=1e-14)
    assert rel_err(t.backward(loss)[w], finite_diff_gradient(f, W1, 1e-5)) < 1e-6


# ---------------------------------------------------------------- finite differences

def test_finite_diff_of_sum_is_exact():
    fd = finite_diff_gradient(lambda x: float(np.sum(x)), np.array([1.0, 2.0, 3.0]), 0.1)
    np.testing.assert_allclose(fd, [1.0, 1.0, 1.0], atol=1e-14)


def test_finite_diff_of_square():
    fd = finite_diff_gradient(lambda x: float(x @ x), np.array([3.0]), 1e-5)
    assert abs(fd[0] - 6.0) < 1e-8


def test_finite_diff_rejects_bad_step_and_non_finite():
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda x: 0.0, np.zeros(2), 0.0)
    with pytest.raises(dc.NonFiniteError):
        finite_diff_gradient(lambda x: float("inf"), np.zeros(2), 1e-5)


def test_finite_diff_does_not_mutate_input():
    x = np.array([1.0, -2.0])
    before = x.copy()
    finite_diff_gradient(lambda y: float(y @ y), x, 1e-3)
    np.testing.assert_array_equal(x, before)


# ---------------------------------------------------------------- fused primitives

def test_lora_linear_matches_composed_primitives():
    rng = np.random.default_rng(11)
    H = rng.uniform(-1, 1, (6, 5))
    W0 = rng.uniform(-1, 1, (4, 5))
    b = rng.uniform(-1, 1, 4)
    A = rng.uniform(-1, 1, (2, 5))
    B = rng.uniform(-1, 1, (4, 2))
    s = 0.8
    t = Tape()
    leaves = [t.leaf(v, trainable=True) for v in (H, W0, b, A, B, np.array(s))]
    fused = t.lora_linear(*leaves)
    ref = H @ W0.T + b + s * (H @ A.T) @ B.T
    np.testing.assert_allclose(fused.value, ref, atol=1e-13)

    G = rng.uniform(-1, 1, ref.shape)
    grads = t.backward(t.sum(t.mul(fused, t.leaf(G))))

    t2 = Tape()
    l2 = [t2.leaf(v, trainable=True) for v in (H, W0, b, A, B, np.array(s))]
    h, w0, bb, a, bm, sc = l2
    base = t2.add_bias(t2.matmul(h, t2.transpose(w0)), bb)
    low = t2.matmul(t2.matmul(h, t2.transpose(a)), t2.transpose(bm))
    lowscaled = t2.mul(low, t2.broadcast_scalar(sc, low.value.shape))
    out = t2.add(base, lowscaled)
    grads2 = t2.backward(t2.sum(t2.mul(out, t2.leaf(G))))
    for n1, n2 in zip(leaves, l2):
        np.testing.assert_allclose(grads[n1], grads2[n2], atol=1e-12)


def test_lora_linear_accepts_a_single_vector():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, 5)
    W0 = rng.uniform(-1, 1, (3, 5))
    t = Tape()
    out = t.lora_linear(t.leaf(x), t.leaf(W0), t.leaf(np.zeros(3)),
                        t.leaf(np.zeros((2, 5))), t.leaf(np.zeros((3, 2))), t.leaf(np.array(1.0)))
    assert out.value.shape == (3,)
    np.testing.assert_allclose(out.value, W0 @ x, atol=1e-14)


# ---------------------------------------------------------------- properties

_vec = hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-1, 1))


@settings(max_examples=50, deadline=None)
@given(_vec)
def test_evaluation_is_bit_deterministic(x):
    def run():
        t = Tape()
        a = t.leaf(x, trainable=True)
        loss = t.l2norm(t.add(t.sigmoid(a), t.mul(a, a)))
        return loss.value, t.backward(loss)[a]

    (v1, g1), (v2, g2) = run(), run()
    assert v1.tobytes() == v2.tobytes() and g1.tobytes() == g2.tobytes()


@settings(max_examples=50, deadline=None)
@given(_vec)
def test_gradient_of_sum_is_sum_of_gradients(x):
    def grad(which):
        t = Tape()
        a = t.leaf(x, trainable=True)
        f1 = t.mean(t.sigmoid(a))
        f2 = t.dot(a, a)
        out = {"f1": f1, "f2": f2, "both": None}[which]
        if out is None:
            out = t.add(f1, f2)
        return t.backward(out)[a]

    np.testing.assert_allclose(grad("both"), grad("f1") + grad("f2"), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-1, 1)),
       hnp.arrays(np.float64, (4,), elements=st.floats(-1, 1)))
def test_tape_references_point_backwards(m, v):
    t = Tape()
    out = t.sum(t.relu(t.matmul(t.leaf(m), t.leaf(v, trainable=True))))
    for i, node in enumerate(t.nodes):
        assert node.index == i
        assert all(p.index < i for p in node.inputs)
    assert out is t.nodes[-1]
