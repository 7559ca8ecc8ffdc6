import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import gradcheck_suite
from dualteacher.tensor import (
    SGD,
    NonFiniteError,
    ParamSet,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    conv2d,
    mul,
    pixel_cross_entropy,
    relu,
    scale,
    sgd_step,
    soft_cross_entropy,
    softmax,
    tensor_sum,
)


@pytest.mark.parametrize("name", sorted(gradcheck_suite.INSTANCES))
def test_finite_difference_gradients(name):
    assert gradcheck_suite.worst_error(name) < gradcheck_suite.TOL


def conv_loops(x, w, b):
    """Direct seven-loop oracle for 3x3 same-padded cross-correlation."""
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, cout, h, wd))
    for i in range(n):
        for o in range(cout):
            for y in range(h):
                for z in range(wd):
                    out[i, o, y, z] = b[o] + sum(
                        xp[i, c, y + dy, z + dx] * w[o, c, dy, dx]
                        for c in range(cin) for dy in range(3) for dx in range(3))
    return out


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, conv_loops(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_identity_kernel():
    x = np.arange(2 * 1 * 4 * 4, dtype=np.float32).reshape(2, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_dtype_is_preserved():
    f32 = Tensor(np.ones((1, 1, 3, 3)), dtype=np.float32)
    w32 = Tensor(np.ones((1, 1, 3, 3), np.float32))
    b32 = Tensor(np.zeros(1, np.float32))
    assert conv2d(f32, w32, b32).dtype == np.float32
    assert Tensor(np.ones(3)).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


def test_shape_errors():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        mul(Tensor(np.ones((2, 2))), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones(1)))
    with pytest.raises(ShapeError):
        pixel_cross_entropy(Tensor(np.zeros((1, 2, 3, 3))), np.zeros((1, 3, 4), int))
    with pytest.raises(ShapeError):
        soft_cross_entropy(Tensor(np.zeros((1, 2, 3, 3))), np.zeros((1, 3, 3, 3)))


def test_non_finite_inputs_are_rejected():
    x = np.ones((1, 1, 3, 3))
    x[0, 0, 1, 1] = np.nan
    with pytest.raises(NonFiniteError):
        conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones(1)))
    logits = np.zeros((1, 2, 2, 2))
    logits[0, 1, 0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        pixel_cross_entropy(Tensor(logits), np.zeros((1, 2, 2), int))


def test_cross_entropy_closed_forms():
    # uniform logits: -log(1/C) everywhere
    loss = pixel_cross_entropy(Tensor(np.zeros((2, 4, 3, 3))), np.ones((2, 3, 3), int))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)
    # two classes, logit gap d on the right class: log(1 + e^-d)
    logits = np.zeros((1, 2, 1, 1))
    logits[0, 1] = 1.5
    assert pixel_cross_entropy(Tensor(logits), np.array([[[1]]])).item() == pytest.approx(
        math.log1p(math.exp(-1.5)), abs=1e-12)


def test_cross_entropy_ignores_label_255():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 3, 2, 2))
    target = np.array([[[0, 255], [2, 255]]])
    full = pixel_cross_entropy(Tensor(logits), target).item()
    logp = np.log(softmax(logits))
    assert full == pytest.approx(-(logp[0, 0, 0, 0] + logp[0, 2, 1, 0]) / 2, abs=1e-12)
    t = Tensor(logits, requires_grad=True)
    backward(pixel_cross_entropy(t, target))
    assert np.all(t.grad[0, :, :, 1] == 0)
    with pytest.raises(ValueError):
        pixel_cross_entropy(Tensor(logits), np.full((1, 2, 2), 255))


def test_soft_cross_entropy_matches_hard_for_one_hot():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(2, 3, 2, 2))
    target = rng.integers(0, 3, size=(2, 2, 2))
    q = np.eye(3)[target].transpose(0, 3, 1, 2)
    assert soft_cross_entropy(Tensor(logits), q).item() == pytest.approx(
        pixel_cross_entropy(Tensor(logits), target).item(), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 2, 2), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(logits):
    p = softmax(logits)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_affine_in_its_input(seed, a, b):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(size=(2, 1, 2, 4, 4))
    w, bias = Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(rng.normal(size=3))
    zero = Tensor(np.zeros(3))
    lhs = conv2d(Tensor(a * x1 + b * x2), w, zero).data
    rhs = a * conv2d(Tensor(x1), w, zero).data + b * conv2d(Tensor(x2), w, zero).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
    np.testing.assert_allclose(conv2d(Tensor(x1), w, bias).data - conv2d(Tensor(x1), w, zero).data,
                               np.broadcast_to(bias.data[None, :, None, None], (1, 3, 4, 4)), atol=1e-12)


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        backward(Tensor(np.ones(3), requires_grad=True))


def test_gradients_accumulate_and_shared_nodes_sum():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = tensor_sum(mul(x, x))  # x used twice
    backward(y)
    np.testing.assert_array_equal(x.grad, [4.0, -2.0])
    backward(tensor_sum(scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [7.0, 1.0])


def test_unreached_params_get_zero_grad():
    p = ParamSet()
    p["a"], p["b"] = Tensor(np.ones(2)), Tensor(np.ones(3))
    backward(tensor_sum(relu(p["a"])), params=p)
    np.testing.assert_array_equal(p["a"].grad, [1.0, 1.0])
    np.testing.assert_array_equal(p["b"].grad, np.zeros(3))


def test_tape_is_topological():
    a = Tensor(np.ones(2), requires_grad=True)
    b = relu(a)
    c = add(b, a)
    d = tensor_sum(c)
    order = Tape.record(d).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]
    assert len(order) == 4


def test_sgd_update_closed_form():
    p = ParamSet()
    p["w"] = Tensor(np.array([1.0, -2.0]))
    p["w"].grad = np.array([0.5, 0.5])
    SGD(p, lr=0.1, weight_decay=0.01).step()
    np.testing.assert_allclose(p["w"].data, [1.0 - 0.1 * (0.5 + 0.01), -2.0 - 0.1 * (0.5 - 0.02)])
    assert p["w"].grad is None


def test_sgd_momentum_and_clipping():
    p = ParamSet()
    p["w"] = Tensor(np.zeros(2))
    opt = SGD(p, lr=1.0, momentum=0.5, clip_norm=1.0)
    p["w"].grad = np.array([3.0, 4.0])
    opt.step()
    assert opt.last_grad_norm == pytest.approx(5.0)
    np.testing.assert_allclose(p["w"].data, [-0.6, -0.8])
    p["w"].grad = np.array([0.0, 0.5])
    opt.step()
    np.testing.assert_allclose(p["w"].data, [-0.6 - 0.3, -0.8 - (0.4 + 0.5)])


def test_sgd_requires_every_gradient():
    p = ParamSet()
    p["w"] = Tensor(np.zeros(2))
    with pytest.raises(ValueError):
        sgd_step(p, 0.1)


def test_paramset_flat_round_trip_and_equality():
    rng = np.random.default_rng(0)
    p = ParamSet()
    p["a"], p["b"] = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=4))
    q = p.copy()
    assert q.equals(p)
    q.load_flat(p.to_flat() + 1)
    assert not q.equals(p)
    q.load_flat(p.to_flat())
    assert q.equals(p)
    assert p.flat_length == 10
    with pytest.raises(ShapeError):
        q.load_flat(np.zeros(3))
    with pytest.raises(TypeError):
        p["c"] = np.zeros(2)
