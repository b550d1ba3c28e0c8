import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcnn import nn


def naive_conv(x, w, b, stride):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for a in range(n):
        for co in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = b[co]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[a, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    out[a, co, i, j] = acc
    return out


def naive_matmul(x, w):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            for k in range(x.shape[1]):
                out[i, j] += x[i, k] * w[k, j]
    return out


def away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# ------------------------------------------------------------------ conv2d


def test_conv_network_shapes():
    x = np.zeros((1, 1, 224, 224), np.float32)
    out, _ = nn.conv2d_forward(x, np.zeros((32, 1, 11, 11), np.float32), np.zeros(32, np.float32), 3)
    assert out.shape == (1, 32, 72, 72)
    x = np.zeros((1, 32, 36, 36), np.float32)
    out, _ = nn.conv2d_forward(x, np.zeros((64, 32, 3, 3), np.float32), np.zeros(64, np.float32), 1)
    assert out.shape == (1, 64, 34, 34)


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 6, 5))
    out, _ = nn.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1), 1)
    np.testing.assert_array_equal(out, x)


def test_conv_matches_nested_loops(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    w = rng.standard_normal((1, 1, 2, 2))
    b = rng.standard_normal(1)
    out, _ = nn.conv2d_forward(x, w, b, 1)
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_allclose(out, naive_conv(x, w, b, 1), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_multichannel_matches_nested_loops(rng, stride):
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 2))
    b = rng.standard_normal(4)
    out, _ = nn.conv2d_forward(x, w, b, stride)
    np.testing.assert_allclose(out, naive_conv(x, w, b, stride), rtol=1e-10, atol=1e-10)


def test_conv_errors(rng):
    with pytest.raises(nn.ShapeError):
        nn.conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(nn.ShapeError):
        nn.conv2d_forward(rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(nn.ShapeError):
        nn.conv2d_forward(rng.standard_normal((1, 1, 5, 5)), rng.standard_normal((1, 1, 3, 3)), np.zeros(1), 0)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 40), k=st.integers(1, 12), s=st.integers(1, 5))
def test_conv_output_extent_property(h, k, s):
    if k > h:
        with pytest.raises(nn.ShapeError):
            nn.output_extent(h, k, s)
        return
    x = np.zeros((1, 1, h, h))
    out, _ = nn.conv2d_forward(x, np.zeros((1, 1, k, k)), np.zeros(1), s)
    assert out.shape[2] == out.shape[3] == math.floor((h - k) / s) + 1


def test_conv_grad_check_spec_case(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    assert nn.grad_check(nn.conv2d_forward, nn.conv2d_backward, [x, w, b]) < 1e-4


def test_conv_backward_without_input_grad(rng):
    x = rng.standard_normal((2, 1, 8, 8))
    w = rng.standard_normal((2, 1, 3, 3))
    _, cache = nn.conv2d_forward(x, w, np.zeros(2), 2)
    dout = rng.standard_normal((2, 2, 3, 3))
    dx, dw, db = nn.conv2d_backward(dout, cache, need_dx=False)
    full = nn.conv2d_backward(dout, cache)
    assert dx is None
    np.testing.assert_array_equal(dw, full[1])
    np.testing.assert_array_equal(db, full[2])


# ------------------------------------------------------------------ relu


def test_relu_values():
    out, _ = nn.relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0, 0, 2])
    pos = np.array([0.5, 3.0])
    np.testing.assert_array_equal(nn.relu_forward(pos)[0], pos)


def test_relu_gradient():
    x = np.array([-1.0, 2.0])
    _, cache = nn.relu_forward(x)
    np.testing.assert_array_equal(nn.relu_backward(np.array([5.0, 7.0]), cache), [0.0, 7.0])
    assert nn.grad_check(nn.relu_forward, nn.relu_backward, [x]) < 1e-6


# ------------------------------------------------------------------ maxpool


def test_maxpool_shape_chain():
    out, _ = nn.maxpool2d_forward(np.zeros((1, 2, 72, 72)), 2, 2)
    assert out.shape == (1, 2, 36, 36)


def test_maxpool_constant():
    out, _ = nn.maxpool2d_forward(np.full((1, 1, 6, 6), 3.5), 2, 2)
    np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 3.5))


def test_maxpool_brute_force(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    out, cache = nn.maxpool2d_forward(x, 2, 2)
    expected = np.array([[x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(2)] for i in range(2)])
    np.testing.assert_array_equal(out[0, 0], expected)
    up = rng.standard_normal(out.shape)
    dx = nn.maxpool2d_backward(up, cache)
    assert dx.sum() == pytest.approx(up.sum())
    assert np.count_nonzero(dx) == 4


def test_maxpool_ties_go_to_first_position():
    x = np.ones((1, 1, 2, 2))
    _, cache = nn.maxpool2d_forward(x, 2, 2)
    dx = nn.maxpool2d_backward(np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])


def test_maxpool_overlapping_windows_grad(rng):
    x = rng.standard_normal((2, 2, 7, 7))
    assert nn.grad_check(lambda a: nn.maxpool2d_forward(a, 3, 2), nn.maxpool2d_backward, [x]) < 1e-4


def test_maxpool_window_too_large():
    with pytest.raises(nn.ShapeError):
        nn.maxpool2d_forward(np.zeros((1, 1, 3, 3)), 4, 1)


# ------------------------------------------------------------------ energy


def test_energy_width():
    out, _ = nn.energy_pool_forward(np.ones((2, 64, 34, 34)))
    assert out.shape == (2, 64)


def test_energy_constant_and_negative():
    out, _ = nn.energy_pool_forward(np.full((1, 1, 3, 3), 2.5))
    assert out[0, 0] == 2.5
    out, _ = nn.energy_pool_forward(np.full((1, 1, 3, 3), -2.5))
    assert out[0, 0] == 0.0


def test_energy_hand_computed():
    out, _ = nn.energy_pool_forward(np.array([[[[1.0, -1.0], [2.0, 0.0]]]]))
    assert out[0, 0] == pytest.approx(0.75)


def test_energy_backward_zero_at_kink():
    x = np.array([[[[1.0, -1.0], [2.0, 0.0]]]])
    _, cache = nn.energy_pool_forward(x)
    dx = nn.energy_pool_backward(np.array([[4.0]]), cache)
    np.testing.assert_array_equal(dx[0, 0], [[1.0, 0.0], [1.0, 0.0]])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 8), w=st.integers(1, 8))
def test_energy_permutation_invariance(seed, h, w):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, h, w))
    perm = rng.permutation(h * w)
    y = x.reshape(1, 2, -1)[:, :, perm].reshape(1, 2, h, w)
    a, _ = nn.energy_pool_forward(x)
    b, _ = nn.energy_pool_forward(y)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


# ------------------------------------------------------------------ dense / concat


def test_dense_parameter_count():
    w, b = np.zeros((96, 128)), np.zeros(128)
    assert w.size + b.size == 12416


def test_dense_identity(rng):
    x = rng.standard_normal((3, 4))
    out, _ = nn.dense_forward(x, np.eye(4), np.zeros(4))
    np.testing.assert_array_equal(out, x)


def test_dense_matches_triple_loop(rng):
    x = rng.standard_normal((2, 3))
    w = rng.standard_normal((3, 2))
    out, _ = nn.dense_forward(x, w, np.zeros(2))
    np.testing.assert_allclose(out, naive_matmul(x, w), rtol=1e-12)


def test_dense_mismatch(rng):
    with pytest.raises(nn.ShapeError):
        nn.dense_forward(rng.standard_normal((2, 3)), rng.standard_normal((4, 2)), np.zeros(2))


def test_dense_grad_check(rng):
    args = [rng.standard_normal((4, 6)), rng.standard_normal((6, 5)), rng.standard_normal(5)]
    assert nn.grad_check(nn.dense_forward, nn.dense_backward, args) < 1e-4


def test_concat_widths(rng):
    out, cache = nn.concat_forward([np.ones((5, 64)), np.ones((5, 32))])
    assert out.shape == (5, 96)
    a, b = nn.concat_backward(np.ones((5, 96)), cache)
    np.testing.assert_array_equal(a, np.ones((5, 64)))
    np.testing.assert_array_equal(b, np.ones((5, 32)))


def test_concat_single_part(rng):
    x = rng.standard_normal((3, 7))
    out, _ = nn.concat_forward([x])
    np.testing.assert_array_equal(out, x)


def test_concat_batch_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.concat_forward([np.ones((2, 3)), np.ones((3, 3))])


@settings(max_examples=50, deadline=None)
@given(widths=st.lists(st.integers(1, 6), min_size=1, max_size=4), seed=st.integers(0, 1000))
def test_concat_backward_roundtrip(widths, seed):
    rng = np.random.default_rng(seed)
    _, cache = nn.concat_forward([np.zeros((2, w)) for w in widths])
    up = rng.standard_normal((2, sum(widths)))
    again, _ = nn.concat_forward(nn.concat_backward(up, cache))
    np.testing.assert_array_equal(again, up)


# ------------------------------------------------------------------ softmax / xent


def test_softmax_uniform():
    probs, loss, _ = nn.softmax_xent(np.zeros((1, 3)), [0])
    np.testing.assert_allclose(probs, [[1 / 3] * 3])
    assert loss == pytest.approx(math.log(3), abs=1e-12)


def test_softmax_saturated():
    _, loss, _ = nn.softmax_xent(np.array([[10.0, -10.0, -10.0]]), [0])
    assert loss < 1e-4


def test_softmax_grad_finite_differences(rng):
    logits = rng.standard_normal((4, 3))
    targets = np.array([0, 2, 1, 2])
    _, _, grad = nn.softmax_xent(logits, targets)
    eps = 1e-6
    numeric = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += eps
        down[idx] -= eps
        numeric[idx] = (nn.softmax_xent(up, targets)[1] - nn.softmax_xent(down, targets)[1]) / (2 * eps)
    np.testing.assert_allclose(grad, numeric, atol=1e-6)


def test_softmax_bad_target():
    with pytest.raises(IndexError):
        nn.softmax_xent(np.zeros((1, 3)), [3])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_softmax_rows_and_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 4)) * 5
    targets = rng.integers(0, 4, 5)
    probs, loss, _ = nn.softmax_xent(logits, targets)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)
    _, shifted, _ = nn.softmax_xent(logits + shift, targets)
    assert shifted == pytest.approx(loss, abs=1e-6)


# ------------------------------------------------------------------ optimizer


def test_sgd_single_update():
    params = {"p": np.array([1.0])}
    nn.optimizer_step(params, {"p": np.array([0.5])}, nn.OptimizerState(),
                      nn.OptimizerConfig("sgd", lr=0.1, momentum=0.0))
    assert params["p"][0] == pytest.approx(0.95)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_fixed_point(kind):
    params = {"p": np.array([1.0, -2.0])}
    state = nn.OptimizerState()
    nn.optimizer_step(params, {"p": np.zeros(2)}, state, nn.OptimizerConfig(kind))
    np.testing.assert_array_equal(params["p"], [1.0, -2.0])
    assert state.step == 1


def test_quadratic_bowl_decay():
    params = {"p": np.array([1.0])}
    state = nn.OptimizerState()
    cfg = nn.OptimizerConfig("sgd", lr=0.1, momentum=0.0)
    for _ in range(100):
        nn.optimizer_step(params, {"p": 2 * params["p"]}, state, cfg)
    assert abs(params["p"][0]) < 1e-8
    assert params["p"][0] == pytest.approx(0.8 ** 100, rel=1e-9)
    assert state.step == 100


def test_adam_first_step_is_lr_times_sign():
    # bias correction makes the first step exactly lr * g / (|g| + eps)
    params = {"p": np.array([0.0, 0.0])}
    nn.optimizer_step(params, {"p": np.array([3.0, -0.5])}, nn.OptimizerState(), nn.OptimizerConfig("adam", lr=0.01))
    np.testing.assert_allclose(params["p"], [-0.01, 0.01], rtol=1e-6)


def test_non_finite_gradient_refused():
    params = {"p": np.array([1.0])}
    state = nn.OptimizerState()
    with pytest.raises(nn.NonFiniteError):
        nn.optimizer_step(params, {"p": np.array([np.nan])}, state, nn.OptimizerConfig("sgd"))
    assert params["p"][0] == 1.0
    assert state.step == 0


def test_accumulators_mirror_parameter_shapes():
    params = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
    state = nn.OptimizerState()
    nn.optimizer_step(params, {k: np.ones_like(v) for k, v in params.items()}, state, nn.OptimizerConfig("adam"))
    assert {k: v.shape for k, v in state.first.items()} == {"a": (2, 3), "b": (4,)}
    assert {k: v.shape for k, v in state.second.items()} == {"a": (2, 3), "b": (4,)}


# ------------------------------------------------------------------ determinism


def test_op_sequence_bit_identical(rng):
    x = rng.standard_normal((2, 1, 20, 20)).astype(np.float32)
    w = rng.standard_normal((4, 1, 5, 5)).astype(np.float32)

    def run():
        c, _ = nn.conv2d_forward(x, w, np.zeros(4, np.float32), 2)
        r, _ = nn.relu_forward(c)
        p, _ = nn.maxpool2d_forward(r, 2, 2)
        return nn.energy_pool_forward(p)[0]

    assert run().tobytes() == run().tobytes()
