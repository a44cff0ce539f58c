import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check, close, numeric_grad
from yolocam.tensor import (BatchNorm, LayerParams, ShapeError, as_tensor, concat_channels, conv2d,
                            conv2d_backward_input, conv2d_forward, leaky_relu, logistic, maxpool,
                            pointwise, sigmoid, upsample2x)


def params(rng, o, i, k, bn=False, bias=True):
    w = rng.standard_normal((o, i, k, k))
    b = rng.standard_normal(o) if bias else np.zeros(o)
    norm = None
    if bn:
        norm = BatchNorm(rng.uniform(0.5, 2, o), rng.standard_normal(o), rng.standard_normal(o),
                         rng.uniform(0.1, 2, o))
    return LayerParams(w, b, norm)


def test_as_tensor_validates():
    assert as_tensor([[1, 2]]).dtype == np.float32
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((0, 3)))


def test_layer_params_invariants():
    with pytest.raises(ShapeError):
        LayerParams(np.zeros((2, 1, 1, 1)), np.zeros(3))
    with pytest.raises(ValueError):
        LayerParams(np.zeros((1, 1, 1, 1)), np.zeros(1),
                    BatchNorm(np.ones(1), np.zeros(1), np.zeros(1), -np.ones(1)))


# --- conv2d ---------------------------------------------------------------

def test_conv_identity_1x1(rng):
    x = rng.standard_normal((1, 5, 7)).astype(np.float32)
    p = LayerParams(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(conv2d_forward(x, p), x)


def test_conv_zero_input_gives_bias():
    b = np.array([0.5, -2.0, 3.0], np.float32)
    p = LayerParams(np.ones((3, 2, 3, 3), np.float32), b)
    out = conv2d_forward(np.zeros((2, 6, 6), np.float32), p, stride=1, pad=1)
    np.testing.assert_array_equal(out, np.broadcast_to(b[:, None, None], (3, 6, 6)))


def test_conv_all_ones_kernel_sums_window():
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3)
    p = LayerParams(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32))
    out = conv2d_forward(x, p)
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 45


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((3, 7, 7))
    p = params(rng, 4, 3, 3, bn=True)
    for stride, pad in [(1, 1), (2, 1), (1, 0), (2, 0)]:
        out = conv2d_forward(x, p, stride, pad)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        gain = p.batchnorm.scale / np.sqrt(p.batchnorm.var + p.eps)
        for o in range(4):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    raw = np.sum(xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3] * p.weights[o])
                    want = gain[o] * (raw - p.batchnorm.mean[o]) + p.batchnorm.shift[o]
                    assert out[o, i, j] == pytest.approx(want, rel=1e-10, abs=1e-10)


def test_conv_shape_errors(rng):
    p = params(rng, 2, 3, 3)
    with pytest.raises(ShapeError, match="3 input channels"):
        conv2d_forward(np.zeros((2, 5, 5)), p)
    with pytest.raises(ShapeError, match="integer output size"):
        conv2d_forward(np.zeros((3, 6, 6)), p, stride=2, pad=1)
    with pytest.raises(ShapeError):
        conv2d_backward_input(np.zeros((2, 4, 4)), p, 1, 1, (3, 5, 5))


def test_conv_backward_zero_grad(rng):
    p = params(rng, 2, 3, 3)
    g = conv2d_backward_input(np.zeros((2, 5, 5)), p, 1, 1, (3, 5, 5))
    assert g.shape == (3, 5, 5) and not g.any()


@pytest.mark.parametrize("bn", [False, True])
def test_conv_backward_1x1_single_position(rng, bn):
    p = params(rng, 3, 2, 1, bn=bn)
    g = np.zeros((3, 4, 4))
    g[:, 1, 2] = rng.standard_normal(3)
    grad_in = conv2d_backward_input(g, p, 1, 0, (2, 4, 4))
    scale = p.batchnorm.scale / np.sqrt(p.batchnorm.var + p.eps) if bn else np.ones(3)
    want = np.array([sum(g[c, 1, 2] * scale[c] * p.weights[c, k, 0, 0] for c in range(3)) for k in range(2)])
    mask = np.zeros((2, 4, 4), bool)
    mask[:, 1, 2] = True
    assert not grad_in[~mask].any()
    np.testing.assert_allclose(grad_in[:, 1, 2], want, rtol=1e-12)


@pytest.mark.parametrize("stride,pad,bn", [(1, 1, False), (1, 0, True), (2, 1, True)])
def test_conv_backward_finite_differences(rng, stride, pad, bn):
    x = rng.uniform(-3, 3, (2, 5, 5))
    p = params(rng, 3, 2, 3, bn=bn)
    out, backward = conv2d(x, p, stride, pad)
    r = rng.standard_normal(out.shape)
    n, excused, ok = check(lambda v: np.sum(r * conv2d_forward(v, p, stride, pad)), x, backward(r))
    assert ok and excused == 0


def test_conv_linearity(rng):
    p = params(rng, 3, 2, 3, bias=False)
    x, y = rng.standard_normal((2, 2, 6, 6))
    a, b = 1.7, -0.4
    lhs = conv2d_forward(a * x + b * y, p, 1, 1)
    rhs = a * conv2d_forward(x, p, 1, 1) + b * conv2d_forward(y, p, 1, 1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_conv_float32_preserved(rng):
    x = rng.standard_normal((2, 5, 5)).astype(np.float32)
    assert conv2d_forward(x, params(rng, 3, 2, 3), 1, 1).dtype == np.float32


def test_folded_batchnorm_matches(rng):
    p = params(rng, 3, 2, 3, bn=True)
    x = rng.standard_normal((2, 5, 5))
    np.testing.assert_allclose(conv2d_forward(x, p, 1, 1), conv2d_forward(x, p.folded(), 1, 1), atol=1e-10)


# --- pointwise ------------------------------------------------------------

def test_leaky_relu_values():
    out, backward = leaky_relu(np.array([-10.0, 0.0, 10.0]), 0.1)
    np.testing.assert_allclose(out, [-1, 0, 10])
    np.testing.assert_allclose(backward(np.ones(3)), [0.1, 1.0, 1.0])


def test_leaky_relu_slope_range():
    with pytest.raises(ValueError):
        leaky_relu(np.zeros(2), 1.5)


def test_sigmoid_at_zero():
    out, backward = logistic(np.array([0.0]))
    assert out[0] == 0.5
    assert backward(np.array([1.0]))[0] == 0.25


def test_sigmoid_stable_for_large_inputs():
    s = sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(s)) and s[0] == 0 and s[1] == 1


@pytest.mark.parametrize("kind", ["leaky", "logistic", "linear"])
def test_pointwise_finite_differences(rng, kind):
    x = rng.uniform(-3, 3, (2, 4, 4))
    out, backward = pointwise(kind, x)
    r = rng.standard_normal(out.shape)
    _, _, ok = check(lambda v: np.sum(r * pointwise(kind, v)[0]), x, backward(r))
    assert ok


def test_pointwise_backward_shape_error():
    _, backward = leaky_relu(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        backward(np.zeros((3, 2)))


# --- maxpool --------------------------------------------------------------

def brute_maxpool(x, size, stride):
    c, h, w = x.shape
    off = (size - 1) // 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    out = np.empty((c, ho, wo))
    arg = {}
    for k in range(c):
        for i in range(ho):
            for j in range(wo):
                best, pos = -np.inf, None
                for di in range(size):
                    for dj in range(size):
                        y, z = i * stride + di - off, j * stride + dj - off
                        if 0 <= y < h and 0 <= z < w and x[k, y, z] > best:
                            best, pos = x[k, y, z], (k, y, z)
                out[k, i, j] = best
                arg[(k, i, j)] = pos
    return out, arg


def test_maxpool_2x2():
    out, backward = maxpool(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4
    np.testing.assert_array_equal(backward(np.ones((1, 1, 1))), [[[0, 0], [0, 1]]])


def test_maxpool_tie_goes_to_first():
    out, backward = maxpool(np.full((1, 2, 2), 5.0), 2, 2)
    assert out[0, 0, 0] == 5
    np.testing.assert_array_equal(backward(np.ones((1, 1, 1))), [[[1, 0], [0, 0]]])


def test_maxpool_stride1_keeps_size():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    out, _ = maxpool(x, 2, 1)
    np.testing.assert_array_equal(out, [[[4, 5, 5], [7, 8, 8], [7, 8, 8]]])


@pytest.mark.parametrize("size,stride", [(2, 2), (2, 1), (3, 2), (3, 1)])
def test_maxpool_matches_brute_force(rng, size, stride):
    x = rng.standard_normal((1, 6, 6))
    out, backward = maxpool(x, size, stride)
    want, arg = brute_maxpool(x, size, stride)
    np.testing.assert_array_equal(out, want)
    g = rng.standard_normal(out.shape)
    expect = np.zeros_like(x)
    for key, pos in arg.items():
        expect[pos] += g[key]
    np.testing.assert_allclose(backward(g), expect, atol=1e-12)


def test_maxpool_finite_differences(rng):
    x = rng.uniform(-3, 3, (2, 6, 6))
    out, backward = maxpool(x, 2, 2)
    r = rng.standard_normal(out.shape)
    _, _, ok = check(lambda v: np.sum(r * maxpool(v, 2, 2)[0]), x, backward(r))
    assert ok


# --- upsample / concat ----------------------------------------------------

def test_upsample_single_value():
    out, backward = upsample2x(np.array([[[7.0]]]))
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 7.0))
    assert backward(np.ones((1, 2, 2)))[0, 0, 0] == 4


def test_upsample_backward_is_jacobian_transpose(rng):
    x = rng.standard_normal((1, 3, 3))
    out, backward = upsample2x(x)
    jac = np.zeros((out.size, x.size))
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = 1
        jac[:, k] = upsample2x(e.reshape(x.shape))[0].reshape(-1)
    g = rng.standard_normal(out.shape)
    np.testing.assert_allclose(backward(g).reshape(-1), jac.T @ g.reshape(-1))


def test_concat_order_and_split(rng):
    a, b = rng.standard_normal((2, 4, 4)), rng.standard_normal((3, 4, 4))
    out, backward = concat_channels([a, b])
    assert out.shape == (5, 4, 4)
    np.testing.assert_array_equal(out[:2], a)
    g = rng.standard_normal(out.shape)
    ga, gb = backward(g)
    np.testing.assert_array_equal(ga, g[:2])
    np.testing.assert_array_equal(gb, g[2:])


def test_concat_single_is_identity(rng):
    a = rng.standard_normal((2, 3, 3))
    out, backward = concat_channels([a])
    np.testing.assert_array_equal(out, a)
    g = rng.standard_normal(a.shape)
    np.testing.assert_array_equal(backward(g)[0], g)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels([np.zeros((1, 2, 2)), np.zeros((1, 3, 3))])


# --- properties -----------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.sampled_from([1, 3]), bn=st.booleans())
def test_kernels_deterministic_and_finite(seed, k, bn):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3, 3, (2, 6, 6)).astype(np.float32)
    p = params(rng, 3, 2, k, bn=bn)
    a = conv2d_forward(x, p, 1, k // 2)
    b = conv2d_forward(x.copy(), p, 1, k // 2)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(a))
    for out in (leaky_relu(a)[0], logistic(a)[0], maxpool(a, 2, 2)[0], upsample2x(a)[0]):
        assert np.all(np.isfinite(out))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 3]))
    x = rng.uniform(-3, 3, (2, 5, 5))
    p = params(rng, 2, 2, k, bn=bool(rng.integers(2)))
    out, backward = conv2d(x, p, 1, k // 2)
    r = rng.standard_normal(out.shape)
    assert close(backward(r), numeric_grad(lambda v: np.sum(r * conv2d_forward(v, p, 1, k // 2)), x)).all()
