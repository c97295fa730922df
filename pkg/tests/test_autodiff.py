import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hlfd import autodiff as ad
from hlfd.autodiff import NonFiniteError, ShapeError, Tensor
from hlfd.optim import AdamState, adam_step, cosine_lr


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for y in range(ho):
                for x_ in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[bi, ic, y * stride + i, x_ * stride + j] * w[oc, ic, i, j]
                    out[bi, oc, y, x_] = acc
    return out


def bilinear_pixel(img, out_h, out_w):
    """Direct align-corners evaluation, one output pixel at a time."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = 0.0 if out_h == 1 else i * (h - 1) / (out_h - 1)
            sx = 0.0 if out_w == 1 else j * (w - 1) / (out_w - 1)
            y0, x0 = min(int(math.floor(sy)), h - 1), min(int(math.floor(sx)), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


# -- conv2d -------------------------------------------------------------------

def test_conv_sum_of_ones():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5))
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_six_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
    assert out.shape == (2, 4, 8, 8)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, 1, 1), rtol=0, atol=1e-12)


def test_conv_strided_matches_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = np.zeros(3)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    assert out.shape == (1, 3, 4, 4)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, 2, 1), atol=1e-12)


@pytest.mark.parametrize("xs, ws", [((1, 2, 4, 4), (3, 3, 3, 3)), ((1, 1, 2, 2), (1, 1, 3, 3))])
def test_conv_rejects_bad_shapes(xs, ws):
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros(xs)), Tensor(np.zeros(ws)), Tensor(np.zeros(ws[0])))


# -- pooling ------------------------------------------------------------------

def test_max_pool_single_window():
    out = ad.max_pool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert out.data.item() == 4.0


def test_max_pool_constant_map():
    out = ad.max_pool2(Tensor(np.full((1, 2, 6, 4), 2.5)))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 2), 2.5))


def test_max_pool_window_scan_oracle():
    x = np.random.default_rng(3).standard_normal((1, 1, 4, 4))
    out = ad.max_pool2(Tensor(x)).data
    for i in range(2):
        for j in range(2):
            assert out[0, 0, i, j] == x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()


def test_max_pool_gradient_goes_to_argmax():
    x = Tensor(np.array([[[[1.0, 5.0], [3.0, 4.0]]]]), requires_grad=True)
    ad.backward(ad.tsum(ad.max_pool2(x)))
    np.testing.assert_array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


def test_max_pool_rejects_odd():
    with pytest.raises(ShapeError):
        ad.max_pool2(Tensor(np.zeros((1, 1, 3, 4))))


# -- bilinear resize ------------------------------------------------------------

def test_resize_constant():
    out = ad.bilinear_resize(Tensor(np.full((1, 1, 3, 7), 5.0)), 11, 2)
    np.testing.assert_allclose(out.data, 5.0, atol=1e-15)


def test_resize_2x2_to_4x4_formula():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = ad.bilinear_resize(Tensor(img[None, None]), 4, 4).data[0, 0]
    assert (out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]) == (0.0, 1.0, 2.0, 3.0)
    np.testing.assert_allclose(out, bilinear_pixel(img, 4, 4), atol=1e-14)


@pytest.mark.parametrize("src, dst", [((5, 3), (8, 8)), ((16, 16), (8, 8)), ((16, 16), (4, 4)), ((3, 3), (1, 5))])
def test_resize_matches_pixel_oracle(src, dst):
    img = np.random.default_rng(4).standard_normal(src)
    out = ad.bilinear_resize(Tensor(img[None, None]), *dst).data[0, 0]
    np.testing.assert_allclose(out, bilinear_pixel(img, *dst), atol=1e-13)


def test_resize_identity_is_bitwise():
    x = np.random.default_rng(5).standard_normal((2, 3, 3, 5))
    out = ad.bilinear_resize(Tensor(x), 3, 5)
    assert out.data.tobytes() == x.tobytes()


def test_resize_corners_preserved_on_upsample():
    x = np.random.default_rng(6).standard_normal((1, 1, 4, 6))
    out = ad.bilinear_resize(Tensor(x), 13, 9).data
    for a, b in [(0, 0), (0, -1), (-1, 0), (-1, -1)]:
        assert out[0, 0, a, b] == x[0, 0, a, b]


# -- concat ---------------------------------------------------------------------

def test_concat_single_and_order():
    a = Tensor(np.ones((1, 2, 2, 2)))
    b = Tensor(np.zeros((1, 2, 2, 2)))
    assert ad.concat_channels([a]) is a
    out = ad.concat_channels([a, b])
    assert out.shape == (1, 4, 2, 2)
    np.testing.assert_array_equal(out.data[:, :2], 1.0)
    np.testing.assert_array_equal(out.data[:, 2:], 0.0)


def test_concat_channel_additivity_and_mismatch():
    ts = [Tensor(np.zeros((2, c, 3, 3))) for c in (2, 3, 5)]
    assert ad.concat_channels(ts).shape[1] == 10
    with pytest.raises(ShapeError):
        ad.concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3)))])


# -- activations -------------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-2.0, 3.0])).data, [0.0, 3.0])


def test_softmax_examples():
    p = ad.softmax_channels(Tensor(np.zeros((1, 2, 1, 1)))).data.ravel()
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)
    p = ad.softmax_channels(Tensor(np.log([1.0, 3.0]).reshape(1, 2, 1, 1))).data.ravel()
    np.testing.assert_allclose(p, [0.25, 0.75], atol=1e-15)


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(7).standard_normal((2, 3, 4, 4)) * 5
    np.testing.assert_allclose(ad.log_softmax_channels(Tensor(x)).data,
                               np.log(ad.softmax_channels(Tensor(x)).data), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-50, 50))
def test_softmax_sums_and_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4)) * 10
    c = rng.uniform(-abs(shift) - 1, abs(shift) + 1, size=(2, 1, 4, 4))
    p = ad.softmax_channels(Tensor(x)).data
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12
    q = ad.softmax_channels(Tensor(x + c)).data
    assert np.abs(p - q).max() < 1e-10


# -- backward ------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(8).standard_normal((3, 4)), requires_grad=True)
    ad.backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_mean_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.mean(x * x))
    np.testing.assert_allclose(x.grad, [1.0, 2.0], atol=1e-15)


def test_backward_accumulates_and_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.tsum(x * 3.0)
    ad.backward(y)
    ad.backward(y)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    with pytest.raises(ShapeError):
        ad.backward(x * 2.0)


def test_intermediate_nodes_hold_gradients_of_their_shape():
    x = Tensor(np.random.default_rng(9).standard_normal((1, 2, 4, 4)), requires_grad=True)
    h = ad.relu(x)
    p = ad.max_pool2(h)
    ad.backward(ad.tsum(p * p))
    assert h.grad.shape == h.shape and p.grad.shape == p.shape


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.parents == ()


# -- gradcheck --------------------------------------------------------------------------

def test_gradcheck_linear_is_exact():
    # small magnitudes keep summation roundoff below the bound
    x = 1e-3 * np.random.default_rng(10).standard_normal((2, 3))
    assert ad.gradcheck(lambda t: ad.tsum(t), [x]) < 1e-12


def _rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


GRAD_CASES = {
    "conv2d": (lambda x, w, b: ad.tsum(ad.conv2d(x, w, b, 1, 1) ** 2),
               [_rand(2, 2, 5, 5, seed=1), _rand(3, 2, 3, 3, seed=2), _rand(3, seed=3)]),
    "conv2d_stride2": (lambda x, w, b: ad.tsum(ad.conv2d(x, w, b, 2, 1) ** 2),
                       [_rand(1, 2, 6, 6, seed=4), _rand(2, 2, 3, 3, seed=5), _rand(2, seed=6)]),
    "max_pool2": (lambda x: ad.tsum(ad.max_pool2(x) ** 2), [_rand(2, 4, 8, 8, seed=7)]),
    "bilinear_up": (lambda x: ad.tsum(ad.bilinear_resize(x, 7, 5) ** 2), [_rand(1, 2, 4, 3, seed=8)]),
    "bilinear_down": (lambda x: ad.tsum(ad.bilinear_resize(x, 3, 3) ** 2), [_rand(2, 1, 8, 8, seed=9)]),
    "concat": (lambda a, b: ad.tsum(ad.concat_channels([a, b]) * np.arange(5.0).reshape(1, 5, 1, 1)),
               [_rand(1, 2, 3, 3, seed=10), _rand(1, 3, 3, 3, seed=11)]),
    "relu": (lambda x: ad.tsum(ad.relu(x) ** 2), [_rand(2, 4, 8, 8, seed=12)]),
    "softmax": (lambda x: ad.tsum(ad.softmax_channels(x) * _rand(2, 3, 4, 4, seed=13)),
                [_rand(2, 3, 4, 4, seed=14)]),
    "log_softmax": (lambda x: ad.tsum(ad.log_softmax_channels(x) * _rand(2, 3, 4, 4, seed=15)),
                    [_rand(2, 3, 4, 4, seed=16)]),
    "abs_pow_sqrt": (lambda x: ad.tsum(ad.sqrt(ad.power(ad.absolute(x), 2.0) + 1.0)), [_rand(3, 4, seed=17)]),
    "div_log_exp": (lambda a, b: ad.mean(ad.log(ad.exp(a) + 1.0) / (b * b + 1.0)),
                    [_rand(4, 3, seed=18), _rand(1, 3, seed=19)]),
    "getitem_mean": (lambda x: ad.mean(x[:, 1] ** 3), [_rand(2, 3, 4, 4, seed=20)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_ops(name):
    f, inputs = GRAD_CASES[name]
    assert ad.gradcheck(f, inputs) < 1e-4


def test_gradcheck_reports_nonfinite_op():
    with pytest.raises(NonFiniteError) as err:
        ad.gradcheck(lambda x: ad.tsum(ad.log(x)), [np.array([-1.0, 2.0])])
    assert err.value.op == "log"


# -- linearity & determinism ------------------------------------------------------------------

@pytest.mark.parametrize("op", ["conv", "resize", "concat"])
def test_linearity(op):
    rng = np.random.default_rng(21)
    x, y = rng.standard_normal((2, 2, 4, 6)), rng.standard_normal((2, 2, 4, 6))
    a, b = 1.7, -0.3
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    f = {
        "conv": lambda t: ad.conv2d(Tensor(t), w, None, 1, 1).data,
        "resize": lambda t: ad.bilinear_resize(Tensor(t), 7, 3).data,
        "concat": lambda t: ad.concat_channels([Tensor(t), Tensor(2 * t)]).data,
    }[op]
    assert np.abs(f(a * x + b * y) - (a * f(x) + b * f(y))).max() < 1e-10


def test_graph_is_deterministic():
    def run():
        rng = np.random.default_rng(22)
        x = Tensor(rng.standard_normal((2, 2, 8, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        out = ad.mean(ad.softmax_channels(ad.bilinear_resize(ad.max_pool2(ad.relu(ad.conv2d(x, w, None, 1, 1))), 6, 6)) ** 2)
        ad.backward(out)
        return out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# -- optimizer & schedule -----------------------------------------------------------------------

def scalar_adam_trace(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_matches_scalar_trace():
    p = Tensor([0.5], requires_grad=True)
    state = AdamState()
    grads = [0.3, -1.2, 0.05]
    for g in grads:
        adam_step([p], [np.array([g])], state, lr=0.01)
    assert state.step == 3
    assert p.data[0] == pytest.approx(scalar_adam_trace(0.5, grads, 0.01), abs=1e-15)


def test_adam_first_step_is_lr_times_sign():
    p = Tensor([1.0, 1.0], requires_grad=True)
    adam_step([p], [np.array([2.0, -3.0])], AdamState(), lr=1e-3)
    np.testing.assert_allclose(p.data, [1.0 - 1e-3, 1.0 + 1e-3], rtol=0, atol=1e-10)


def test_adam_zero_gradient_leaves_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamState()
    for _ in range(3):
        adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([Tensor([1.0])], [np.zeros(2)], AdamState(), lr=0.1)


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100) == 0.001
    assert cosine_lr(100, 100) == pytest.approx(0.000001, abs=1e-18)
    assert cosine_lr(50, 100) == pytest.approx(5.005e-4, abs=1e-15)
    values = [cosine_lr(s, 37) for s in range(38)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        cosine_lr(101, 100)
