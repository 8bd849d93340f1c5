import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fd_error, t64
from edgenat import tensor as T
from edgenat.gradcheck import check_gradients
from edgenat.tensor import ContractError, DimensionError, NonFiniteError, Tensor, precision


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- conv2d


def test_conv_box_sum():
    x = Tensor(np.ones((1, 4, 4)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = T.conv2d(x, w, Tensor(np.zeros(1)), stride=1, padding=1).data[0]
    assert y[1, 1] == 9.0 and y[2, 2] == 9.0
    assert y[0, 0] == y[0, 3] == y[3, 0] == y[3, 3] == 4.0


def test_two_stride2_convs_quarter_resolution():
    x = Tensor(rng().random((3, 320, 320)))
    w1, w2 = Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros((2, 2, 3, 3)))
    b = Tensor(np.zeros(2))
    y = T.conv2d(T.conv2d(x, w1, b, stride=2, padding=1), w2, b, stride=2, padding=1)
    assert y.shape == (2, 80, 80)


@pytest.mark.parametrize("seed", range(3))
def test_conv_input_gradient(seed):
    r = rng(seed)
    x, w, b = t64(r.standard_normal((2, 5, 5))), t64(r.standard_normal((3, 2, 3, 3))), t64(r.standard_normal(3))
    assert fd_error(lambda: T.conv2d(x, w, b, stride=1, padding=1), {"x": x}, seed) < 1e-3


@given(st.integers(1, 4), st.integers(1, 7), st.integers(1, 7))
def test_dirac_kernel_is_identity(c, h, w):
    x = Tensor(rng(c * 100 + h * 10 + w).standard_normal((c, h, w)))
    k = np.zeros((c, c, 3, 3), np.float32)
    k[np.arange(c), np.arange(c), 1, 1] = 1.0
    y = T.conv2d(x, Tensor(k), Tensor(np.zeros(c)), stride=1, padding=1)
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)), 1, 1)


# ------------------------------------------------------------ resampling


def test_identity_resize_is_exact():
    x = Tensor(rng().standard_normal((3, 5, 7)))
    np.testing.assert_array_equal(T.bilinear_resize(x, 5, 7).data, x.data)


def test_single_value_extends_to_constant():
    y = T.bilinear_resize(Tensor(np.full((1, 1, 1), 0.7)), 4, 4)
    np.testing.assert_allclose(y.data, 0.7, rtol=0, atol=1e-7)


def _bilinear_scalar(img, oh, ow):
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx
            )
    return out


def test_bilinear_matches_scalar_formula():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    y = T.bilinear_resize(t64(img[None]), 4, 4).data[0]
    np.testing.assert_allclose(y, _bilinear_scalar(img, 4, 4), atol=1e-12)
    np.testing.assert_allclose(y[0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)


@given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 12), st.integers(1, 12))
def test_bilinear_matches_scalar_formula_random(h, w, oh, ow):
    img = rng(h * w).standard_normal((h, w))
    y = T.bilinear_resize(t64(img[None]), oh, ow).data[0]
    np.testing.assert_allclose(y, _bilinear_scalar(img, oh, ow), atol=1e-10)


def test_resize_round_trip_on_smooth_field():
    yy, xx = np.meshgrid(np.linspace(0, 1, 16), np.linspace(0, 1, 16), indexing="ij")
    field = np.sin(2 * yy) + np.cos(3 * xx)
    x = t64(field[None])
    back = T.bilinear_resize(T.bilinear_resize(x, 64, 64), 16, 16).data[0]
    assert np.abs(back - field).max() < 0.1 * np.ptp(field)


# ---------------------------------------------------------- reductions


def test_channel_mean_max_single_channel():
    x = Tensor(rng().standard_normal((1, 3, 4)))
    mean, mx = T.reduce_channel_mean_max(x)
    np.testing.assert_array_equal(mean.data, x.data)
    np.testing.assert_array_equal(mx.data, x.data)


def test_channel_mean_max_arithmetic():
    x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1))
    mean, mx = T.reduce_channel_mean_max(x)
    assert mean.item() == 2.0 and mx.item() == 3.0


def test_channel_max_gradient_goes_to_first_maximizer():
    x = Tensor(np.array([2.0, 5.0, 5.0]).reshape(3, 1, 1), requires_grad=True)
    _, mx = T.reduce_channel_mean_max(x)
    T.sum_all(mx).backward()
    np.testing.assert_array_equal(x.grad.reshape(-1), [0.0, 1.0, 0.0])


@pytest.mark.parametrize("seed", range(3))
def test_channel_max_gradient(seed):
    x = t64(rng(seed).standard_normal((8, 4, 4)))
    assert fd_error(lambda: T.reduce_channel_mean_max(x)[1], {"x": x}, seed) < 1e-3


def test_global_pool_on_single_pixel():
    x = Tensor(rng().standard_normal((4, 1, 1)))
    avg, mx = T.global_avg_max_pool(x)
    np.testing.assert_array_equal(avg.data, x.data)
    np.testing.assert_array_equal(mx.data, x.data)


def test_global_pool_constant():
    avg, mx = T.global_avg_max_pool(Tensor(np.full((2, 3, 3), 1.25)))
    np.testing.assert_array_equal(avg.data, 1.25)
    np.testing.assert_array_equal(mx.data, 1.25)


def test_global_pool_matches_loops():
    x = rng(3).standard_normal((3, 5, 5)).astype(np.float32)
    avg, mx = T.global_avg_max_pool(Tensor(x))
    for c in range(3):
        total, best = 0.0, -np.inf
        for i in range(5):
            for j in range(5):
                total += float(x[c, i, j])
                best = max(best, x[c, i, j])
        assert mx.data[c, 0, 0] == best
        assert avg.data[c, 0, 0] == np.float32(total / 25)


# ------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.full(5, 0.3))).data, 0.2, rtol=1e-6)


def test_softmax_closed_form():
    y = T.softmax(t64([0.0, math.log(3.0)])).data
    np.testing.assert_allclose(y, [0.25, 0.75], rtol=1e-12)


def test_softmax_shift_invariance():
    x = rng().standard_normal((4, 6))
    np.testing.assert_allclose(T.softmax(t64(x + 1000.0)).data, T.softmax(t64(x)).data, rtol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    y = T.softmax(Tensor(np.array(values))).data
    assert (y > 0).all()
    assert abs(float(y.sum(dtype=np.float64)) - 1.0) < 1e-6


# ------------------------------------------------------------ elementwise


def test_sigmoid_zero():
    assert T.sigmoid(Tensor([0.0])).item() == 0.5


def test_concat_shape():
    a, b = Tensor(np.zeros((2, 3, 4))), Tensor(np.ones((3, 3, 4)))
    assert T.concat([a, b], 0).shape == (5, 3, 4)


def test_layer_norm_standardizes():
    x = Tensor(rng().standard_normal((6, 16)) * 3 + 2)
    y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data.astype(np.float64)
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)


def test_add_rejects_incompatible_shapes():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0, 1.0]))


# ------------------------------------------------------------- backward


def test_linear_scalar_gradient():
    x = Tensor([3.0], requires_grad=True)
    (x * 2.0).backward()
    assert x.grad.item() == 2.0


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_accumulates():
    x = Tensor([1.5], requires_grad=True)
    y = x * x
    y.backward()
    y.backward()
    assert x.grad.item() == pytest.approx(6.0)


def test_shared_subexpression_visited_once():
    x = Tensor([2.0], requires_grad=True)
    h = x * 3.0
    (h + h * h).backward()
    assert x.grad.item() == pytest.approx(3.0 + 2 * 6.0 * 3.0)


def test_sum_sigmoid_gradient():
    x = t64(rng().standard_normal(10))
    assert fd_error(lambda: T.sum_all(T.sigmoid(x)), {"x": x}) < 1e-4


def test_conv_softmax_sum_gradient():
    r = rng(5)
    x, w, b = t64(r.standard_normal((2, 5, 5))), t64(r.standard_normal((3, 2, 3, 3))), t64(r.standard_normal(3))

    def fn():
        y = T.conv2d(x, w, b, stride=2, padding=1)
        return T.sum_all(T.mul(T.softmax(T.reshape(y, (3, 9)), axis=-1), np.arange(27.0).reshape(3, 9)))

    assert fd_error(fn, {"x": x, "w": w, "b": b}) < 1e-3


# --------------------------------------------- per-op finite differences


def _op_cases(r):
    a = t64(r.standard_normal((3, 4, 5)))
    b = t64(r.standard_normal((3, 4, 5)))
    pos = t64(r.uniform(0.5, 2.0, (3, 4)))
    m1, m2 = t64(r.standard_normal((4, 6))), t64(r.standard_normal((6, 3)))
    w, bias = t64(r.standard_normal((5, 6))), t64(r.standard_normal(5))
    rows = t64(r.standard_normal((4, 16)))
    g, be = t64(1 + 0.1 * r.standard_normal(16)), t64(0.1 * r.standard_normal(16))
    cw, cb = t64(r.standard_normal((2, 3, 3, 3))), t64(r.standard_normal(2))
    return {
        "add": (lambda: T.add(a, b), {"a": a, "b": b}, 1e-4),
        "mul": (lambda: T.mul(a, b), {"a": a, "b": b}, 1e-4),
        "sigmoid": (lambda: T.sigmoid(a), {"a": a}, 1e-4),
        "gelu": (lambda: T.gelu(a), {"a": a}, 1e-4),
        "log": (lambda: T.log(pos), {"x": pos}, 1e-4),
        "softmax": (lambda: T.softmax(a, axis=-1), {"a": a}, 1e-4),
        "layer_norm": (lambda: T.layer_norm(rows, g, be), {"x": rows, "g": g, "b": be}, 1e-4),
        "matmul": (lambda: T.matmul(m1, m2), {"a": m1, "b": m2}, 1e-4),
        "linear": (lambda: T.linear(m1, w, bias), {"x": m1, "w": w, "b": bias}, 1e-4),
        "conv2d": (lambda: T.conv2d(a, cw, cb, stride=2, padding=1), {"x": a, "w": cw, "b": cb}, 1e-4),
        "bilinear_resize": (lambda: T.bilinear_resize(a, 7, 3), {"a": a}, 1e-4),
        "adaptive_avg_pool": (lambda: T.adaptive_avg_pool(a, 3, 2), {"a": a}, 1e-4),
        "concat": (lambda: T.concat([a, b], 1), {"a": a, "b": b}, 1e-4),
        "transpose": (lambda: T.transpose(a, (2, 0, 1)), {"a": a}, 1e-4),
        "channel_mean_max": (lambda: T.concat(list(T.reduce_channel_mean_max(a)), 0), {"a": a}, 1e-3),
        "global_avg_max_pool": (lambda: T.concat(list(T.global_avg_max_pool(a)), 0), {"a": a}, 1e-3),
    }


OPS = sorted(_op_cases(rng()).keys())


@pytest.mark.parametrize("op", OPS)
def test_op_gradients_over_twenty_seeds(op):
    worst = 0.0
    for seed in range(20):
        fn, inputs, _ = _op_cases(rng(seed))[op]
        worst = max(worst, fd_error(fn, inputs, seed))
    tol = _op_cases(rng())[op][2]
    assert worst < tol, f"{op}: {worst:.2e}"


def test_layer_norm_difference_error_is_truncation():
    # narrow rows are strongly curved; the central-difference error must shrink as eps**2
    r = rng(1)
    x, g, b = t64(r.standard_normal((3, 5))), t64(np.ones(5)), t64(np.zeros(5))
    fn = lambda: T.layer_norm(x, g, b)
    with precision(np.float64):
        coarse = check_gradients(fn, {"x": x}, rng(2), probes=100, eps=1e-3)[0]
        fine = check_gradients(fn, {"x": x}, rng(2), probes=100, eps=1e-4)[0]
    assert fine < 1e-5
    assert fine < coarse / 50
