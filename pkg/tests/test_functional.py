import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iaunet.errors import DimensionError
from iaunet.nn import BatchNorm2d, Tensor
from iaunet.nn import functional as F
from iaunet.nn.gradcheck import check_gradients
from iaunet.verify import PRIMITIVE_TOL, primitive_cases

CASE_NAMES = [name for name, _, _ in primitive_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", CASE_NAMES)
def test_primitive_gradients_match_finite_differences(name):
    cases = {n: (fn, inputs) for n, fn, inputs in primitive_cases(np.random.default_rng(11))}
    fn, inputs = cases[name]
    assert check_gradients(fn, inputs, h=1e-6) < PRIMITIVE_TOL


def _conv_loop(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for x_ in range(wo):
                    patch = xp[i, :, y * stride:y * stride + k, x_ * stride:x_ * stride + k]
                    out[i, o, y, x_] = (patch * w[o]).sum() + b[o]
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 0, 3)])
def test_conv2d_matches_direct_loop(stride, pad, k, rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, _conv_loop(x, w, b, stride, pad), atol=1e-12)


def test_conv_transpose_places_kernel_per_pixel():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 1, 0] = 2.0
    w = np.arange(4.0).reshape(1, 1, 2, 2)
    out = F.conv_transpose2d_2x(Tensor(x), Tensor(w)).data[0, 0]
    expected = np.zeros((4, 4))
    expected[2:4, 0:2] = 2.0 * w[0, 0]
    np.testing.assert_array_equal(out, expected)


def test_batch_norm_updates_running_statistics(rng):
    bn = BatchNorm2d(2, dtype=np.float64)
    x = rng.standard_normal((3, 2, 4, 4)) * 2.0 + 1.0
    out = bn(Tensor(x)).data
    m = 3 * 16
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(bn.running_mean, 0.9 * 0 + 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(bn.running_var, 0.9 * 1 + 0.1 * var * m / (m - 1), rtol=1e-12)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + F.BN_EPS), rtol=1e-9)


def test_batch_norm_eval_uses_running_buffers(rng):
    bn = BatchNorm2d(2, dtype=np.float64)
    bn.eval()
    x = rng.standard_normal((1, 2, 2, 2))
    out = bn(Tensor(x)).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + F.BN_EPS), rtol=1e-12)
    assert np.all(bn.running_mean == 0) and np.all(bn.running_var == 1)


def test_batch_norm_needs_two_values_per_channel():
    with pytest.raises(DimensionError):
        F.batch_norm2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                       np.zeros(1), np.ones(1), training=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
def test_masked_pool_with_full_mask_equals_global_pool(n, c, side, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((n, c, side, side)))
    full = np.ones((n, 1, side, side))
    assert np.array_equal(F.masked_avg_pool(x, full).data, F.global_avg_pool(x).data)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_masked_pool_is_mean_over_mask(side, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, side, side))
    mask = (rng.random((1, 1, side, side)) > 0.5).astype(np.float64)
    out = F.masked_avg_pool(Tensor(x), mask).data
    if mask.sum() == 0:
        assert np.all(out == 0)
    else:
        sel = mask[0, 0] > 0
        np.testing.assert_allclose(out[0], [x[0, ch][sel].mean() for ch in range(2)], rtol=1e-12)


def test_masked_pool_rejects_wrong_mask_shape():
    with pytest.raises(DimensionError):
        F.masked_avg_pool(Tensor(np.ones((1, 2, 4, 4))), np.ones((1, 1, 2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 2**31))
def test_l2_normalize_gives_unit_rows(n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d)) + 0.1
    y = F.l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, rtol=1e-12)


def test_l2_normalize_zero_row_stays_zero():
    assert np.all(F.l2_normalize(Tensor(np.zeros((1, 3)))).data == 0)


def test_softmax_sums_to_one_and_is_shift_invariant(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    y = F.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(F.softmax(Tensor(x + 1000.0)).data, y, rtol=1e-9)


def test_narrow_routes_gradient_to_selected_rows():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    F.narrow(x, 1, 3).sum().backward()
    assert x.grad.tolist() == [[0, 0], [1, 1], [1, 1]]


def test_pool_and_upsample_need_4d_even_input():
    with pytest.raises(DimensionError):
        F.max_pool2d(Tensor(np.ones((1, 1, 3, 4))))
    with pytest.raises(DimensionError):
        F.upsample_bilinear2x(Tensor(np.ones((2, 2))))


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def test_conv2d_hand_counted_examples():
    out = F.conv2d(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 3, 3))), T([0.0]), padding=1).data[0, 0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
    np.testing.assert_array_equal(out, expected)
    out = F.conv2d(T([[[[1, 2], [3, 4]]]]), T(np.full((1, 1, 1, 1), 2.0)), T([1.0])).data
    assert out[0, 0].tolist() == [[3, 5], [7, 9]]


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    out = F.conv2d(T(x), T(np.ones((1, 1, 1, 1))), T([0.0])).data
    np.testing.assert_array_equal(out, x)


def test_conv2d_channel_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        F.conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 3, 3, 3))), padding=1)


def test_batch_norm_examples(rng):
    buffers = (np.zeros(2), np.ones(2))
    const = np.ones((2, 2, 3, 3)) * np.array([3.0, -1.0])[None, :, None, None]
    out = F.batch_norm2d(T(const), T([1, 1]), T([0, 0]), *buffers, training=True).data
    assert np.all(out == 0)
    out = F.batch_norm2d(T(rng.standard_normal((2, 2, 3, 3))), T([0, 0]), T([5, 5]),
                         np.zeros(2), np.ones(2), training=True).data
    assert np.all(out == 5.0)
    x = rng.standard_normal((4, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = F.batch_norm2d(T(x), T([1, 1]), T([0, 0]), np.zeros(2), np.ones(2), training=True).data
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_relu_examples():
    assert F.relu(T([-1, 0, 2])).data.tolist() == [0, 0, 2]
    x = T([-1.0, 0.0, 2.0])
    x.requires_grad = True
    F.relu(x).sum().backward()
    assert x.grad.tolist() == [0, 0, 1]


def test_max_pool_examples():
    assert F.max_pool2d(T([[[[1, 2], [3, 4]]]])).data.tolist() == [[[[4]]]]
    x = T([[[[5, 1, 0, 0], [2, 3, 0, 7], [0, 0, 9, 8], [0, 0, 6, 4]]]])
    assert F.max_pool2d(x).data[0, 0].tolist() == [[5, 7], [0, 9]]
    assert np.all(F.max_pool2d(T(np.full((1, 2, 4, 4), 3.0))).data == 3.0)


def test_upsample_examples():
    assert np.all(F.upsample_bilinear2x(T(np.full((1, 1, 3, 3), 2.5))).data == 2.5)
    assert np.all(F.upsample_bilinear2x(T([[[[7.0]]]])).data == 7.0)
    ramp = np.tile(np.arange(6.0), (1, 1, 2, 1))
    out = F.upsample_bilinear2x(T(ramp)).data[0, 0, 0]
    # align_corners=False sample positions (j + 0.5) / 2 - 0.5
    interior = np.arange(1, 11)
    np.testing.assert_allclose(out[interior], (interior + 0.5) / 2 - 0.5, atol=1e-5)


def test_conv_transpose_examples():
    out = F.conv_transpose2d_2x(T([[[[1.0]]]]), T(np.ones((1, 1, 2, 2))), T([0.0])).data
    assert out[0, 0].tolist() == [[1, 1], [1, 1]]
    out = F.conv_transpose2d_2x(T(np.zeros((1, 1, 2, 2))), T(np.ones((1, 2, 2, 2))), T([0.5, -1.0])).data
    assert np.all(out[0, 0] == 0.5) and np.all(out[0, 1] == -1.0)
    a, b = 2.0, -3.0
    out = F.conv_transpose2d_2x(T([[[[a], [b]]]]), T(np.ones((1, 1, 2, 2)))).data[0, 0]
    assert out.tolist() == [[a, a], [a, a], [b, b], [b, b]]


def test_global_pool_linear_normalize_examples():
    assert F.global_avg_pool(T([[[[1, 3], [5, 7]]]])).data.tolist() == [[4.0]]
    assert F.linear(T([[1, 2]]), T([[3, 4]]), T([1])).data.tolist() == [[12.0]]
    np.testing.assert_allclose(F.l2_normalize(T([[3, 4]])).data, [[0.6, 0.8]], rtol=1e-15)
    with pytest.raises(DimensionError):
        F.linear(T([[1, 2, 3]]), T([[3, 4]]))


def test_backward_linear_and_quadratic_examples(rng):
    p = Tensor(rng.standard_normal(5), requires_grad=True)
    p.sum().backward()
    assert np.all(p.grad == 1.0)
    p.grad = None
    ((p * p).sum() * 0.5).backward()
    np.testing.assert_allclose(p.grad, p.data, rtol=1e-15)


@pytest.mark.parametrize("side", [2, 4, 8, 16])
def test_shape_algebra(side, rng):
    x = T(rng.standard_normal((1, 2, side, side)))
    w = T(rng.standard_normal((3, 2, 3, 3)))
    assert F.conv2d(x, w, padding=1).shape == (1, 3, side, side)
    assert F.relu(x).shape == x.shape
    assert F.batch_norm2d(x, T([1, 1]), T([0, 0]), np.zeros(2), np.ones(2), True).shape == x.shape
    assert F.max_pool2d(x).shape == (1, 2, side // 2, side // 2)
    assert F.upsample_bilinear2x(x).shape == (1, 2, 2 * side, 2 * side)
    assert F.conv_transpose2d_2x(x, T(np.ones((2, 1, 2, 2)))).shape == (1, 1, 2 * side, 2 * side)


def test_float32_composite_gradient_within_loose_tolerance(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32), requires_grad=True)
    fn = lambda x, w: F.sigmoid(F.conv2d(x, w, padding=1))  # noqa: E731
    assert check_gradients(fn, [x, w], h=1e-2) < 1e-3
