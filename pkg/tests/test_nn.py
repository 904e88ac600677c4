import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segnode.autodiff import Tensor
from segnode.nn import (Conv2dParams, bilinear_resize, conv, conv2d, conv_output_size,
                        group_norm, he_normal, init)

from helpers import check_op_vjp


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for q in range(o):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[a, :, y * stride:y * stride + k, z * stride:z * stride + k]
                    out[a, q, y, z] = (patch * w[q]).sum() + b[q]
    return out


def scalar_bilinear(img, out_h, out_w):
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


@pytest.mark.parametrize("k,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 1, 0)])
def test_conv_matches_naive_loops(k, stride, padding):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), 1, 1).data
    np.testing.assert_array_equal(out, x)


def test_conv_shape_and_errors():
    x = Tensor(np.zeros((1, 3, 64, 64)))
    p = Conv2dParams(Tensor(np.zeros((8, 3, 3, 3))), Tensor(np.zeros(8)), 2, 1)
    assert conv(x, p).shape == (1, 8, 32, 32)
    with pytest.raises(ValueError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 8, 8))), p.weight, p.bias, 1, 1)
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros(1)))


@settings(max_examples=40, deadline=None)
@given(size=st.integers(1, 40), k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]))
def test_conv_output_size_law(size, k, stride):
    padding = k // 2
    expected = (size + 2 * padding - k) // stride + 1
    assert conv_output_size(size, k, stride, padding) == expected
    if stride == 2 and k == 3:
        assert expected == -(-size // 2)


@pytest.mark.parametrize("k,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)])
def test_conv_vjp(k, stride, padding):
    rng = np.random.default_rng(11)
    op = lambda x, w, b: conv2d(x, w, b, stride, padding)  # noqa: E731
    check_op_vjp(op, [rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((4, 3, k, k)),
                      rng.standard_normal(4)], rng)


def test_group_norm_statistics():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 16, 5, 5)) * 3 + 2
    y = group_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), 8, 1e-5).data
    g = y.reshape(2, 8, -1)
    np.testing.assert_allclose(g.mean(axis=2), 0, atol=1e-12)
    np.testing.assert_allclose(g.var(axis=2), 1, atol=1e-4)


def test_group_norm_affine_and_constant_input():
    x = Tensor(np.full((1, 8, 3, 3), 5.0))
    beta = np.arange(8.0)
    y = group_norm(x, Tensor(np.ones(8)), Tensor(beta), 8).data
    np.testing.assert_allclose(y, np.broadcast_to(beta.reshape(1, 8, 1, 1), y.shape))
    with pytest.raises(ValueError, match="groups"):
        group_norm(Tensor(np.zeros((1, 6, 2, 2))), Tensor(np.ones(6)), Tensor(np.zeros(6)), 4)


def test_group_norm_vjp():
    rng = np.random.default_rng(2)
    op = lambda x, g, b: group_norm(x, g, b, 2, 1e-5)  # noqa: E731
    check_op_vjp(op, [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(4),
                      rng.standard_normal(4)], rng)


@pytest.mark.parametrize("src,dst", [((4, 4), (8, 8)), ((5, 3), (7, 11)), ((8, 8), (3, 5))])
def test_bilinear_matches_scalar_reference(src, dst):
    img = np.random.default_rng(3).standard_normal(src)
    got = bilinear_resize(Tensor(img.reshape(1, 1, *src)), *dst).data[0, 0]
    np.testing.assert_allclose(got, scalar_bilinear(img, *dst), rtol=1e-12, atol=1e-12)


def test_bilinear_same_size_is_exact_and_constant_preserved():
    x = np.random.default_rng(4).standard_normal((2, 3, 6, 6))
    np.testing.assert_array_equal(bilinear_resize(Tensor(x), 6, 6).data, x)
    out = bilinear_resize(Tensor(np.full((1, 1, 4, 4), 2.5)), 16, 16).data
    np.testing.assert_allclose(out, 2.5)


def test_bilinear_vjp():
    rng = np.random.default_rng(5)
    check_op_vjp(lambda x: bilinear_resize(x, 9, 7), [rng.standard_normal((2, 2, 4, 5))], rng)


def test_he_normal_variance_and_determinism():
    w = he_normal((256, 64, 3, 3), 7)
    assert abs(w.var() - 2.0 / (64 * 9)) / (2.0 / (64 * 9)) < 0.02
    assert np.array_equal(he_normal((4, 4, 3, 3), 1), he_normal((4, 4, 3, 3), 1))
    assert not np.array_equal(he_normal((4, 4, 3, 3), 1), he_normal((4, 4, 3, 3), 2))
    z = init("zeros", (3, 3), dtype=np.float32)
    assert z.data.dtype == np.float32 and not z.data.any()
    with pytest.raises(ValueError):
        init("uniform", (2,))
