"""Network operators with hand-written VJPs: conv2d, group norm, bilinear resize."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, record


@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    groups: int = 8
    eps: float = 1e-5


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xt: np.ndarray, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of a channel-major (C, N, H, W) array.

    Rows are ordered (i, j, c) for kernel offset (i, j) and channel c;
    columns are (n, y, x) output positions.
    """
    c, n, h, w = xt.shape
    if k == 1 and stride == 1 and padding == 0:
        return xt.reshape(c, n * h * w)
    if padding:
        xpad = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=xt.dtype)
        xpad[:, :, padding:padding + h, padding:padding + w] = xt
    else:
        xpad = xt
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((k, k, c, n, ho, wo), dtype=xt.dtype)
    for i in range(k):
        for j in range(k):
            cols[i, j] = xpad[:, :, i:i + hs:stride, j:j + ws:stride]
    return cols.reshape(k * k * c, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (O, C, k, k) kernel, plus bias."""
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    if k != k2:
        raise ValueError(f"conv2d: non-square kernel {weight.shape}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: degenerate output size {ho}x{wo} for input {h}x{w}")
    cols = _im2col(np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)), k, stride, padding, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = wmat @ cols
    out += bias.data.reshape(o, 1)
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    back_pad = k - 1 - padding

    def vjp(g):
        gT = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        g2 = gT.reshape(o, -1)
        gw = (g2 @ cols.T).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=1)
        if stride == 1 and back_pad >= 0:
            # input gradient as a correlation with the flipped, transposed kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
            gx = (wflip @ _im2col(gT, k, 1, back_pad, h, w)).reshape(c, n, h, w)
        else:
            gcols = (wmat.T @ g2).reshape(k, k, c, n, ho, wo)
            hp, wp = h + 2 * padding, w + 2 * padding
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            gpad = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gpad[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[i, j]
            gx = gpad[:, :, padding:padding + h, padding:padding + w]
        return np.ascontiguousarray(gx.transpose(1, 0, 2, 3)), np.ascontiguousarray(gw), gb

    return record(out, (x, weight, bias), vjp, saved=(cols,))


def conv(x: Tensor, p: Conv2dParams) -> Tensor:
    return conv2d(x, p.weight, p.bias, p.stride, p.padding)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 8, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group standardisation followed by a per-channel affine map."""
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {groups} groups do not divide {c} channels")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (xc * inv).reshape(n, c, h, w)
    gam = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gam + beta.data.reshape(1, c, 1, 1)

    def vjp(g):
        ggam = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxh = (g * gam).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                    - xh * (dxh * xh).mean(axis=2, keepdims=True))
        return gx.reshape(n, c, h, w), ggam, gbeta

    return record(out, (x, gamma, beta), vjp, saved=(xhat, inv))


def norm(x: Tensor, p: NormParams) -> Tensor:
    return group_norm(x, p.gamma, p.beta, p.groups, p.eps)


@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    """Row i holds the interpolation weights of output sample i (half-pixel centres)."""
    mat = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    mat = mat.astype(dtype_str)
    mat.setflags(write=False)
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an NCHW tensor, half-pixel centres, edge-clamped."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: invalid output size {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return record(x.data.copy(), (x,), lambda g: (g,))
    dt = x.data.dtype.str
    rh = _resize_matrix(h, out_h, dt)
    rw = _resize_matrix(w, out_w, dt)
    out = rh @ x.data @ rw.T

    def vjp(g):
        return (rh.T @ g @ rw,)

    return record(out, (x,), vjp)


# --------------------------------------------------------------------------
# initialisation


def he_normal(shape, seed) -> np.ndarray:
    """N(0, 2/fan_in) draws from numpy's PCG64 generator seeded with ``seed``."""
    shape = tuple(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init(kind: str, shape, seed=0, dtype=np.float64) -> Tensor:
    if kind == "zeros":
        return Tensor(np.zeros(shape, dtype=dtype))
    if kind == "he_normal":
        return Tensor(he_normal(shape, seed).astype(dtype))
    raise ValueError(f"unknown init kind {kind!r}")
