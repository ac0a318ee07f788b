"""Differentiable layers used by the segmentation network.

Convolutions are stride-1 cross-correlations computed by im2col over
blocks of output rows, so the column buffer stays bounded (a few MB)
regardless of image size.  The block partition depends only on shapes,
never on thread count.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, apply
from .errors import ConfigError, ShapeError

# Upper bound on im2col buffer elements per block.
_IM2COL_BLOCK = 1 << 20


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: Optional[int] = None

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    @property
    def has_bias(self):
        return self.bias is not None

    @property
    def n_params(self):
        return self.weight.size + (self.bias.size if self.bias is not None else 0)


@dataclass
class GroupNormParams:
    gamma: Tensor
    beta: Tensor
    groups: int = 8
    eps: float = 1e-5


@dataclass
class DropBlockConfig:
    drop_rate: float = 0.15
    block_size: int = 7
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ConfigError(f"block_size must be a positive odd integer, got {self.block_size}")


# -- convolution -----------------------------------------------------------


def _block_rows(cols_per_row, n_rows):
    return max(1, min(n_rows, _IM2COL_BLOCK // max(1, cols_per_row)))


def _im2col(xp, k, r0, r1, wo, buf):
    """Fill ``buf`` (c, k, k, r1-r0, wo) from padded image ``xp`` (c, H, W)."""
    for ky in range(k):
        for kx in range(k):
            buf[:, ky, kx] = xp[:, r0 + ky:r1 + ky, kx:kx + wo]
    return buf.reshape(buf.shape[0] * k * k, -1)


def _conv_forward(x, w, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.empty((n, o, ho, wo), dtype=x.dtype)
    if k == 1 and pad == 0:
        wmat = w.reshape(o, c)
        for i in range(n):
            out[i] = (wmat @ x[i].reshape(c, -1)).reshape(o, ho, wo)
        return out
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    wmat = w.reshape(o, c * k * k)
    rows = _block_rows(c * k * k * wo, ho)
    buf = np.empty((c, k, k, rows, wo), dtype=x.dtype)
    for i in range(n):
        for r0 in range(0, ho, rows):
            r1 = min(ho, r0 + rows)
            cols = _im2col(xp[i], k, r0, r1, wo, buf[:, :, :, :r1 - r0])
            out[i, :, r0:r1] = (wmat @ cols).reshape(o, r1 - r0, wo)
    return out


def _conv_backward(g, x, w, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    gw = np.zeros((o, c * k * k), dtype=x.dtype)
    if k == 1 and pad == 0:
        wmat = w.reshape(o, c)
        gx = np.empty_like(x)
        for i in range(n):
            gi = g[i].reshape(o, -1)
            gw += gi @ x[i].reshape(c, -1).T
            gx[i] = (wmat.T @ gi).reshape(c, h, wd)
        return gx, gw.reshape(w.shape)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gxp = np.zeros_like(xp)
    wmat = w.reshape(o, c * k * k)
    rows = _block_rows(c * k * k * wo, ho)
    buf = np.empty((c, k, k, rows, wo), dtype=x.dtype)
    for i in range(n):
        for r0 in range(0, ho, rows):
            r1 = min(ho, r0 + rows)
            gblk = g[i, :, r0:r1].reshape(o, -1)
            cols = _im2col(xp[i], k, r0, r1, wo, buf[:, :, :, :r1 - r0])
            gw += gblk @ cols.T
            gcols = (wmat.T @ gblk).reshape(c, k, k, r1 - r0, wo)
            for ky in range(k):
                for kx in range(k):
                    gxp[i, :, r0 + ky:r1 + ky, kx:kx + wo] += gcols[:, ky, kx]
    gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return np.ascontiguousarray(gx), gw.reshape(w.shape)


def conv2d(x, p):
    """Stride-1 cross-correlation plus optional bias; default padding keeps (h, w)."""
    w = p.weight
    if p.stride != 1:
        raise ConfigError("conv2d supports stride 1 only")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"square kernels only, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    k = w.shape[2]
    pad = k // 2 if p.padding is None else p.padding
    xd, wd = x.data, w.data
    out = _conv_forward(xd, wd, pad)
    if p.bias is not None:
        if p.bias.size != w.shape[0]:
            raise ShapeError(f"bias has {p.bias.size} entries for {w.shape[0]} output channels")
        out += p.bias.data.reshape(1, -1, 1, 1)
        inputs = (x, p.weight, p.bias)
    else:
        inputs = (x, p.weight)
    bias_shape = None if p.bias is None else p.bias.shape

    def backward(g):
        gx = gw = None
        if x.requires_grad or w.requires_grad:
            gx, gw = _conv_backward(g, xd, wd, pad)
        if bias_shape is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)).reshape(bias_shape)

    return apply("conv2d", inputs, out, backward)


def zero_insert(x):
    """Place ``x[i, j]`` at ``z[2i, 2j]`` of a zero map twice the size."""
    n, c, h, w = x.shape
    z = np.zeros((n, c, 2 * h, 2 * w), dtype=x.dtype)
    z[:, :, ::2, ::2] = x.data
    return apply("zero_insert", (x,), z, lambda g: (np.ascontiguousarray(g[:, :, ::2, ::2]),))


def conv2d_transpose(x, p):
    """Stride-2 up-sampling: zero insertion then a "same" 3x3 convolution.

    Output spatial size is exactly ``(2h, 2w)``.
    """
    if p.kernel_size != 3 or p.stride != 2:
        raise ConfigError("conv2d_transpose is defined for kernel 3, stride 2")
    same = ConvParams(p.weight, p.bias, stride=1, padding=1)
    return conv2d(zero_insert(x), same)


# -- pooling and channel reductions ----------------------------------------


def maxpool2(x):
    """2x2 stride-2 max pool; ties route the gradient to the first window element."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return apply("maxpool2", (x,), np.ascontiguousarray(out), backward)


def channel_mean(x):
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    scale = x.dtype.type(1.0 / c)
    return apply("channel_mean", (x,), out,
                 lambda g: (np.broadcast_to(g * scale, x.shape).copy(),))


def channel_max(x):
    """Per-pixel max over channels; the gradient goes to the first maximal channel."""
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return apply("channel_max", (x,), out, backward)


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return apply("concat_channels", (a, b), out,
                 lambda g: (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])))


def expand_channels(m, c):
    """Repeat a single-channel map ``c`` times along the channel axis."""
    if m.shape[1] != 1:
        raise ShapeError(f"expand_channels needs one channel, got {m.shape[1]}")
    out = np.repeat(m.data, c, axis=1)
    return apply("expand_channels", (m,), out, lambda g: (g.sum(axis=1, keepdims=True),))


# -- normalization and activations -----------------------------------------


def group_norm(x, p):
    n, c, h, w = x.shape
    G = p.groups
    if G < 1 or c % G:
        raise ConfigError(f"{c} channels are not divisible into {G} groups")
    if p.gamma.size != c or p.beta.size != c:
        raise ShapeError(f"group_norm affine parameters must have {c} entries")
    xg = x.data.reshape(n, G, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(p.eps))
    xhat = (xc * inv).reshape(n, c, h, w)
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    out = xhat * gamma + p.beta.data.reshape(1, c, 1, 1)
    gshape, bshape = p.gamma.shape, p.beta.shape

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(gshape)
        dbeta = g.sum(axis=(0, 2, 3)).reshape(bshape)
        dxhat = (g * gamma).reshape(n, G, -1)
        xh = xhat.reshape(n, G, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(n, c, h, w), dgamma, dbeta

    return apply("group_norm", (x, p.gamma, p.beta), out, backward)


def _sigmoid(z):
    # tanh form is overflow-free for any finite input
    half = z.dtype.type(0.5)
    return half * (np.tanh(half * z) + 1)


def sigmoid(x):
    s = _sigmoid(x.data)
    return apply("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def silu(x):
    xd = x.data
    s = _sigmoid(xd)
    return apply("silu", (x,), xd * s, lambda g: (g * s * (1 + xd * (1 - s)),))


def relu(x):
    pos = x.data > 0
    return apply("relu", (x,), np.where(pos, x.data, 0).astype(x.dtype), lambda g: (g * pos,))


# -- DropBlock -------------------------------------------------------------


def _dilate(seeds, k):
    """Binary k x k dilation of ``seeds`` (n, 1, h', w') into (n, 1, h'+k-1, w'+k-1)."""
    if k == 1:
        return seeds
    r = k - 1
    p = np.pad(seeds, ((0, 0), (0, 0), (r, r), (r, r)))
    rows = np.lib.stride_tricks.sliding_window_view(p, k, axis=2).max(axis=-1)
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=3).max(axis=-1)


def dropblock_mask(shape, cfg, rng, dtype=np.float32):
    """Scaled keep-mask of shape (n, 1, h, w), shared across channels."""
    n, _, h, w = shape
    bs = cfg.block_size
    if bs > min(h, w):
        raise ConfigError(f"block_size {bs} exceeds spatial size {h}x{w}")
    valid_h, valid_w = h - bs + 1, w - bs + 1
    gamma = cfg.drop_rate / bs ** 2 * (h * w) / (valid_h * valid_w)
    seeds = (rng.random((n, 1, valid_h, valid_w)) < gamma).astype(np.uint8)
    dropped = _dilate(seeds, bs)
    keep = (1 - dropped).astype(dtype)
    kept = keep.sum(axis=(1, 2, 3), keepdims=True)
    scale = np.where(kept > 0, (h * w) / np.maximum(kept, 1), 0).astype(dtype)
    return keep * scale


def dropblock(x, cfg, mode, rng):
    """Structured dropout: zero block_size squares, rescale survivors.

    Identity (the same tensor object) in eval mode or when drop_rate is 0.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if cfg.block_size > min(x.shape[2], x.shape[3]):
        raise ConfigError(f"block_size {cfg.block_size} exceeds spatial size {x.shape[2:]}")
    if mode == "eval" or cfg.drop_rate == 0 or not cfg.enabled:
        return x
    mask = dropblock_mask(x.shape, cfg, rng, x.dtype)
    return apply("dropblock", (x,), x.data * mask, lambda g: (g * mask,))
