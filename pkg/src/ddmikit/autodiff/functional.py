"""Differentiable nonlinearities, convolutions, pooling, normalization and losses."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .. import _kernels
from .tensor import Tensor, make_node, mean, unbroadcast

# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(v):
    return expit(v)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    out, sig = _kernels.silu_forward(xd)
    return make_node(out, (x,), lambda g: (_kernels.silu_backward(g, xd, sig),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1 + th)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1 + th) + 0.5 * xd * (1 - th**2) * dinner),)

    return make_node(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1 - out**2),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return make_node(out, (x,), lambda g: (g * _sigmoid(xd),))


NONLINEARITIES = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid, "silu": silu, "tanh": tanh}


def nonlinear(kind: str, x: Tensor) -> Tensor:
    try:
        fn = NONLINEARITIES[kind]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in), as one graph node."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"linear: input width {xd.shape[-1]} != weight in-features {wd.shape[1]}")
    out = xd @ wd.T
    if bias is not None:
        out += bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd) if x.requires_grad else None
        gw = (g2.T @ xd.reshape(-1, xd.shape[-1])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, (x, weight) if bias is None else (x, weight, bias), bw)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _out_extent(n, k, stride, pad, what):
    span = n + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel extent {k} exceeds padded {what} extent {n + 2 * pad}")
    if span % stride:
        raise ValueError(f"non-integral output {what}: ({n}+2*{pad}-{k})/{stride}")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with an (O, C, kh, kw) kernel."""
    b, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {weight.shape}")
    ho = _out_extent(h, kh, stride, padding, "height")
    wo = _out_extent(w, kw, stride, padding, "width")
    xd = x.data
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.reshape(b, c, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = _kernels.im2col(xp, kh, kw, stride, ho, wo)
    wm = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, o, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(b, o, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, g2)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                shape = (b, c, h + 2 * padding, w + 2 * padding)
                gxp = _kernels.col2im(gcols, shape, kh, kw, stride, ho, wo)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return make_node(out, parents, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; weight is (C_in, C_out, kh, kw).

    Output extent is (H-1)*stride + kh - 2*padding.
    """
    b, ci, h, w = x.shape
    ci2, co, kh, kw = weight.shape
    if ci != ci2:
        raise ValueError(f"conv_transpose2d channel mismatch: input {x.shape}, kernel {weight.shape}")
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise ValueError("padding removes the whole output")
    x2 = x.data.reshape(b, ci, h * w)
    wm = weight.data.reshape(ci, co * kh * kw)
    cols = np.matmul(wm.T, x2)
    full = _kernels.col2im(cols, (b, co, hp, wp), kh, kw, stride, h, w)
    out = full[:, :, padding : hp - padding, padding : wp - padding]
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _kernels.im2col(gfull, kh, kw, stride, h, w)
        gx = np.matmul(wm, gcols).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_node(out, parents, bw)


def avgpool2x(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        g4 = np.broadcast_to(g[:, :, :, None, :, None] * 0.25, (b, c, h // 2, 2, w // 2, 2))
        return (g4.reshape(b, c, h, w).astype(x.dtype, copy=True),)

    return make_node(out, (x,), bw)


def resize_nearest2x(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    b, c = x.shape[:2]
    if groups <= 0 or c % groups:
        raise ValueError(f"groups={groups} does not divide channel count {c}")
    spatial = x.shape[2:]
    xg = x.data.reshape(b, groups, -1)
    n = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(x.shape)
    cshape = (1, c) + (1,) * len(spatial)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(cshape)
    if beta is not None:
        out = out + beta.data.reshape(cshape)
    parents = [x] + [t for t in (gamma, beta) if t is not None]
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        dxhat = g * gamma.data.reshape(cshape) if gamma is not None else g
        dxg = dxhat.reshape(b, groups, n)
        xh = xhat.reshape(b, groups, n)
        s1 = dxg.sum(axis=2, keepdims=True)
        s2 = (dxg * xh).sum(axis=2, keepdims=True)
        gx = (rstd / n) * (n * dxg - s1 - xh * s2)
        res = [gx.reshape(x.shape)]
        if gamma is not None:
            res.append((g * xhat).sum(axis=red))
        if beta is not None:
            res.append(g.sum(axis=red))
        return tuple(res)

    return make_node(out.astype(x.dtype, copy=False), parents, bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy from logits (not reduced)."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"bce shapes differ: {logits.shape} vs {t.shape}")
    xd = logits.data
    out = np.maximum(xd, 0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
    return make_node(out, (logits,), lambda g: (g * (_sigmoid(xd) - t),))


def l1_loss(pred: Tensor, target) -> Tensor:
    from .tensor import absolute, sub

    return mean(absolute(sub(pred, target)))


def mse_loss(pred: Tensor, target) -> Tensor:
    from .tensor import sub

    d = sub(pred, target)
    return mean(d * d)


__all__ = [
    "avgpool2x",
    "bce_with_logits",
    "conv2d",
    "conv_transpose2d",
    "gelu",
    "group_norm",
    "l1_loss",
    "linear",
    "mse_loss",
    "nonlinear",
    "relu",
    "resize_nearest2x",
    "sigmoid",
    "silu",
    "softplus",
    "tanh",
    "unbroadcast",
]
