"""Hot inner loops: patch extraction for convolutions, bilinear gather/scatter, SiLU.

col2im, gather/scatter and the SiLU gradient each have a numba version and a
numpy twin with identical semantics. im2col and the SiLU forward stay numpy on
both paths, since that measured faster. Numba is used when it imports and
neither ``DDMIKIT_PURE_NUMPY`` nor ``NUMBA_DISABLE_JIT`` is set.
"""

import os

import numpy as np
import scipy.sparse as sp

_FORCE_NUMPY = os.getenv("DDMIKIT_PURE_NUMPY", "0") not in ("", "0", "false", "False")
_JIT_DISABLED = os.getenv("NUMBA_DISABLE_JIT", "0") not in ("", "0")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _FORCE_NUMPY and not _JIT_DISABLED


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def im2col_numpy(xp, kh, kw, stride, ho, wo):
    """(B, C, Hp, Wp) padded input -> (B, C*kh*kw, ho*wo) patch matrix."""
    b, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, C, ho, wo, kh, kw) -> (B, C, kh, kw, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)


def col2im_numpy(cols, shape, kh, kw, stride, ho, wo):
    """Adjoint of im2col: scatter-add patches back into a (B, C, Hp, Wp) array."""
    b, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def gather4_numpy(nodes, idx, w):
    """Weighted 4-neighbour gather: nodes (N, C), idx/w (Q, 4) -> (Q, C)."""
    out = nodes[idx[:, 0]] * w[:, 0:1]
    for k in range(1, 4):
        out += nodes[idx[:, k]] * w[:, k : k + 1]
    return out


def scatter4_numpy(g, idx, w, n_nodes):
    """Adjoint of gather4: g (Q, C) -> (n_nodes, C)."""
    q = idx.shape[0]
    rows = idx.ravel()
    cols = np.repeat(np.arange(q), 4)
    mat = sp.csr_matrix((w.ravel(), (rows, cols)), shape=(n_nodes, q))
    return np.asarray(mat @ g, dtype=g.dtype)


def silu_forward(x):
    """Returns (x * sigmoid(x), sigmoid(x)).

    numpy only: its vectorized exp beats a scalar jit loop here.
    """
    with np.errstate(over="ignore"):
        sig = np.exp(-x)
    sig += 1
    np.reciprocal(sig, out=sig)
    return x * sig, sig


def silu_backward_numpy(g, x, sig):
    out = 1 - sig
    out *= x
    out += 1
    out *= sig
    out *= g
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _col2im_nb(cols, out, kh, kw, stride, ho, wo):
        b, c = out.shape[0], out.shape[1]
        for bi in range(b):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for y in range(ho):
                            yy = y * stride + i
                            base = y * wo
                            for x in range(wo):
                                out[bi, ci, yy, x * stride + j] += cols[bi, row, base + x]
        return out

    @njit(cache=True)
    def _gather4_nb(nodes, idx, w):
        q = idx.shape[0]
        c = nodes.shape[1]
        out = np.zeros((q, c), dtype=nodes.dtype)
        for n in range(q):
            for k in range(4):
                src = idx[n, k]
                wk = w[n, k]
                if wk != 0:
                    for ch in range(c):
                        out[n, ch] += wk * nodes[src, ch]
        return out

    @njit(cache=True, fastmath=True)
    def _silu_backward_nb(g, x, sig):
        gf, xf, sf = g.ravel(), x.ravel(), sig.ravel()
        out = np.empty_like(gf)
        for i in range(gf.size):
            v = sf[i]
            out[i] = gf[i] * v * (1 + xf[i] * (1 - v))
        return out.reshape(g.shape)

    @njit(cache=True)
    def _scatter4_nb(g, idx, w, out):
        q = idx.shape[0]
        c = g.shape[1]
        for n in range(q):
            for k in range(4):
                dst = idx[n, k]
                wk = w[n, k]
                if wk != 0:
                    for ch in range(c):
                        out[dst, ch] += wk * g[n, ch]
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def im2col(xp, kh, kw, stride, ho, wo):
    # numpy on both paths: the strided-view copy beats a jit loop
    return im2col_numpy(xp, kh, kw, stride, ho, wo)


def col2im(cols, shape, kh, kw, stride, ho, wo):
    if USE_NUMBA:
        out = np.zeros(shape, dtype=cols.dtype)
        return _col2im_nb(np.ascontiguousarray(cols), out, kh, kw, stride, ho, wo)
    return col2im_numpy(cols, shape, kh, kw, stride, ho, wo)


def gather4(nodes, idx, w):
    if USE_NUMBA:
        return _gather4_nb(np.ascontiguousarray(nodes), idx, w.astype(nodes.dtype, copy=False))
    return gather4_numpy(nodes, idx, w.astype(nodes.dtype, copy=False))


def scatter4(g, idx, w, n_nodes):
    if USE_NUMBA:
        out = np.zeros((n_nodes, g.shape[1]), dtype=g.dtype)
        return _scatter4_nb(np.ascontiguousarray(g), idx, w.astype(g.dtype, copy=False), out)
    return scatter4_numpy(g, idx, w.astype(g.dtype, copy=False), n_nodes)


def silu_backward(g, x, sig):
    if USE_NUMBA and g.dtype == x.dtype == sig.dtype:
        c = np.ascontiguousarray
        return _silu_backward_nb(c(g), c(x), c(sig))
    return silu_backward_numpy(g, x, sig)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
