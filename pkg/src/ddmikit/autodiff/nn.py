"""Parameter containers and the layer set shared by the VAE and the denoiser."""

from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor, add, div, matmul, mul, reshape, tsum


class Module:
    """Minimal module tree: parameters are grad-tracked Tensors held as attributes."""

    training = True

    def __init__(self):
        self._buffers: dict = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Tensor, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            else:
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for key, arr in self._buffers.items():
            yield f"{prefix}{key}", arr
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator[Module]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def state_dict(self) -> dict:
        sd = {name: p.data for name, p in self.named_parameters()}
        for name, arr in self.named_buffers():
            sd[name] = arr
        return sd

    def load_state_dict(self, sd: dict, strict: bool = True):
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in sd]
        bufs = {name for name, _ in self.named_buffers()}
        missing += [k for k in bufs if k not in sd]
        unexpected = [k for k in sd if k not in own and k not in bufs]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name in sd:
                arr = np.asarray(sd[name])
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)
        for mod_prefix, mod in self._module_prefixes():
            for key in list(mod._buffers):
                full = mod_prefix + key
                if full in sd:
                    mod._buffers[key] = np.array(sd[full], dtype=mod._buffers[key].dtype)

    def _module_prefixes(self, prefix: str = ""):
        yield prefix, self
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val._module_prefixes(f"{prefix}{key}.")

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=DEFAULT_DTYPE, bias=True, init_scale=1.0):
        super().__init__()
        self.weight = param(rng.normal(0.0, init_scale / math.sqrt(n_in), (n_out, n_in)), dtype)
        self.bias = param(np.zeros(n_out), dtype) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """3x3/1x1 convolution with optional spectral normalization of the kernel.

    Spectral normalization runs one power iteration per training-mode forward
    pass; ``u``/``v`` are buffers and enter the graph as constants.
    """

    def __init__(self, c_in, c_out, k, rng, dtype=DEFAULT_DTYPE, stride=1, padding=None,
                 bias=True, spectral_norm=False, init_scale=1.0):
        super().__init__()
        fan_in = c_in * k * k
        self.weight = param(rng.normal(0.0, init_scale / math.sqrt(fan_in), (c_out, c_in, k, k)), dtype)
        self.bias = param(np.zeros(c_out), dtype) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.spectral_norm = spectral_norm
        if spectral_norm:
            u = rng.normal(size=c_out)
            v = rng.normal(size=fan_in)
            self._buffers["sn_u"] = (u / np.linalg.norm(u)).astype(dtype)
            self._buffers["sn_v"] = (v / np.linalg.norm(v)).astype(dtype)

    def kernel(self) -> Tensor:
        if not self.spectral_norm:
            return self.weight
        w = self.weight
        wm = w.data.reshape(w.shape[0], -1)
        u, v = self._buffers["sn_u"], self._buffers["sn_v"]
        if self.training:
            v = wm.T @ u
            v = v / (np.linalg.norm(v) + 1e-12)
            u = wm @ v
            u = u / (np.linalg.norm(u) + 1e-12)
            self._buffers["sn_u"], self._buffers["sn_v"] = u.astype(w.dtype), v.astype(w.dtype)
        wmat = reshape(w, (w.shape[0], -1))
        wv = matmul(wmat, Tensor(v.reshape(-1, 1).astype(w.dtype)))
        sigma = tsum(mul(reshape(wv, (-1,)), Tensor(u.astype(w.dtype))))
        if abs(float(sigma.data)) < 1e-12:
            # all-zero kernel: nothing to normalize
            return w
        return div(w, sigma)

    def forward(self, x):
        return F.conv2d(x, self.kernel(), self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, channels, rng=None, dtype=DEFAULT_DTYPE, groups=8, eps=1e-6):
        super().__init__()
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.eps = eps
        self.gamma = param(np.ones(channels), dtype)
        self.beta = param(np.zeros(channels), dtype)

    def forward(self, x):
        return F.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class ResBlock(Module):
    """GN-SiLU-conv twice with a residual path; optional additive embedding."""

    def __init__(self, c_in, c_out, rng, dtype=DEFAULT_DTYPE, emb_dim: int | None = None,
                 spectral_norm=False):
        super().__init__()
        self.norm1 = GroupNorm(c_in, dtype=dtype)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype, spectral_norm=spectral_norm)
        self.emb = Linear(emb_dim, c_out, rng, dtype) if emb_dim else None
        self.norm2 = GroupNorm(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype, spectral_norm=spectral_norm, init_scale=0.5)
        self.skip = Conv2d(c_in, c_out, 1, rng, dtype, spectral_norm=spectral_norm) if c_in != c_out else None

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            e = self.emb(F.silu(emb))
            h = add(h, reshape(e, e.shape + (1, 1)))
        h = self.conv2(F.silu(self.norm2(h)))
        skip = x if self.skip is None else self.skip(x)
        return add(skip, h)
