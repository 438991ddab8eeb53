"""Denoising diffusion over the latent space of a trained autoencoder.

Time indices are 1-based throughout: ``t`` runs from 1 (nearly clean) to
``T`` (nearly pure noise), and table entries for step ``t`` live at ``t - 1``.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, concat, no_grad, reshape, sub, tsum
from .autodiff import functional as F
from .autodiff.nn import Conv2d, GroupNorm, Linear, Module, ResBlock, param
from .autodiff.tensor import DEFAULT_DTYPE, getitem


class NumericalError(FloatingPointError):
    """A non-finite value appeared during sampling or training."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


# ---------------------------------------------------------------------------
# schedule and closed-form processes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))
        object.__setattr__(self, "sigma", np.sqrt(beta))

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t):
        ta = np.asarray(t)
        if ta.dtype.kind not in "iu" or np.any(ta < 1) or np.any(ta > self.T):
            raise ValueError(f"diffusion step must be an integer in [1, {self.T}], got {t!r}")
        return ta


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T)))


def _per_sample(table, t, ndim):
    v = table[np.asarray(t) - 1]
    return np.reshape(v, np.shape(v) + (1,) * (ndim - np.ndim(v)))


def forward_diffuse(z0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal sample sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar or one step per leading-axis sample.
    """
    t = sched.check_t(t)
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    ab = _per_sample(sched.alpha_bar, t, z0.ndim)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype, copy=False)


def ancestral_step(z_t, t: int, eps_pred, zeta, sched: NoiseSchedule) -> np.ndarray:
    """One reverse step; the fresh-noise term is dropped at t = 1."""
    sched.check_t(t)
    t = int(t)
    a, b, ab = sched.alpha[t - 1], sched.beta[t - 1], sched.alpha_bar[t - 1]
    z_t = np.asarray(z_t)
    mean = (z_t - (b / math.sqrt(1.0 - ab)) * np.asarray(eps_pred)) / math.sqrt(a)
    if t > 1:
        mean = mean + sched.sigma[t - 1] * np.asarray(zeta)
    return mean.astype(z_t.dtype, copy=False)


def cfg_combine(e_uncond, e_cond, w: float):
    """Guided noise estimate e_uncond + w (e_cond - e_uncond)."""
    e_uncond = np.asarray(e_uncond)
    e_cond = np.asarray(e_cond)
    if e_uncond.shape != e_cond.shape:
        raise ValueError(f"guidance inputs differ in shape: {e_uncond.shape} vs {e_cond.shape}")
    if w == 0:
        return e_uncond.copy()
    if w == 1:
        return e_cond.copy()
    return e_uncond + w * (e_cond - e_uncond)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

def timestep_embedding(t, dim: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Sinusoidal features of the (1-based) step index, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class UNetDenoiser(Module):
    """Small 2D U-Net predicting the noise added to a latent.

    For tri-plane latents (B, 3, C, H, W) the three planes share the network;
    with ``plane_mixing`` a bottleneck block concatenates their channels,
    applies one shared 1x1 conv and splits the result back per plane.
    Class conditioning adds a learned vector to the time embedding; the last
    row of the table is the null class used for guidance.
    """

    def __init__(self, z_ch=4, widths=(64, 96, 128), temb=128, n_classes=0, triplane=False,
                 plane_mixing=True, seed=0, dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.z_ch, self.widths, self.temb_dim = z_ch, tuple(widths), temb
        self.n_classes = n_classes
        self.triplane = triplane
        self.plane_mixing = triplane and plane_mixing
        self.dtype = np.dtype(dtype)
        self.t_fc1 = Linear(temb, temb, rng, dtype)
        self.t_fc2 = Linear(temb, temb, rng, dtype)
        if n_classes:
            self.class_table = param(rng.normal(0.0, 1.0, (n_classes + 1, temb)), dtype)
        self.conv_in = Conv2d(z_ch, widths[0], 3, rng, dtype)
        self.down = []
        prev = widths[0]
        for w in widths:
            self.down.append(ResBlock(prev, w, rng, dtype, emb_dim=temb))
            prev = w
        self.mid = ResBlock(prev, prev, rng, dtype, emb_dim=temb)
        if self.plane_mixing:
            self.mix = Conv2d(3 * prev, 3 * prev, 1, rng, dtype, init_scale=0.1)
        self.up = []
        for w in reversed(widths[:-1]):
            self.up.append(ResBlock(prev + w, w, rng, dtype, emb_dim=temb))
            prev = w
        self.norm_out = GroupNorm(prev, dtype=dtype)
        self.conv_out = Conv2d(prev, z_ch, 3, rng, dtype)
        self.conv_out.weight.data[...] = 0

    @property
    def null_class(self) -> int:
        return self.n_classes

    def embed(self, t, cond=None) -> Tensor:
        e = Tensor(timestep_embedding(t, self.temb_dim, self.dtype))
        e = self.t_fc2(F.silu(self.t_fc1(e)))
        if self.n_classes:
            if cond is None:
                cond = np.full(e.shape[0], self.null_class)
            cond = np.asarray(cond, dtype=np.int64)
            if np.any(cond < 0) or np.any(cond > self.n_classes):
                raise ValueError(f"class index out of range 0..{self.n_classes}")
            e = add(e, getitem(self.class_table, cond))
        elif cond is not None:
            raise ValueError("denoiser was built without class conditioning")
        return e

    def forward(self, z, t, cond=None) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        b = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        if cond is not None:
            cond = np.broadcast_to(np.asarray(cond), (b,))
        if self.triplane:
            if z.ndim != 5 or z.shape[1] != 3:
                raise ValueError(f"tri-plane denoiser expects (B, 3, C, H, W), got {z.shape}")
            t, cond = np.repeat(t, 3), None if cond is None else np.repeat(cond, 3)
            h = reshape(z, (b * 3,) + z.shape[2:])
        else:
            h = z
        emb = self.embed(t, cond)
        h = self.conv_in(h)
        skips = []
        for i, blk in enumerate(self.down):
            if i > 0:
                h = F.avgpool2x(h)
            h = blk(h, emb)
            skips.append(h)
        h = self.mid(h, emb)
        if self.plane_mixing:
            c, hh, ww = h.shape[1:]
            joint = reshape(h, (b, 3 * c, hh, ww))
            h = add(h, reshape(self.mix(joint), (b * 3, c, hh, ww)))
        skips.pop()
        for blk in self.up:
            h = F.resize_nearest2x(h)
            h = blk(concat([h, skips.pop()], axis=1), emb)
        out = self.conv_out(F.silu(self.norm_out(h)))
        return reshape(out, z.shape)

    def predict(self, z, t, cond=None) -> np.ndarray:
        with no_grad():
            return self.forward(z, t, cond).data


def denoise_loss(z0, sched: NoiseSchedule, denoiser: Callable, rng, cond=None, p_uncond: float = 0.0,
                 null_class: int | None = None, t=None, eps=None) -> Tensor:
    """Noise-prediction loss: squared error summed over latent dims, averaged over the batch.

    When ``p_uncond > 0`` each label is replaced by ``null_class`` with that
    probability. ``t`` and ``eps`` may be fixed for testing.
    """
    z0 = np.asarray(z0)
    b = z0.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=b)
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    eps = np.asarray(eps, dtype=z0.dtype)
    z_t = forward_diffuse(z0, t, eps, sched)
    if cond is not None and p_uncond > 0:
        if null_class is None:
            raise ValueError("null_class is required when dropping labels")
        drop = rng.random(b) < p_uncond
        cond = np.where(drop, null_class, np.asarray(cond))
    pred = denoiser(Tensor(z_t), t, cond)
    d = sub(pred, Tensor(eps))
    return tsum(d * d) * (1.0 / b)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.9999
    updates: int = 0

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.decay}")

    @classmethod
    def from_params(cls, named, decay=0.9999) -> EmaState:
        return cls({k: np.array(v.data if isinstance(v, Tensor) else v, copy=True) for k, v in dict(named).items()}, decay)

    def effective_decay(self, warmup: bool = True) -> float:
        if not warmup:
            return self.decay
        return min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))


def ema_update(ema: EmaState, live, decay: float | None = None) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * live, tensor by tensor, in place on the shadow."""
    live = dict(live)
    if set(live) != set(ema.shadow):
        raise ValueError("EMA shadow and live parameters have different names")
    d = ema.decay if decay is None else decay
    for k, v in live.items():
        arr = v.data if isinstance(v, Tensor) else np.asarray(v)
        sh = ema.shadow[k]
        if sh.shape != arr.shape:
            raise ValueError(f"EMA shape mismatch for {k}: {sh.shape} vs {arr.shape}")
        sh *= d
        sh += (1.0 - d) * arr
    ema.updates += 1
    return ema


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample(predict: Callable, sched: NoiseSchedule, shape, rng, cond=None, w: float | None = None,
           null_class: int | None = None, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Ancestral sampling from pure noise down to z0.

    ``predict(z, t, cond)`` returns a noise estimate as an array. With ``cond``
    and a guidance weight ``w``, conditional and null-class estimates are
    combined; without ``w`` the conditional estimate is used directly.
    """
    shape = tuple(shape)
    z = rng.standard_normal(shape).astype(dtype)
    b = shape[0]
    guided = cond is not None and w is not None
    if guided and null_class is None:
        raise ValueError("guided sampling needs the null class index")
    if cond is not None:
        cond = np.broadcast_to(np.asarray(cond), (b,))
    for t in range(sched.T, 0, -1):
        tt = np.full(b, t)
        if guided:
            e_u = predict(z, tt, np.full(b, null_class))
            e_c = e_u if w == 0 else predict(z, tt, cond)
            eps = cfg_combine(e_u, e_c, w)
        else:
            eps = predict(z, tt, cond)
        zeta = rng.standard_normal(shape).astype(dtype)
        z = ancestral_step(z, t, eps, zeta, sched)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite latent at diffusion step t={t}", step=t)
    return z


__all__ = [
    "EmaState",
    "NoiseSchedule",
    "NumericalError",
    "UNetDenoiser",
    "ancestral_step",
    "cfg_combine",
    "denoise_loss",
    "ema_update",
    "forward_diffuse",
    "make_schedule",
    "sample",
    "timestep_embedding",
]
