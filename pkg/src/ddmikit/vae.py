"""Asymmetric VAE from discrete grids to continuous functions.

The encoder maps an image (or the three axis projections of a voxel grid) to a
Gaussian posterior over a 2D latent grid. The decoder turns a latent into basis
fields at three resolutions; a residual MLP reads the fields out at arbitrary
coordinates, conditioning on the coarsest embedding first and merging finer
ones block by block. Every fully connected weight of the MLP is modulated and
demodulated by a mapping of the scale variable ``s``.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, add, clip, concat, div, exp, mul, reshape, sqrt, sub, tsum
from .autodiff import functional as F
from .autodiff.nn import Conv2d, GroupNorm, Linear, Module, ResBlock, param
from .autodiff.tensor import DEFAULT_DTYPE, getitem
from .fields import BasisFieldSet, check_coords, sample_hdbf

LIKELIHOODS = ("gaussian-l1", "bernoulli")


# ---------------------------------------------------------------------------
# posterior
# ---------------------------------------------------------------------------

@dataclass
class LatentPosterior:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ValueError(f"mean {self.mean.shape} and logvar {self.logvar.shape} differ")

    @property
    def shape(self):
        return self.mean.shape


def reparameterize(post: LatentPosterior, noise) -> Tensor:
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise)
    if noise.shape != post.mean.shape:
        raise ValueError(f"noise shape {noise.shape} != posterior shape {post.mean.shape}")
    std = exp(mul(post.logvar, 0.5))
    return add(post.mean, mul(std, Tensor(noise.astype(post.mean.dtype))))


def kl_divergence(post: LatentPosterior) -> Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over the batch axis."""
    m, lv = post.mean, post.logvar
    terms = sub(sub(add(mul(m, m), exp(lv)), 1.0), lv)
    b = m.shape[0]
    return mul(tsum(terms), 0.5 / b)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class Encoder(Module):
    """Conv stack with residual blocks and 2x average-pool downsampling.

    ``widths`` lists channels per level from input resolution down; the
    latent sits at ``r / 2**(len(widths)-1)``.
    """

    def __init__(self, in_ch, widths, z_ch, rng, dtype=DEFAULT_DTYPE, spectral_norm=True, zero_head=False):
        super().__init__()
        self.z_ch = z_ch
        self.conv_in = Conv2d(in_ch, widths[0], 3, rng, dtype, spectral_norm=spectral_norm)
        blocks = []
        prev = widths[0]
        for w in widths:
            blocks.append(ResBlock(prev, w, rng, dtype, spectral_norm=spectral_norm))
            prev = w
        self.blocks = blocks
        self.norm_out = GroupNorm(prev, dtype=dtype)
        self.conv_out = Conv2d(prev, 2 * z_ch, 3, rng, dtype, spectral_norm=spectral_norm and not zero_head)
        if zero_head:
            self.conv_out.weight.data[...] = 0
        self.downsample = 2 ** (len(widths) - 1)

    def forward(self, x):
        h = self.conv_in(x)
        for i, blk in enumerate(self.blocks):
            if i > 0:
                h = F.avgpool2x(h)
            h = blk(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(Module):
    """Latent grid -> basis fields read off successive upsampling levels.

    ``widths`` lists channels from the latent resolution upward; each level
    doubles the spatial extent. A 1x1 conv per level maps features to the
    common embedding width. With ``hdbf=False`` only the finest level is emitted.
    """

    def __init__(self, z_ch, widths, emb_ch, rng, dtype=DEFAULT_DTYPE, hdbf=True):
        super().__init__()
        self.hdbf = hdbf
        self.conv_in = Conv2d(z_ch, widths[0], 3, rng, dtype)
        blocks, ups, heads, norms = [], [], [], []
        prev = widths[0]
        for i, w in enumerate(widths):
            if i > 0:
                ups.append(Conv2d(prev, w, 3, rng, dtype))
                prev = w
            blocks.append(ResBlock(prev, w, rng, dtype))
            if hdbf or i == len(widths) - 1:
                norms.append(GroupNorm(w, dtype=dtype))
                heads.append(Conv2d(w, emb_ch, 1, rng, dtype))
        self.blocks, self.ups, self.heads, self.norms = blocks, ups, heads, norms

    def forward(self, z) -> list:
        h = self.conv_in(z)
        outs = []
        n = len(self.blocks)
        for i, blk in enumerate(self.blocks):
            if i > 0:
                h = self.ups[i - 1](F.resize_nearest2x(h))
            h = blk(h)
            if self.hdbf or i == n - 1:
                k = i if self.hdbf else 0
                outs.append(self.heads[k](F.silu(self.norms[k](h))))
        return outs


def scale_inject(weight: Tensor, a: Tensor, eps: float = 1e-8) -> Tensor:
    """Modulate columns of an (out, in) weight by ``a`` and renormalize each row.

    w_ij * a_j / sqrt(sum_k (w_ik * a_k)^2 + eps)
    """
    wa = mul(weight, reshape(a, (1, -1)))
    denom = sqrt(add(tsum(mul(wa, wa), axis=1, keepdims=True), eps))
    return div(wa, denom)


def fourier_features(s: float, n_freq: int = 4, dtype=DEFAULT_DTYPE) -> np.ndarray:
    if not s > 0:
        raise ValueError(f"scale variable must be positive, got {s}")
    ang = math.pi * (2.0 ** np.arange(n_freq)) * s
    return np.concatenate([np.sin(ang), np.cos(ang)])[None].astype(dtype)


class ModLinear(Module):
    """Fully connected layer whose weight passes through :func:`scale_inject`."""

    def __init__(self, n_in, n_out, emb_dim, rng, dtype=DEFAULT_DTYPE, inject=True, eps=1e-8):
        super().__init__()
        self.weight = param(rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_out, n_in)), dtype)
        self.bias = param(np.zeros(n_out), dtype)
        self.inject = inject
        self.eps = eps
        if inject:
            self.amap = Linear(emb_dim, n_in, rng, dtype, init_scale=0.1)
            self.amap.bias.data[...] = 1.0

    def effective_weight(self, emb: Tensor | None) -> Tensor:
        if not self.inject:
            return self.weight
        a = reshape(self.amap(emb), (-1,))
        return scale_inject(self.weight, a, self.eps)

    def forward(self, x, emb=None):
        return F.linear(x, self.effective_weight(emb), self.bias)


class ReadoutMLP(Module):
    """Residual MLP that maps positional embeddings to signal values.

    mode="cfc": block 1 sees the coarsest embedding; before block i (i >= 2) the
    i-th embedding is summed onto the running features.
    mode="concat": all embeddings are concatenated and projected once.
    mode="single": one embedding, fed to block 1.
    """

    def __init__(self, emb_ch, n_out, rng, dtype=DEFAULT_DTYPE, n_blocks=4, n_scales=3, mode="cfc",
                 scale_injection=True, s_emb_dim=32, n_freq=4):
        super().__init__()
        if mode not in ("cfc", "concat", "single"):
            raise ValueError(f"unknown read-out mode {mode!r}")
        if mode == "cfc" and n_blocks < n_scales:
            raise ValueError("coarse-to-fine read-out needs at least one block per scale")
        self.mode, self.n_scales, self.n_freq = mode, n_scales, n_freq
        self.width = emb_ch
        self.scale_injection = scale_injection
        si = scale_injection
        if si:
            self.s_fc = Linear(2 * n_freq, s_emb_dim, rng, dtype)
        self.inp = ModLinear(emb_ch * n_scales, emb_ch, s_emb_dim, rng, dtype, si) if mode == "concat" else None
        self.fc1 = [ModLinear(emb_ch, emb_ch, s_emb_dim, rng, dtype, si) for _ in range(n_blocks)]
        self.fc2 = [ModLinear(emb_ch, emb_ch, s_emb_dim, rng, dtype, si) for _ in range(n_blocks)]
        self.head = ModLinear(emb_ch, n_out, s_emb_dim, rng, dtype, si)

    def scale_embedding(self, s: float):
        if not self.scale_injection:
            return None
        return F.silu(self.s_fc(Tensor(fourier_features(s, self.n_freq, self.s_fc.weight.dtype))))

    def forward(self, pes: Sequence[Tensor], s: float = 1.0) -> Tensor:
        pes = list(pes)
        want = 1 if self.mode == "single" else self.n_scales
        if len(pes) != want:
            raise ValueError(f"read-out expects {want} embeddings, got {len(pes)}")
        for p in pes:
            if p.shape[-1] != self.width:
                raise ValueError(f"embedding width {p.shape[-1]} != read-out width {self.width}")
        emb = self.scale_embedding(s)
        lead = pes[0].shape[:-1]
        flat = [reshape(p, (-1, self.width)) for p in pes]
        if self.mode == "concat":
            h = self.inp(concat(flat, axis=1), emb)
        else:
            h = flat[0]
        for i in range(len(self.fc1)):
            if self.mode == "cfc" and 0 < i < self.n_scales:
                h = add(h, flat[i])
            r = self.fc1[i](F.silu(h), emb)
            h = add(h, self.fc2[i](F.silu(r), emb))
        out = self.head(F.silu(h), emb)
        return reshape(out, lead + (out.shape[-1],))


# ---------------------------------------------------------------------------
# the assembled model
# ---------------------------------------------------------------------------

class D2CVAE(Module):
    def __init__(self, *, layout="single", in_ch=3, n_out=3, resolution=64, enc_widths=(16, 32, 64),
                 dec_widths=(64, 32, 16), z_ch=4, emb_ch=64, n_blocks=4, hdbf=True, cfc=True,
                 scale_injection=True, spectral_norm=True, likelihood="gaussian-l1", seed=0,
                 dtype=DEFAULT_DTYPE, zero_enc_head=False):
        super().__init__()
        if likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {likelihood!r}")
        if layout not in ("single", "triplane"):
            raise ValueError(f"unknown layout {layout!r}")
        rng = np.random.default_rng(seed)
        self.layout = layout
        self.resolution = resolution
        self.likelihood = likelihood
        self.n_out = n_out
        self.enc = Encoder(in_ch, list(enc_widths), z_ch, rng, dtype, spectral_norm, zero_enc_head)
        self.dec = Decoder(z_ch, list(dec_widths), emb_ch, rng, dtype, hdbf)
        n_scales = len(dec_widths) if hdbf else 1
        mode = ("cfc" if cfc else "concat") if hdbf else "single"
        self.mlp = ReadoutMLP(emb_ch, n_out, rng, dtype, n_blocks, n_scales, mode, scale_injection)
        self.latent_res = resolution // self.enc.downsample
        self.z_ch = z_ch
        self.dtype = np.dtype(dtype)

    @property
    def latent_shape(self) -> tuple:
        base = (self.z_ch, self.latent_res, self.latent_res)
        return base if self.layout == "single" else (3,) + base

    # -- encoder side ------------------------------------------------------
    def encode(self, x) -> LatentPosterior:
        """Images (B, C, r, r) or voxel grids (B, r, r, r) -> posterior."""
        xd = np.asarray(x.data if isinstance(x, Tensor) else x)
        r = self.resolution
        if self.layout == "single":
            if xd.ndim != 4 or xd.shape[2:] != (r, r):
                raise ValueError(f"expected images of shape (B, C, {r}, {r}), got {xd.shape}")
            inp = x if isinstance(x, Tensor) else Tensor(xd.astype(self.dtype))
        else:
            if xd.ndim != 4 or xd.shape[1:] != (r, r, r):
                raise ValueError(f"expected voxel grids of shape (B, {r}, {r}, {r}), got {xd.shape}")
            planes = project_voxels(xd).astype(self.dtype)  # (B, 3, r, r)
            inp = Tensor(planes.reshape(-1, 1, r, r))
        h = self.enc(inp)
        zc = self.z_ch
        mean = getitem(h, (slice(None), slice(0, zc)))
        logvar = clip(getitem(h, (slice(None), slice(zc, 2 * zc))), -30.0, 20.0)
        if self.layout == "triplane":
            b = xd.shape[0]
            shp = (b, 3, zc) + h.shape[2:]
            mean, logvar = reshape(mean, shp), reshape(logvar, shp)
        return LatentPosterior(mean, logvar)

    # -- decoder side ------------------------------------------------------
    def decode(self, z) -> BasisFieldSet:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        want = self.latent_shape
        if tuple(z.shape[1:]) != want:
            raise ValueError(f"latent shape {z.shape[1:]} != expected {want}")
        if self.layout == "single":
            return BasisFieldSet(self.dec(z), "single")
        b = z.shape[0]
        flat = reshape(z, (b * 3,) + z.shape[2:])
        scales = [reshape(t, (b, 3) + t.shape[1:]) for t in self.dec(flat)]
        return BasisFieldSet(scales, "triplane")

    def readout(self, fields: BasisFieldSet, coords, s: float = 1.0) -> Tensor:
        return self.mlp(sample_hdbf(fields, coords), s)

    def render(self, z, coords, s: float = 1.0) -> Tensor:
        return self.readout(self.decode(z), coords, s)


def project_voxels(vox: np.ndarray) -> np.ndarray:
    """Mean-project (B, D, H, W) voxel grids indexed [z, y, x] onto (xy, yz, xz) planes.

    Each plane is laid out (rows, cols) = (second, first) coordinate of its pair.
    """
    vox = np.asarray(vox, dtype=np.float64)
    xy = vox.mean(axis=1)  # [y, x]
    yz = vox.mean(axis=3)  # [z, y]
    xz = vox.mean(axis=2)  # [z, x]
    return np.stack([xy, yz, xz], axis=1)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def reconstruction_loss(pred: Tensor, target, likelihood: str = "gaussian-l1") -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and target {t.shape} differ")
    if likelihood == "gaussian-l1":
        return F.l1_loss(pred, Tensor(t.astype(pred.dtype)))
    if likelihood == "bernoulli":
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("bernoulli targets must be 0 or 1")
        return F.bce_with_logits(pred, t).mean()
    raise ValueError(f"unknown likelihood {likelihood!r}")


@dataclass
class ReconBatch:
    inputs: np.ndarray  # encoder input at base resolution
    coords: np.ndarray  # (B, I, m)
    targets: np.ndarray  # (B, I, n_out)
    s: float = 1.0


def d2cvae_loss(model: D2CVAE, batch: ReconBatch, lam_z: float, noise=None, rng=None):
    """Re-weighted objective: mean per-coordinate reconstruction + lam_z * KL.

    Returns (total, recon, kl). ``noise`` defaults to a standard normal draw
    from ``rng``.
    """
    if batch.coords.shape[1] == 0:
        raise ValueError("empty coordinate subset")
    post = model.encode(batch.inputs)
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal(post.shape)
    z = reparameterize(post, noise)
    pred = model.render(z, batch.coords, batch.s)
    recon = reconstruction_loss(pred, batch.targets, model.likelihood)
    kl = kl_divergence(post)
    total = add(recon, mul(kl, float(lam_z))) if lam_z else add(recon, mul(kl, 0.0))
    return total, recon, kl


def lambda_z_at(step: int, total_steps: int, final: float, warmup_frac: float = 0.3) -> float:
    """Linear warm-up of the KL weight from 0 over the first ``warmup_frac`` of training."""
    ramp = max(1, int(round(warmup_frac * total_steps)))
    return final * min(1.0, step / ramp)


# ---------------------------------------------------------------------------
# multi-resolution training batches
# ---------------------------------------------------------------------------

def make_grid(*extents) -> np.ndarray:
    """Align-corners lattice over [-1, 1]^m in row-major order.

    ``make_grid(H, W)`` returns (H*W, 2) points (x, y) with y the outer loop;
    ``make_grid(D, H, W)`` returns (D*H*W, 3) points (x, y, z).
    """
    if len(extents) not in (2, 3):
        raise ValueError("make_grid takes 2 or 3 extents")
    if min(extents) < 2:
        raise ValueError(f"grid extents must be >= 2, got {extents}")
    axes = [np.linspace(-1.0, 1.0, n) for n in extents]
    mesh = np.meshgrid(*axes, indexing="ij")  # outer .. inner = (z,) y, x
    pts = np.stack([m.reshape(-1) for m in reversed(mesh)], axis=1)
    return pts


def resample_image(img: np.ndarray, rho: int) -> np.ndarray:
    """Resample a (C, S, S) image to (C, rho, rho) on the align-corners lattice.

    Downsampling applies a Gaussian prefilter (sigma = (S/rho - 1)/2) before
    bilinear point sampling.
    """
    c, h, w = img.shape
    if rho == h == w:
        return img.copy()
    factor = max(h, w) / rho
    src = img
    if factor > 1:
        sig = 0.5 * (factor - 1.0)
        src = np.stack([ndimage.gaussian_filter(ch, sig, mode="nearest") for ch in img])
    ys = np.linspace(0, h - 1, rho)
    xs = np.linspace(0, w - 1, rho)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(ch, [yy, xx], order=1, mode="nearest") for ch in src]).astype(img.dtype)


class ImagePyramid:
    """Source images cached at every resolution the multiscale batcher may pick."""

    def __init__(self, sources: np.ndarray, r: int, factors=(1.0, 1.5, 2.0)):
        sources = np.asarray(sources)
        if sources.shape[-1] < 2 * r or sources.shape[-2] < 2 * r:
            raise ValueError(f"sources must be at least {2 * r}px, got {sources.shape[-2:]}")
        self.r = r
        self.sources = sources
        self.resolutions = sorted({int(round(f * r)) for f in factors})
        self.levels = {rho: np.stack([resample_image(im, rho) for im in sources]) for rho in self.resolutions}
        if r not in self.levels:
            self.levels[r] = np.stack([resample_image(im, r) for im in sources])

    def at(self, rho: int) -> np.ndarray:
        if rho not in self.levels:
            self.levels[rho] = np.stack([resample_image(im, rho) for im in self.sources])
        return self.levels[rho]


def multiscale_batch(x_highres, r: int, rng, rho: int | None = None, n_coords: int | None = None,
                     crop_origin=None, pyramid: ImagePyramid | None = None, indices=None,
                     factors=(1.0, 1.5, 2.0)) -> ReconBatch:
    """Assemble one multi-resolution training batch.

    Picks rho from {r, 1.5r, 2r} (unless given), resamples the sources to rho,
    crops an r x r window per image when rho > r, and returns the crop's
    coordinates in the global [-1, 1] frame together with s = r / rho. The
    encoder always sees the full frame at resolution r.
    """
    if pyramid is None:
        src = np.asarray(x_highres)
        if src.shape[-1] < 2 * r:
            raise ValueError(f"sources must be at least {2 * r}px, got {src.shape[-1]}")
        get = lambda res: np.stack([resample_image(im, res) for im in src])
    else:
        sel = slice(None) if indices is None else indices
        get = lambda res: pyramid.at(res)[sel]
    if rho is None:
        rho = int(round(float(rng.choice(factors)) * r))
    enc = get(r)
    full = enc if rho == r else get(rho)
    b, c = full.shape[:2]
    grid1d = np.linspace(-1.0, 1.0, rho)
    targets, coords = [], []
    for i in range(b):
        if crop_origin is not None:
            oy, ox = crop_origin
        elif rho > r:
            oy, ox = rng.integers(0, rho - r + 1, size=2)
        else:
            oy = ox = 0
        patch = full[i, :, oy : oy + r, ox : ox + r]
        ys, xs = grid1d[oy : oy + r], grid1d[ox : ox + r]
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        cc = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
        vals = patch.reshape(c, -1).T
        if n_coords is not None and n_coords < cc.shape[0]:
            pick = rng.choice(cc.shape[0], size=n_coords, replace=False)
            cc, vals = cc[pick], vals[pick]
        coords.append(cc)
        targets.append(vals)
    return ReconBatch(enc, np.stack(coords), np.stack(targets), r / rho)


def image_targets(images: np.ndarray):
    """Full-grid coordinates and per-pixel targets for (B, C, H, W) images."""
    b, c, h, w = images.shape
    coords = np.broadcast_to(make_grid(h, w), (b, h * w, 2)).copy()
    return coords, images.reshape(b, c, h * w).transpose(0, 2, 1)


__all__ = [
    "D2CVAE",
    "Decoder",
    "Encoder",
    "ImagePyramid",
    "LatentPosterior",
    "ModLinear",
    "ReadoutMLP",
    "ReconBatch",
    "check_coords",
    "d2cvae_loss",
    "fourier_features",
    "image_targets",
    "kl_divergence",
    "lambda_z_at",
    "make_grid",
    "multiscale_batch",
    "project_voxels",
    "reconstruction_loss",
    "reparameterize",
    "resample_image",
    "scale_inject",
]
