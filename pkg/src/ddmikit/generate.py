"""Sampling, arbitrary-resolution rendering, scale decomposition and evaluation from checkpoints."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import checkpoint as ckpt_io
from .autodiff import no_grad
from .config import Config
from .config import loads as config_loads
from .diffusion import NoiseSchedule, UNetDenoiser, sample
from .fields import zero_scales
from .metrics import area_downsample, band_energies
from .train import Dataset, build_denoiser, build_vae, evaluate_stage1, load_dataset
from .vae import D2CVAE, make_grid


@dataclass
class Pipeline:
    cfg: Config
    vae: D2CVAE
    denoiser: UNetDenoiser | None = None
    sched: NoiseSchedule | None = None
    latent_scale: float = 1.0

    @classmethod
    def load(cls, path, use_ema: bool = True) -> Pipeline:
        ck = ckpt_io.load(path)
        cfg = config_loads(ck.config)
        vae = build_vae(cfg)
        vae.load_state_dict({k: v for k, v in ck.tensors.items() if k.split(".", 1)[0] in ("enc", "dec", "mlp")})
        vae.eval()
        if ck.meta.get("stage") != 2:
            return cls(cfg, vae)
        den = build_denoiser(cfg)
        src = "ldm.ema." if use_ema else "ldm."
        weights = {k: v for k, v in ck.subset(src).items() if not k.startswith(("ema.", "schedule.", "latent_scale"))}
        den.load_state_dict(weights)
        den.eval()
        sched = NoiseSchedule(ck.tensors["ldm.schedule.beta"])
        return cls(cfg, vae, den, sched, float(ck.tensors["ldm.latent_scale"][0]))

    @property
    def has_prior(self) -> bool:
        return self.denoiser is not None

    def sample_latents(self, count: int, seed: int, label: int | None = None, w: float | None = None):
        """Draw ``count`` latents in the autoencoder's (unscaled) latent space."""
        if not self.has_prior:
            raise ValueError("checkpoint has no trained latent prior; run train-ldm first")
        if label is not None and not self.denoiser.n_classes:
            raise ValueError("this prior was trained without class conditioning")
        rng = np.random.default_rng(seed)
        cond = None if label is None else np.full(count, int(label))
        z = sample(self.denoiser.predict, self.sched, (count,) + self.vae.latent_shape, rng, cond=cond, w=w,
                   null_class=self.denoiser.null_class if label is not None else None)
        return z / self.latent_scale

    def render(self, z, rho: int, keep: int | None = None, chunk: int = 4) -> np.ndarray:
        """Decode latents and read them out on a rho-point lattice per axis.

        Images: (N, C, rho, rho) clipped to [-1, 1]. Occupancy: (N, rho, rho, rho)
        logits indexed [z, y, x]. ``keep`` zeroes every field scale but one.
        """
        if rho < 8:
            raise ValueError(f"output resolution must be >= 8, got {rho}")
        z = np.asarray(z, dtype=self.vae.dtype)
        occ = self.vae.layout == "triplane"
        grid = make_grid(rho, rho, rho) if occ else make_grid(rho, rho)
        s = self.vae.resolution / rho
        outs = []
        with no_grad():
            for i in range(0, len(z), chunk):
                part = z[i : i + chunk]
                fields = self.vae.decode(part)
                if keep is not None:
                    fields = zero_scales(fields, keep)
                coords = np.broadcast_to(grid, (len(part),) + grid.shape)
                pred = self.vae.readout(fields, coords, s).data
                if occ:
                    outs.append(pred.reshape(len(part), rho, rho, rho))
                else:
                    outs.append(np.clip(pred, -1, 1).transpose(0, 2, 1).reshape(len(part), -1, rho, rho))
        return np.concatenate(outs)


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def to_uint8(img) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, C) uint8."""
    a = np.clip((np.asarray(img, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(a).astype(np.uint8).transpose(1, 2, 0)


def write_png(path, img):
    arr = to_uint8(img)
    Image.fromarray(arr if arr.shape[2] == 3 else arr[..., 0]).save(path, format="PNG")


def write_pgm(path, slab):
    """Binary PGM of a 2D 0/1 or [0, 1] array."""
    a = np.rint(np.clip(np.asarray(slab, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def write_occupancy(stem, logits):
    """Middle z-slice as PGM plus the raw uint8 voxel dump (header line with extents)."""
    occ = (np.asarray(logits) > 0).astype(np.uint8)
    d = occ.shape[0]
    write_pgm(stem + "_mid.pgm", occ[d // 2])
    with open(stem + ".vox", "wb") as fh:
        fh.write((" ".join(str(n) for n in occ.shape) + "\n").encode("ascii"))
        fh.write(occ.tobytes())
    return occ


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def generate(ckpt_path, out_dir, rho: int, count: int, seed: int, label: int | None = None,
             w: float | None = None) -> list:
    pipe = Pipeline.load(ckpt_path)
    os.makedirs(out_dir, exist_ok=True)
    z = pipe.sample_latents(count, seed, label, w)
    out = pipe.render(z, rho)
    paths = []
    for i, item in enumerate(out):
        stem = os.path.join(out_dir, f"sample_s{seed}_r{rho}_{i:03d}")
        if pipe.vae.layout == "triplane":
            write_occupancy(stem, item)
            paths.append(stem + ".vox")
        else:
            write_png(stem + ".png", item)
            paths.append(stem + ".png")
    return paths


def decompose(ckpt_path, out_dir, seed: int, keep: int, count: int = 1, rho: int | None = None) -> dict:
    """Render with a single field scale and report its radial FFT band energies."""
    pipe = Pipeline.load(ckpt_path)
    if pipe.vae.layout == "triplane":
        raise ValueError("scale decomposition is implemented for image checkpoints")
    rho = rho or pipe.vae.resolution
    os.makedirs(out_dir, exist_ok=True)
    z = pipe.sample_latents(count, seed)
    imgs = pipe.render(z, rho, keep=keep)
    report = {"seed": seed, "keep": keep, "resolution": rho, "images": []}
    for i, img in enumerate(imgs):
        path = os.path.join(out_dir, f"keep{keep}_s{seed}_{i:03d}.png")
        write_png(path, img)
        report["images"].append({"file": os.path.basename(path), **band_energies(img)})
    with open(os.path.join(out_dir, f"keep{keep}_s{seed}_bands.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    return report


def evaluate(ckpt_path, split: str = "holdout", data: Dataset | None = None) -> dict:
    pipe = Pipeline.load(ckpt_path)
    data = data if data is not None else load_dataset(pipe.cfg)
    return evaluate_stage1(pipe.vae, data, split)


__all__ = [
    "Pipeline",
    "area_downsample",
    "decompose",
    "evaluate",
    "generate",
    "to_uint8",
    "write_occupancy",
    "write_pgm",
    "write_png",
]
