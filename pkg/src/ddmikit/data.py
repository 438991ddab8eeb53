"""Datasets: procedural images, user image folders and synthetic occupancy shapes."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .vae import make_grid

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")
N_CLASSES = 4


class DataError(RuntimeError):
    """The dataset is missing, empty or malformed."""


# ---------------------------------------------------------------------------
# procedural images
# ---------------------------------------------------------------------------

def _hsv_to_rgb(h, s, v):
    import colorsys

    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _soft_step(d, width):
    # smooth edge of roughly ``width`` (in [-1, 1] units) around d = 0
    return 0.5 * (1.0 + np.tanh(d / width))


def synth_image(rng, label: int, size: int = 128) -> np.ndarray:
    """One (3, size, size) image in [-1, 1]: gradient background, soft ellipse, faint stripes.

    ``label`` picks the hue family, so class identity is carried by colour.
    """
    ax = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    hue = label / N_CLASSES + rng.uniform(-0.04, 0.04)

    theta = rng.uniform(0, 2 * np.pi)
    ramp = 0.5 * (1 + 0.7 * (np.cos(theta) * xx + np.sin(theta) * yy))
    c0 = _hsv_to_rgb(hue, rng.uniform(0.5, 0.9), rng.uniform(0.25, 0.45))
    c1 = _hsv_to_rgb(hue + rng.uniform(-0.05, 0.05), rng.uniform(0.4, 0.8), rng.uniform(0.7, 0.95))
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    phi = rng.uniform(0, np.pi)
    freq = rng.uniform(1.5, 4.0)
    stripes = np.sin(np.pi * freq * (np.cos(phi) * xx + np.sin(phi) * yy) + rng.uniform(0, 2 * np.pi))
    img = img + 0.08 * stripes[None]

    cx, cy = rng.uniform(-0.4, 0.4, size=2)
    rx, ry = rng.uniform(0.2, 0.5, size=2)
    rot = rng.uniform(0, np.pi)
    u = np.cos(rot) * (xx - cx) + np.sin(rot) * (yy - cy)
    v = -np.sin(rot) * (xx - cx) + np.cos(rot) * (yy - cy)
    rad = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    mask = _soft_step(1.0 - rad, 0.06)
    ce = _hsv_to_rgb(hue + rng.choice([-0.08, 0.08]), rng.uniform(0.6, 1.0), rng.uniform(0.5, 1.0))
    img = img * (1 - mask[None]) + ce[:, None, None] * mask[None]

    return np.clip(img * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)


def synth_images(n: int = 512, size: int = 128, seed: int = 0):
    """``n`` procedural images (n, 3, size, size) and their class labels (balanced, shuffled)."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % N_CLASSES)
    imgs = np.stack([synth_image(rng, int(k), size) for k in labels])
    return imgs, labels


def split_indices(n: int, holdout: float = 0.1, seed: int = 0):
    """Deterministic (train, held-out) index split."""
    perm = np.random.default_rng(seed + 7919).permutation(n)
    k = max(1, int(round(holdout * n)))
    return np.sort(perm[k:]), np.sort(perm[:k])


# ---------------------------------------------------------------------------
# image folders
# ---------------------------------------------------------------------------

def load_image_folder(path, r: int) -> np.ndarray:
    """Load 8-bit PNG/PPM files as (N, 3, 2r, 2r) float32 in [-1, 1].

    Files are taken in lexicographic order, centre-cropped to a square and
    resized to 2r. Unreadable files are skipped with a warning.
    """
    from PIL import Image, UnidentifiedImageError

    if not os.path.isdir(path):
        raise DataError(f"image folder not found: {path}")
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(IMAGE_SUFFIXES))
    out = []
    size = 2 * r
    for name in names:
        full = os.path.join(path, name)
        try:
            with Image.open(full) as im:
                im = im.convert("RGB")
                w, h = im.size
                side = min(w, h)
                left, top = (w - side) // 2, (h - side) // 2
                im = im.crop((left, top, left + side, top + side)).resize((size, size), Image.LANCZOS)
                arr = np.asarray(im, dtype=np.float32)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", full, exc)
            continue
        out.append(arr.transpose(2, 0, 1) / 127.5 - 1.0)
    if not out:
        raise DataError(f"no readable PNG/PPM images in {path}")
    return np.stack(out).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic occupancy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuperellipsoidShape:
    center: tuple
    radii: tuple
    exponent: float

    def __post_init__(self):
        c, r = np.asarray(self.center, float), np.asarray(self.radii, float)
        if c.shape != (3,) or r.shape != (3,) or np.any(r <= 0) or self.exponent <= 0:
            raise ValueError("superellipsoid needs 3-d centre, positive radii and exponent")
        if np.any(np.abs(c) + r > 1.0):
            raise ValueError("superellipsoid must lie inside [-1, 1]^3")

    def occupancy(self, pts) -> np.ndarray:
        """Inside test for (..., 3) points (x, y, z); returns 0/1 as uint8."""
        p = np.asarray(pts, dtype=np.float64)
        q = np.abs((p - np.asarray(self.center)) / np.asarray(self.radii))
        val = np.sum(q ** (2.0 / self.exponent), axis=-1)
        return (val <= 1.0).astype(np.uint8)

    def voxelize(self, res: int) -> np.ndarray:
        """(res, res, res) grid indexed [z, y, x] at the align-corners lattice nodes."""
        if res < 16:
            raise ValueError(f"voxel resolution must be >= 16, got {res}")
        return self.occupancy(make_grid(res, res, res)).reshape(res, res, res)


def random_superellipsoid(rng) -> SuperellipsoidShape:
    radii = rng.uniform(0.3, 0.75, size=3)
    slack = 0.95 - radii
    center = rng.uniform(-1, 1, size=3) * np.minimum(slack, 0.25)
    return SuperellipsoidShape(tuple(center), tuple(radii), float(rng.uniform(0.3, 1.6)))


def synth_occupancy(n: int = 256, res: int = 32, seed: int = 0):
    """``n`` random shapes and their voxel grids (n, res, res, res) uint8."""
    rng = np.random.default_rng(seed)
    shapes = [random_superellipsoid(rng) for _ in range(n)]
    return shapes, np.stack([s.voxelize(res) for s in shapes])


def voxel_queries(vox: np.ndarray, rng, n: int):
    """Random voxel-centre coordinates (B, n, 3) and their occupancy targets (B, n, 1)."""
    b, d, h, w = vox.shape
    grid = make_grid(d, h, w)
    idx = rng.integers(0, d * h * w, size=(b, n))
    flat = vox.reshape(b, -1)
    return grid[idx], np.take_along_axis(flat, idx, axis=1)[..., None].astype(np.float32)


__all__ = [
    "N_CLASSES",
    "DataError",
    "SuperellipsoidShape",
    "load_image_folder",
    "make_grid",
    "random_superellipsoid",
    "split_indices",
    "synth_image",
    "synth_images",
    "synth_occupancy",
    "voxel_queries",
]
