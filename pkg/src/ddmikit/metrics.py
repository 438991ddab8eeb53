"""Reconstruction metrics, spectral band energies and the CSV run log."""

from __future__ import annotations

import csv
import math
import os

import numpy as np

from .diffusion import NumericalError

PSNR_CAP = 99.0


def psnr(a, b, data_range: float = 2.0, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report ``cap``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(data_range**2 / mse))


def iou(pred, target) -> float:
    """Intersection over union of two boolean occupancy arrays (1.0 when both are empty)."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(target, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"iou shapes differ: {p.shape} vs {t.shape}")
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & t) / union


BAND_EDGES = (1.0 / 3.0, 2.0 / 3.0)


def band_energies(img) -> dict:
    """Radial FFT energy of a (C, H, W) or (H, W) image split into low, mid and high bands.

    The radius is normalised so that 1 is the Nyquist frequency along an axis;
    the per-channel mean is removed first so the DC term does not dominate.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    x = x - x.mean(axis=(-2, -1), keepdims=True)
    power = (np.abs(np.fft.fft2(x)) ** 2).sum(axis=0)
    h, w = power.shape
    fy = np.fft.fftfreq(h)[:, None] / 0.5
    fx = np.fft.fftfreq(w)[None, :] / 0.5
    rad = np.sqrt(fx**2 + fy**2)
    lo, hi = BAND_EDGES
    return {
        "low": float(power[rad < lo].sum()),
        "mid": float(power[(rad >= lo) & (rad < hi)].sum()),
        "high": float(power[rad >= hi].sum()),
    }


def high_low_ratio(img) -> float:
    e = band_energies(img)
    return e["high"] / max(e["low"], 1e-30)


def area_downsample(img, size: int) -> np.ndarray:
    """Box-filter (C, H, W) down to (C, size, size), exact for non-integer ratios."""
    img = np.asarray(img, dtype=np.float64)

    def weights(n_in):
        edges = np.linspace(0, n_in, size + 1)
        lo, hi = edges[:-1, None], edges[1:, None]
        k = np.arange(n_in)[None]
        overlap = np.clip(np.minimum(hi, k + 1) - np.maximum(lo, k), 0, None)
        return overlap / overlap.sum(axis=1, keepdims=True)

    wy, wx = weights(img.shape[-2]), weights(img.shape[-1])
    return np.einsum("ij,cjk,lk->cil", wy, img, wx)


class TemplateMatcher:
    """Nearest class-mean template on an 8x8 area-averaged copy of each image."""

    def __init__(self, images, labels, size: int = 8):
        self.size = size
        feats = self.features(images)
        labels = np.asarray(labels)
        self.classes = np.unique(labels)
        self.templates = np.stack([feats[labels == k].mean(axis=0) for k in self.classes])

    def features(self, images) -> np.ndarray:
        return np.stack([area_downsample(img, self.size).ravel() for img in images])

    def predict(self, images) -> np.ndarray:
        f = self.features(images)
        d = ((f[:, None, :] - self.templates[None]) ** 2).sum(axis=-1)
        return self.classes[d.argmin(axis=1)]

    def accuracy(self, images, labels) -> float:
        return float(np.mean(self.predict(images) == np.asarray(labels)))


class RunMetrics:
    """Append-only CSV log with a fixed header; rejects non-finite values and backwards steps."""

    def __init__(self, path, columns, append: bool = False):
        self.path = path
        self.columns = ["step"] + [c for c in columns if c != "step"]
        self.last_step = None
        exists = append and os.path.exists(path) and os.path.getsize(path) > 0
        if exists:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
            if rows[0] != self.columns:
                raise ValueError(f"existing metrics header {rows[0]} differs from {self.columns}")
            if len(rows) > 1:
                self.last_step = int(rows[-1][0])
        else:
            folder = os.path.dirname(os.path.abspath(path))
            os.makedirs(folder, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(self.columns)

    def log(self, step: int, **values):
        unknown = set(values) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown metric column(s): {sorted(unknown)}")
        bad = {k: v for k, v in values.items() if v is not None and not math.isfinite(float(v))}
        if bad:
            raise NumericalError(f"non-finite metric at step {step}: {bad}", step=step)
        if self.last_step is not None and step <= self.last_step:
            raise ValueError(f"metrics step {step} does not advance past {self.last_step}")
        row = [step] + ["" if values.get(c) is None else f"{float(values[c]):.8g}" for c in self.columns[1:]]
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(row)
        self.last_step = step

    def read(self) -> list:
        with open(self.path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))


__all__ = [
    "PSNR_CAP",
    "RunMetrics",
    "TemplateMatcher",
    "area_downsample",
    "band_energies",
    "high_low_ratio",
    "iou",
    "psnr",
]
