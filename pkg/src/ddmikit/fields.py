"""Basis-field grids and the bilinear look-up that turns them into positional embeddings.

Coordinates live in [-1, 1] with align-corners placement: -1 is node 0 and +1
is node ``extent - 1``. The first coordinate component indexes columns (x),
the second rows (y). Tri-plane layouts hold three orientations per scale in
the order xy, yz, xz; a 3D point (x, y, z) is projected to (x, y), (y, z) and
(x, z), and the three samples are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .autodiff import Tensor, reshape, tsum
from .autodiff.tensor import make_node

ORIENTATIONS = ("xy", "yz", "xz")
LAYOUTS = ("single", "triplane")


class CoordinateDomainError(ValueError):
    """A query coordinate lies outside [-1, 1]."""


def check_coords(coords, dim=None) -> np.ndarray:
    c = np.asarray(coords)
    if c.ndim < 2 or c.shape[-2] < 1:
        raise ValueError(f"coordinate batch needs shape (..., I>=1, m), got {c.shape}")
    if dim is not None and c.shape[-1] != dim:
        raise ValueError(f"expected {dim}-d coordinates, got {c.shape[-1]}-d")
    if not np.all(np.isfinite(c)):
        raise CoordinateDomainError("non-finite coordinate")
    if np.any(np.abs(c) > 1.0):
        raise CoordinateDomainError(f"coordinate outside [-1, 1]: max |c| = {np.abs(c).max():.6g}")
    return c


@dataclass
class BasisFieldPlane:
    grid: Tensor  # (C, H, W)
    scale: int
    orientation: str = "single"

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise ValueError(f"plane grid must be (C, H, W), got {self.grid.shape}")
        if min(self.grid.shape[1:]) < 2:
            raise ValueError("plane extents must be >= 2 for bilinear look-up")
        if self.orientation not in ORIENTATIONS + ("single",):
            raise ValueError(f"unknown orientation {self.orientation!r}")


@dataclass
class BasisFieldSet:
    """Per-scale field tensors, coarse to fine.

    ``scales[i]`` is (B, C, H, W) for the single-plane layout or
    (B, 3, C, H, W) for tri-planes.
    """

    scales: list[Tensor]
    layout: str = "single"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        want = 4 if self.layout == "single" else 5
        prev = 0
        width = None
        for t in self.scales:
            if t.ndim != want:
                raise ValueError(f"{self.layout} field must be {want}-d, got {t.shape}")
            if self.layout == "triplane" and t.shape[1] != 3:
                raise ValueError("tri-plane scale must hold exactly 3 orientations")
            h = t.shape[-2]
            if h <= prev:
                raise ValueError("field extents must strictly increase from coarse to fine")
            if min(t.shape[-2:]) < 2:
                raise ValueError("field extents must be >= 2")
            prev = h
            c = t.shape[-3]
            if width is not None and c != width:
                raise ValueError("all scales must share the channel width")
            width = c

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    @property
    def batch(self) -> int:
        return self.scales[0].shape[0]

    @property
    def channels(self) -> int:
        return self.scales[0].shape[-3]

    @property
    def coord_dim(self) -> int:
        return 2 if self.layout == "single" else 3

    def plane(self, scale: int, orientation: str = "single", index: int = 0) -> BasisFieldPlane:
        t = self.scales[scale - 1].data[index]
        if self.layout == "triplane":
            t = t[ORIENTATIONS.index(orientation)]
        return BasisFieldPlane(Tensor(t), scale, orientation if self.layout == "triplane" else "single")


# ---------------------------------------------------------------------------
# bilinear look-up
# ---------------------------------------------------------------------------

def _corner_weights(coords: np.ndarray, h: int, w: int):
    """Node indices (row-major within a plane) and weights for the 4 neighbours."""
    u = (coords[:, 0].astype(np.float64) + 1.0) * 0.5 * (w - 1)
    v = (coords[:, 1].astype(np.float64) + 1.0) * 0.5 * (h - 1)
    # snap round-off so lattice coordinates hit nodes with weights exactly 1/0
    u = np.where(np.abs(u - np.rint(u)) < 1e-9, np.rint(u), u)
    v = np.where(np.abs(v - np.rint(v)) < 1e-9, np.rint(v), v)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fx = u - x0
    fy = v - y0
    idx = np.stack([y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1], axis=1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, wts


def sample_planes(grids: Tensor, plane_index: np.ndarray, coords: np.ndarray) -> Tensor:
    """Bilinear look-up on a stack of planes.

    grids: (P, C, H, W); plane_index: (Q,) ints into P; coords: (Q, 2).
    Returns (Q, C). Differentiable with respect to ``grids``.
    """
    p, c, h, w = grids.shape
    coords = check_coords(coords, 2)
    plane_index = np.asarray(plane_index, dtype=np.int64)
    idx, wts = _corner_weights(coords, h, w)
    idx = idx + (plane_index * (h * w))[:, None]
    nodes = np.ascontiguousarray(grids.data.transpose(0, 2, 3, 1)).reshape(p * h * w, c)
    wts = wts.astype(grids.dtype)
    out = _kernels.gather4(nodes, idx, wts)

    def bw(g):
        gn = _kernels.scatter4(g, idx, wts, p * h * w)
        return (np.ascontiguousarray(gn.reshape(p, h, w, c).transpose(0, 3, 1, 2)),)

    return make_node(out, (grids,), bw)


def bilinear_sample(plane, coords) -> Tensor:
    """Sample one plane (BasisFieldPlane or (C, H, W) Tensor) at (I, 2) coords -> (I, C)."""
    grid = plane.grid if isinstance(plane, BasisFieldPlane) else plane
    if grid.ndim != 3:
        raise ValueError(f"expected a (C, H, W) grid, got {grid.shape}")
    coords = check_coords(coords, 2)
    stacked = reshape(grid, (1,) + grid.shape)
    return sample_planes(stacked, np.zeros(len(coords), dtype=np.int64), coords)


def project_triplane(coord3) -> tuple:
    """(I, 3) points -> (xy, yz, xz) projections, each (I, 2)."""
    c = check_coords(coord3, 3)
    return c[..., [0, 1]], c[..., [1, 2]], c[..., [0, 2]]


def sample_hdbf(fields: BasisFieldSet, coords) -> list:
    """Positional embeddings for every scale.

    coords: (B, I, m) (or (I, m) when the set has batch 1), m matching the layout.
    Returns a list of (B, I, C) tensors, coarse to fine.
    """
    c = np.asarray(coords)
    if c.ndim == 2:
        c = c[None]
    want = fields.coord_dim
    if c.shape[-1] != want:
        raise ValueError(f"{fields.layout} layout needs {want}-d coordinates, got {c.shape[-1]}-d")
    b = fields.batch
    if c.shape[0] != b:
        raise ValueError(f"coordinate batch {c.shape[0]} != field batch {b}")
    c = check_coords(c)
    n = c.shape[1]
    flat = c.reshape(b * n, want)
    if fields.layout == "single":
        pidx = np.repeat(np.arange(b), n)
        return [reshape(sample_planes(t, pidx, flat), (b, n, t.shape[1])) for t in fields.scales]

    xy, yz, xz = project_triplane(flat)
    proj = np.concatenate([xy, yz, xz], axis=0)  # orientation-major
    bidx = np.repeat(np.arange(b), n)
    pidx = np.concatenate([bidx * 3 + o for o in range(3)])
    out = []
    for t in fields.scales:
        ch, hh, ww = t.shape[2:]
        planes = reshape(t, (b * 3, ch, hh, ww))
        s = sample_planes(planes, pidx, proj)  # (3*b*n, C)
        s = tsum(reshape(s, (3, b * n, ch)), axis=0)
        out.append(reshape(s, (b, n, ch)))
    return out


def zero_scales(fields: BasisFieldSet, keep: int) -> BasisFieldSet:
    """Copy of ``fields`` with every scale but ``keep`` (1-based) replaced by zeros."""
    if not isinstance(keep, (int, np.integer)) or not 1 <= keep <= fields.n_scales:
        raise ValueError(f"keep must be in 1..{fields.n_scales}, got {keep!r}")
    scales = [
        Tensor(t.data.copy()) if i + 1 == keep else Tensor(np.zeros_like(t.data))
        for i, t in enumerate(fields.scales)
    ]
    return BasisFieldSet(scales, fields.layout, dict(fields.meta))
