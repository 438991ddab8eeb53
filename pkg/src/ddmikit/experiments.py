"""The reference training runs behind the end-to-end checks.

Each run lives in its own directory under a root folder and is resumed from
its last checkpoint when incomplete, so an interrupted sweep picks up where it
stopped.
"""

from __future__ import annotations

import logging
import os
from dataclasses import replace

from . import checkpoint as ckpt_io
from .config import Config, loads, preset
from .train import STAGE1_FILE, STAGE2_FILE, train_stage1, train_stage2

log = logging.getLogger(__name__)


def image_config(seed: int = 0) -> Config:
    return preset("image").with_seed(seed)


def baseline_config(seed: int = 0) -> Config:
    """Same budget as :func:`image_config`, but one field scale and a plain read-out."""
    cfg = image_config(seed)
    return replace(cfg, model=replace(cfg.model, hdbf=False, cfc=False))


def occupancy_config(seed: int = 0) -> Config:
    return preset("occupancy").with_seed(seed)


def ldm_config(seed: int = 0) -> Config:
    cfg = image_config(seed)
    return replace(cfg, diffusion=replace(cfg.diffusion, log_every=1))


RUNS = {
    "image": image_config,
    "baseline": baseline_config,
    "occupancy": occupancy_config,
}


def _step_of(path, key):
    if not os.path.exists(path):
        return -1
    return int(ckpt_io.load(path).meta.get(key, 0))


def ensure_stage1(root, name: str) -> str:
    cfg = RUNS[name]()
    out = os.path.join(root, name)
    path = os.path.join(out, STAGE1_FILE)
    done = _step_of(path, "stage1_step")
    if done >= cfg.stage1.steps:
        return path
    log.info("training %s stage 1 (%d/%d steps done)", name, max(done, 0), cfg.stage1.steps)
    return train_stage1(cfg, out, resume=path if done > 0 else None)


def ensure_ldm(root) -> str:
    """Stage 2 on top of the full image model."""
    stage1 = ensure_stage1(root, "image")
    out = os.path.join(root, "ldm")
    path = os.path.join(out, STAGE2_FILE)
    cfg = ldm_config()
    done = _step_of(path, "stage2_step")
    if done >= cfg.diffusion.steps:
        return path
    if done > 0:
        return train_stage2(None, out, resume=path)
    # the denoiser settings come from the stage-1 checkpoint's embedded config
    ck = ckpt_io.load(stage1)
    ck.config = replace(loads(ck.config), diffusion=cfg.diffusion).dumps()
    seeded = os.path.join(out, "stage1_for_ldm.ckpt")
    ckpt_io.save(seeded, ck)
    return train_stage2(seeded, out)


def ensure_all(root):
    paths = {name: ensure_stage1(root, name) for name in ("image", "baseline", "occupancy")}
    paths["ldm"] = ensure_ldm(root)
    return paths


__all__ = [
    "RUNS",
    "baseline_config",
    "ensure_all",
    "ensure_ldm",
    "ensure_stage1",
    "image_config",
    "ldm_config",
    "occupancy_config",
]
