"""Stage-1 (autoencoder) and stage-2 (latent denoiser) training loops with checkpointing."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import AdamW, no_grad
from .config import Config
from .config import loads as config_loads
from .data import (
    load_image_folder,
    split_indices,
    synth_images,
    synth_occupancy,
    voxel_queries,
)
from .diffusion import (
    EmaState,
    NumericalError,
    UNetDenoiser,
    denoise_loss,
    ema_update,
    make_schedule,
)
from .metrics import RunMetrics, iou, psnr
from .vae import (
    D2CVAE,
    ImagePyramid,
    ReconBatch,
    d2cvae_loss,
    image_targets,
    lambda_z_at,
    make_grid,
    multiscale_batch,
)

log = logging.getLogger(__name__)

STAGE1_FILE = "stage1.ckpt"
STAGE2_FILE = "stage2.ckpt"


# ---------------------------------------------------------------------------
# data and model construction
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    kind: str
    train: np.ndarray
    holdout: np.ndarray
    labels: np.ndarray | None = None
    pyramid: ImagePyramid | None = None
    voxels: np.ndarray | None = None
    shapes: list | None = None

    def encoder_inputs(self, idx) -> np.ndarray:
        if self.voxels is not None:
            return self.voxels[idx].astype(np.float32)
        return self.pyramid.at(self.pyramid.r)[idx]

    def __len__(self):
        return len(self.train) + len(self.holdout)


def load_dataset(cfg: Config) -> Dataset:
    d, r = cfg.data, cfg.model.resolution
    if d.kind == "synthetic-occupancy":
        shapes, vox = synth_occupancy(d.count, r, d.seed)
        tr, ho = split_indices(d.count, d.holdout, d.seed)
        return Dataset(d.kind, tr, ho, voxels=vox, shapes=shapes)
    if d.kind == "synthetic-image":
        imgs, labels = synth_images(d.count, d.source_resolution, d.seed)
    else:
        imgs, labels = load_image_folder(d.path, r), None
    tr, ho = split_indices(len(imgs), d.holdout, d.seed)
    return Dataset(d.kind, tr, ho, labels=labels, pyramid=ImagePyramid(imgs, r))


def build_vae(cfg: Config) -> D2CVAE:
    m = cfg.model
    occ = cfg.is_occupancy
    return D2CVAE(
        layout="triplane" if occ else "single", in_ch=1 if occ else 3, n_out=1 if occ else 3,
        resolution=m.resolution, enc_widths=m.enc_widths, dec_widths=m.dec_widths, z_ch=m.z_channels,
        emb_ch=m.emb_channels, n_blocks=m.mlp_blocks, hdbf=m.hdbf, cfc=m.cfc,
        scale_injection=m.scale_injection, spectral_norm=m.spectral_norm, likelihood=cfg.likelihood,
        seed=cfg.seed,
    )


def build_denoiser(cfg: Config) -> UNetDenoiser:
    df = cfg.diffusion
    return UNetDenoiser(
        z_ch=cfg.model.z_channels, widths=df.widths, temb=df.time_channels, n_classes=cfg.n_classes,
        triplane=cfg.is_occupancy, plane_mixing=df.plane_mixing, seed=cfg.seed + 1,
    )


def schedule_for(cfg: Config):
    df = cfg.diffusion
    return make_schedule(df.T, df.beta_start, df.beta_end)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

@dataclass
class Stage1State:
    cfg: Config
    model: D2CVAE
    opt: AdamW
    rng: np.random.Generator
    step: int = 0
    seconds: float = 0.0
    cpu_seconds: float = 0.0


class _Stopwatch:
    """Accumulates wall-clock and process CPU time onto a state's running totals."""

    def __init__(self, state):
        self.state = state
        self.wall0, self.cpu0 = time.perf_counter(), time.process_time()
        self.base = (state.seconds, state.cpu_seconds)

    def tick(self):
        st = self.state
        st.seconds = self.base[0] + time.perf_counter() - self.wall0
        st.cpu_seconds = self.base[1] + time.process_time() - self.cpu0


def new_stage1(cfg: Config) -> Stage1State:
    model = build_vae(cfg)
    s1 = cfg.stage1
    opt = AdamW(list(model.named_parameters()), lr=s1.lr, betas=s1.betas, weight_decay=s1.weight_decay)
    return Stage1State(cfg, model, opt, np.random.default_rng(cfg.seed + 101))


def stage1_batch(state: Stage1State, data: Dataset) -> ReconBatch:
    cfg, rng = state.cfg, state.rng
    r = cfg.model.resolution
    idx = rng.choice(data.train, size=min(cfg.stage1.batch, len(data.train)), replace=False)
    n = cfg.stage1.coords_per_image
    if data.voxels is not None:
        coords, targets = voxel_queries(data.voxels[idx], rng, n)
        return ReconBatch(data.encoder_inputs(idx), coords, targets, 1.0)
    rho = None if cfg.stage1.multiscale else r
    return multiscale_batch(None, r, rng, rho=rho, n_coords=n if n < r * r else None,
                            pyramid=data.pyramid, indices=idx)


def stage1_step(state: Stage1State, data: Dataset) -> dict:
    """One optimizer step; returns the losses measured before the update."""
    cfg = state.cfg
    step = state.step + 1
    batch = stage1_batch(state, data)
    lam = lambda_z_at(step, cfg.stage1.steps, cfg.stage1.lambda_z, cfg.stage1.lambda_warmup)
    state.opt.zero_grad()
    total, recon, kl = d2cvae_loss(state.model, batch, lam, rng=state.rng)
    values = {"loss": total.item(), "recon": recon.item(), "kl": kl.item(), "lambda_z": lam, "s": batch.s}
    if not math.isfinite(values["loss"]):
        raise NumericalError(f"non-finite stage-1 loss at step {step}", step=step)
    total.backward()
    state.opt.step()
    state.step = step
    return values


def stage1_checkpoint(state: Stage1State) -> ckpt_io.Checkpoint:
    tensors = dict(state.model.state_dict())
    tensors.update({f"opt1.{k}": v for k, v in state.opt.state_dict().items()})
    meta = {"stage": 1, "stage1_step": state.step, "rng": ckpt_io.rng_state(state.rng),
            "stage1_seconds": state.seconds, "stage1_cpu_seconds": state.cpu_seconds}
    return ckpt_io.Checkpoint(tensors, state.cfg.dumps(), meta)


def restore_stage1(ck: ckpt_io.Checkpoint, with_optimizer: bool = True) -> Stage1State:
    cfg = config_loads(ck.config)
    state = new_stage1(cfg)
    model_keys = {k: v for k, v in ck.tensors.items() if k.split(".", 1)[0] in ("enc", "dec", "mlp")}
    state.model.load_state_dict(model_keys)
    if with_optimizer and "opt1.step" in ck.tensors:
        state.opt.load_state_dict(ck.subset("opt1."))
    if "rng" in ck.meta and ck.meta.get("stage") == 1:
        state.rng = ckpt_io.restore_rng(ck.meta["rng"])
    state.step = int(ck.meta.get("stage1_step", 0))
    state.seconds = float(ck.meta.get("stage1_seconds", 0.0))
    state.cpu_seconds = float(ck.meta.get("stage1_cpu_seconds", 0.0))
    return state


def render_dataset(model: D2CVAE, data: Dataset, idx, chunk: int = 8) -> np.ndarray:
    """Reconstruct the given items from their posterior means at the base resolution.

    Images come back as (N, C, r, r) clipped to [-1, 1]; occupancy as (N, r, r, r) logits.
    """
    r = model.resolution
    outs = []
    was = model.training
    model.eval()
    with no_grad():
        for s in range(0, len(idx), chunk):
            part = np.asarray(idx[s : s + chunk])
            x = data.encoder_inputs(part)
            post = model.encode(x)
            if data.voxels is not None:
                grid = np.broadcast_to(make_grid(r, r, r), (len(part), r**3, 3))
                pred = model.render(post.mean, grid, 1.0).data.reshape(len(part), r, r, r)
            else:
                coords, _ = image_targets(x)
                pred = model.render(post.mean, coords, 1.0).data
                pred = np.clip(pred, -1, 1).transpose(0, 2, 1).reshape(x.shape)
            outs.append(pred)
    model.train(was)
    return np.concatenate(outs)


def evaluate_stage1(model: D2CVAE, data: Dataset, split: str = "holdout") -> dict:
    idx = data.holdout if split == "holdout" else data.train
    pred = render_dataset(model, data, idx)
    if data.voxels is not None:
        scores = [iou(p > 0, v > 0) for p, v in zip(pred, data.voxels[idx])]
        return {"iou": float(np.mean(scores)), "count": len(idx)}
    ref = data.encoder_inputs(idx)
    scores = [psnr(p, t) for p, t in zip(pred, ref)]
    return {"psnr": float(np.mean(scores)), "count": len(idx)}


def train_stage1(cfg: Config, out_dir, resume: str | None = None, max_steps: int | None = None,
                 data: Dataset | None = None, evaluate: bool = True) -> str:
    """Run (or continue) stage-1 training; returns the final checkpoint path.

    ``max_steps`` stops early without changing the λ_z schedule, which always
    follows ``cfg.stage1.steps``.
    """
    os.makedirs(out_dir, exist_ok=True)
    data = data if data is not None else load_dataset(cfg)
    state = restore_stage1(ckpt_io.load(resume)) if resume else new_stage1(cfg)
    cfg = state.cfg
    s1 = cfg.stage1
    stop = s1.steps if max_steps is None else min(s1.steps, state.step + max_steps)
    metric_name = "holdout_iou" if cfg.is_occupancy else "holdout_psnr"
    metrics = RunMetrics(os.path.join(out_dir, "stage1_metrics.csv"),
                         ["loss", "recon", "kl", "lambda_z", "s", metric_name, "seconds", "cpu_seconds"],
                         append=bool(resume))
    path = os.path.join(out_dir, STAGE1_FILE)
    clock = _Stopwatch(state)
    while state.step < stop:
        vals = stage1_step(state, data)
        clock.tick()
        extra = {}
        if evaluate and (state.step % s1.checkpoint_every == 0 or state.step == stop):
            res = evaluate_stage1(state.model, data)
            extra[metric_name] = res.get("iou", res.get("psnr"))
        if state.step % s1.log_every == 0 or extra:
            metrics.log(state.step, **vals, **extra, seconds=state.seconds, cpu_seconds=state.cpu_seconds)
        if extra or state.step % s1.checkpoint_every == 0:
            ckpt_io.save(path, stage1_checkpoint(state))
            log.info("stage1 step %d loss %.5f %s", state.step, vals["loss"], extra)
    ckpt_io.save(path, stage1_checkpoint(state))
    return path


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

def encode_latents(model: D2CVAE, data: Dataset, idx, chunk: int = 16) -> np.ndarray:
    """Posterior means of the frozen encoder for the given items."""
    out = []
    was = model.training
    model.eval()
    with no_grad():
        for s in range(0, len(idx), chunk):
            out.append(model.encode(data.encoder_inputs(np.asarray(idx[s : s + chunk]))).mean.data)
    model.train(was)
    return np.concatenate(out)


@dataclass
class Stage2State:
    cfg: Config
    vae: D2CVAE
    denoiser: UNetDenoiser
    opt: AdamW
    ema: EmaState
    rng: np.random.Generator
    latents: np.ndarray
    labels: np.ndarray | None
    latent_scale: float
    stage1_tensors: dict
    stage1_digest: str
    step: int = 0
    seconds: float = 0.0
    cpu_seconds: float = 0.0


def stage1_tensor_view(vae: D2CVAE) -> dict:
    return {k: np.array(v, copy=True) for k, v in vae.state_dict().items()}


def new_stage2(stage1: ckpt_io.Checkpoint, data: Dataset | None = None, cfg: Config | None = None) -> Stage2State:
    s1 = restore_stage1(stage1, with_optimizer=False)
    cfg = cfg or s1.cfg
    vae = s1.model
    vae.eval()
    data = data if data is not None else load_dataset(cfg)
    latents = encode_latents(vae, data, data.train)
    scale = float(1.0 / latents.std())
    labels = data.labels[data.train] if cfg.n_classes and data.labels is not None else None
    den = build_denoiser(cfg)
    df = cfg.diffusion
    opt = AdamW(list(den.named_parameters()), lr=df.lr, weight_decay=df.weight_decay)
    ema = EmaState.from_params(den.named_parameters(), df.ema_decay)
    tensors = stage1_tensor_view(vae)
    return Stage2State(cfg, vae, den, opt, ema, np.random.default_rng(cfg.seed + 202), latents, labels, scale,
                       tensors, ckpt_io.tensor_digest(tensors))


def stage2_step(state: Stage2State) -> float:
    cfg, rng = state.cfg, state.rng
    df = cfg.diffusion
    step = state.step + 1
    idx = rng.integers(0, len(state.latents), size=df.batch)
    z0 = (state.latents[idx] * state.latent_scale).astype(np.float32)
    cond = state.labels[idx] if state.labels is not None else None
    state.opt.zero_grad()
    loss = denoise_loss(z0, schedule_for(cfg), state.denoiser, rng, cond=cond, p_uncond=df.p_uncond,
                        null_class=state.denoiser.null_class if cond is not None else None)
    val = loss.item()
    if not math.isfinite(val):
        raise NumericalError(f"non-finite denoising loss at step {step}", step=step)
    loss.backward()
    state.opt.step()
    ema_update(state.ema, state.denoiser.named_parameters(), state.ema.effective_decay(df.ema_warmup))
    state.step = step
    return val


def verify_frozen(state: Stage2State):
    now = ckpt_io.tensor_digest(stage1_tensor_view(state.vae))
    if now != state.stage1_digest:
        raise RuntimeError("stage-1 parameters changed during stage-2 training")


def stage2_checkpoint(state: Stage2State) -> ckpt_io.Checkpoint:
    tensors = dict(state.stage1_tensors)
    tensors.update({f"ldm.{k}": v for k, v in state.denoiser.state_dict().items()})
    tensors.update({f"ldm.ema.{k}": v for k, v in state.ema.shadow.items()})
    tensors.update({f"opt2.{k}": v for k, v in state.opt.state_dict().items()})
    sched = schedule_for(state.cfg)
    tensors["ldm.schedule.beta"] = sched.beta
    tensors["ldm.latent_scale"] = np.array([state.latent_scale])
    meta = {
        "stage": 2, "stage2_step": state.step, "rng": ckpt_io.rng_state(state.rng),
        "latent_scale": state.latent_scale, "stage1_digest": state.stage1_digest,
        "ema_updates": state.ema.updates,
        "stage2_seconds": state.seconds, "stage2_cpu_seconds": state.cpu_seconds,
    }
    return ckpt_io.Checkpoint(tensors, state.cfg.dumps(), meta)


def restore_stage2(ck: ckpt_io.Checkpoint, data: Dataset | None = None) -> Stage2State:
    cfg = config_loads(ck.config)
    state = new_stage2(ck, data, cfg)
    state.denoiser.load_state_dict({k: v for k, v in ck.subset("ldm.").items()
                                    if not k.startswith(("ema.", "schedule.", "latent_scale"))})
    state.ema.shadow = {k: np.array(v, copy=True) for k, v in ck.subset("ldm.ema.").items()}
    state.ema.updates = int(ck.meta.get("ema_updates", 0))
    state.opt.load_state_dict(ck.subset("opt2."))
    state.rng = ckpt_io.restore_rng(ck.meta["rng"])
    state.latent_scale = float(ck.meta["latent_scale"])
    state.step = int(ck.meta["stage2_step"])
    state.seconds = float(ck.meta.get("stage2_seconds", 0.0))
    state.cpu_seconds = float(ck.meta.get("stage2_cpu_seconds", 0.0))
    return state


def train_stage2(stage1_path, out_dir, resume: str | None = None, max_steps: int | None = None,
                 data: Dataset | None = None) -> str:
    """Train the latent denoiser on a frozen stage-1 model; returns the checkpoint path."""
    os.makedirs(out_dir, exist_ok=True)
    if resume:
        state = restore_stage2(ckpt_io.load(resume), data)
    else:
        state = new_stage2(ckpt_io.load(stage1_path), data)
    df = state.cfg.diffusion
    stop = df.steps if max_steps is None else min(df.steps, state.step + max_steps)
    metrics = RunMetrics(os.path.join(out_dir, "stage2_metrics.csv"), ["loss", "ema_decay", "seconds", "cpu_seconds"],
                         append=bool(resume))
    path = os.path.join(out_dir, STAGE2_FILE)
    clock = _Stopwatch(state)
    while state.step < stop:
        val = stage2_step(state)
        clock.tick()
        if state.step % df.log_every == 0 or state.step <= 100:
            metrics.log(state.step, loss=val, ema_decay=state.ema.effective_decay(df.ema_warmup),
                        seconds=state.seconds, cpu_seconds=state.cpu_seconds)
        if state.step % df.checkpoint_every == 0:
            verify_frozen(state)
            ckpt_io.save(path, stage2_checkpoint(state))
            log.info("stage2 step %d loss %.4f", state.step, val)
    verify_frozen(state)
    ckpt_io.save(path, stage2_checkpoint(state))
    return path


__all__ = [
    "STAGE1_FILE",
    "STAGE2_FILE",
    "Dataset",
    "Stage1State",
    "Stage2State",
    "build_denoiser",
    "build_vae",
    "encode_latents",
    "evaluate_stage1",
    "load_dataset",
    "new_stage1",
    "new_stage2",
    "render_dataset",
    "restore_stage1",
    "restore_stage2",
    "schedule_for",
    "stage1_checkpoint",
    "stage1_step",
    "stage2_checkpoint",
    "stage2_step",
    "train_stage1",
    "train_stage2",
    "verify_frozen",
]
