"""Run configuration: typed sections loaded from and dumped to TOML."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import tomli_w

DATA_KINDS = ("synthetic-image", "image-folder", "synthetic-occupancy")


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class DataConfig:
    kind: str = "synthetic-image"
    path: str = ""
    count: int = 512
    source_resolution: int = 128
    holdout: float = 0.1
    seed: int = 0


@dataclass
class ModelConfig:
    resolution: int = 64
    z_channels: int = 4
    enc_widths: tuple = (16, 32, 64)
    dec_widths: tuple = (64, 32, 16)
    emb_channels: int = 64
    mlp_blocks: int = 4
    hdbf: bool = True
    cfc: bool = True
    scale_injection: bool = True
    spectral_norm: bool = True


@dataclass
class Stage1Config:
    steps: int = 20000
    batch: int = 2
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    lambda_z: float = 1e-5
    lambda_warmup: float = 0.3
    coords_per_image: int = 4096
    multiscale: bool = True
    checkpoint_every: int = 2000
    log_every: int = 50


@dataclass
class DiffusionConfig:
    steps: int = 20000
    batch: int = 16
    lr: float = 2e-4
    weight_decay: float = 0.0
    T: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    widths: tuple = (32, 64, 64)
    time_channels: int = 64
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    plane_mixing: bool = True
    conditional: bool = True
    p_uncond: float = 0.1
    guidance: float = 3.0
    checkpoint_every: int = 2000
    log_every: int = 50


@dataclass
class Config:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)

    def __post_init__(self):
        validate(self)

    @property
    def is_occupancy(self) -> bool:
        return self.data.kind == "synthetic-occupancy"

    @property
    def likelihood(self) -> str:
        return "bernoulli" if self.is_occupancy else "gaussian-l1"

    @property
    def n_classes(self) -> int:
        return 4 if self.data.kind == "synthetic-image" and self.diffusion.conditional else 0

    def with_seed(self, seed: int) -> Config:
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        return _lists(d)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _lists(d):
    if isinstance(d, dict):
        return {k: _lists(v) for k, v in d.items()}
    if isinstance(d, tuple):
        return list(d)
    return d


SECTIONS = {"data": DataConfig, "model": ModelConfig, "stage1": Stage1Config, "diffusion": DiffusionConfig}


def _coerce(section: str, name: str, default, value):
    where = f"{section}.{name}" if section else name
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{where} must be a non-empty list, got {value!r}")
        return tuple(_coerce(section, name, default[0], v) for v in value)
    raise ConfigError(f"{where}: unsupported type")  # pragma: no cover


def from_dict(raw: dict) -> Config:
    raw = dict(raw)
    kw = {}
    if "seed" in raw:
        kw["seed"] = _coerce("", "seed", 0, raw.pop("seed"))
    for sec, cls in SECTIONS.items():
        body = raw.pop(sec, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{sec}] must be a table")
        defaults = cls()
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(body) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(unknown)}")
        kw[sec] = cls(**{k: _coerce(sec, k, getattr(defaults, k), v) for k, v in body.items()})
    if raw:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(raw))}")
    return Config(**kw)


def loads(text: str) -> Config:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_dict(raw)


def load(path) -> Config:
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def preset(name: str) -> Config:
    """Named starting points: ``image`` (the defaults) and ``occupancy``."""
    if name == "image":
        return Config()
    if name == "occupancy":
        return Config(
            data=DataConfig(kind="synthetic-occupancy", count=256, source_resolution=32),
            model=ModelConfig(resolution=32, spectral_norm=False),
            stage1=Stage1Config(steps=10000, batch=2, multiscale=False, lambda_z=1e-4),
            diffusion=DiffusionConfig(conditional=False),
        )
    raise ConfigError(f"unknown preset {name!r}")


def validate(cfg: Config):
    d, m, s1, df = cfg.data, cfg.model, cfg.stage1, cfg.diffusion
    if d.kind not in DATA_KINDS:
        raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {d.kind!r}")
    if d.kind == "image-folder" and not d.path:
        raise ConfigError("data.path is required for an image folder")
    if d.count < 2:
        raise ConfigError("data.count must be >= 2")
    if not 0 < d.holdout < 1:
        raise ConfigError("data.holdout must lie in (0, 1)")
    down = 2 ** (len(m.enc_widths) - 1)
    if m.resolution < 8 or m.resolution % down:
        raise ConfigError(f"model.resolution must be >= 8 and divisible by {down}")
    if d.kind != "synthetic-occupancy" and d.source_resolution < 2 * m.resolution:
        raise ConfigError("data.source_resolution must be at least twice model.resolution")
    if d.kind == "synthetic-occupancy" and (d.source_resolution != m.resolution or m.resolution < 16):
        raise ConfigError("occupancy voxel resolution must equal model.resolution and be >= 16")
    if len(m.dec_widths) != len(m.enc_widths):
        raise ConfigError("model.dec_widths must have as many levels as model.enc_widths")
    for name in ("z_channels", "emb_channels", "mlp_blocks"):
        if getattr(m, name) < 1:
            raise ConfigError(f"model.{name} must be positive")
    if m.cfc and m.hdbf and m.mlp_blocks < len(m.dec_widths):
        raise ConfigError("model.mlp_blocks must cover every field scale")
    for sec, obj in (("stage1", s1), ("diffusion", df)):
        if obj.steps < 1 or obj.batch < 1 or obj.lr <= 0:
            raise ConfigError(f"{sec}: steps, batch and lr must be positive")
        if obj.checkpoint_every < 1 or obj.log_every < 1:
            raise ConfigError(f"{sec}: checkpoint_every and log_every must be positive")
    if len(s1.betas) != 2 or not all(0 <= b < 1 for b in s1.betas):
        raise ConfigError("stage1.betas must be two values in [0, 1)")
    if s1.lambda_z < 0 or not 0 <= s1.lambda_warmup <= 1:
        raise ConfigError("stage1.lambda_z must be >= 0 and lambda_warmup in [0, 1]")
    if s1.coords_per_image < 1:
        raise ConfigError("stage1.coords_per_image must be positive")
    if df.T < 1 or not 0 < df.beta_start <= df.beta_end < 1:
        raise ConfigError("diffusion schedule needs T >= 1 and 0 < beta_start <= beta_end < 1")
    if not 0 <= df.ema_decay < 1:
        raise ConfigError("diffusion.ema_decay must lie in [0, 1)")
    if not 0 <= df.p_uncond < 1:
        raise ConfigError("diffusion.p_uncond must lie in [0, 1)")
    lat = m.resolution // down
    if lat % (2 ** (len(df.widths) - 1)):
        raise ConfigError("latent extent must be divisible by the denoiser's downsampling")


__all__ = [
    "DATA_KINDS",
    "Config",
    "ConfigError",
    "DataConfig",
    "DiffusionConfig",
    "ModelConfig",
    "Stage1Config",
    "from_dict",
    "load",
    "loads",
    "preset",
    "validate",
]
