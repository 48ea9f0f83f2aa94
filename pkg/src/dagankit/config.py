"""Run configuration: defaults, ``key = value`` files, command-line overrides, DAGANKIT_SEED."""
from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .depth import DepthConfig
from .gan import GanConfig
from .losses import LossWeights
from .photometric import PhotometricConfig

SEED_ENV = "DAGANKIT_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    resolution: int = 64
    seed: int = 0
    batch: int = 4
    log_every: int = 50
    # depth stage
    depth_steps: int = 2000
    depth_lr: float = 1e-4
    pose_lr: float = 1e-3
    depth_beta1: float = 0.9
    depth_beta2: float = 0.999
    smoothness: float = 1e-3
    normalize_scale: bool = True
    pe_alpha: float = 0.8
    depth_clips: int = 256
    clip_length: int = 6
    # generator stage
    num_kp: int = 15
    splat_sigma: float = 0.1
    lambda_p: float = 10.0
    lambda_g: float = 1.0
    lambda_e: float = 10.0
    lambda_d: float = 10.0
    distance_alpha: float = 0.2
    distance_surrogate: bool = False
    decoder_skip: bool = True
    gan_steps: int = 5000
    gan_lr: float = 2e-4
    gan_beta1: float = 0.5
    gan_beta2: float = 0.999
    puppet_sequences: int = 48
    sequence_length: int = 24

    def __post_init__(self):
        if self.resolution <= 0 or self.resolution % 8:
            raise ConfigError(f"resolution must be a positive multiple of 8, got {self.resolution}")
        for name in ("depth_steps", "gan_steps", "num_kp", "batch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.num_kp < 1:
            raise ConfigError("num_kp must be at least 1")

    def digest(self) -> str:
        text = "\n".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def depth_config(self) -> DepthConfig:
        return DepthConfig(
            steps=self.depth_steps, batch=self.batch, lr=self.depth_lr, pose_lr=self.pose_lr,
            betas=(self.depth_beta1, self.depth_beta2), smoothness=self.smoothness,
            normalize_scale=self.normalize_scale, seed=self.seed,
            clips=self.depth_clips, clip_length=self.clip_length,
            photometric=PhotometricConfig(alpha=self.pe_alpha), log_every=self.log_every,
        )

    def gan_config(self) -> GanConfig:
        return GanConfig(
            steps=self.gan_steps, resolution=self.resolution, batch=self.batch, lr=self.gan_lr, betas=(self.gan_beta1, self.gan_beta2),
            seed=self.seed, num_kp=self.num_kp, splat_sigma=self.splat_sigma,
            weights=LossWeights(self.lambda_p, self.lambda_g, self.lambda_e, self.lambda_d),
            distance_alpha=self.distance_alpha, distance_surrogate=self.distance_surrogate,
            decoder_skip=self.decoder_skip, sequences=self.puppet_sequences,
            sequence_length=self.sequence_length, log_every=self.log_every,
        )


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Defaults < file < DAGANKIT_SEED < explicit overrides (command-line flags)."""
    env = os.environ if env is None else env
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    if env.get(SEED_ENV):
        values["seed"] = _coerce("seed", env[SEED_ENV])
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = _coerce(key, value) if isinstance(value, str) else value
    return replace(RunConfig(), **values)
