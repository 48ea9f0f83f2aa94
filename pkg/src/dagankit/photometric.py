"""SSIM, the photometric consistency error and image-quality metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PSNR_CAP = 99.0


@dataclass(frozen=True)
class PhotometricConfig:
    alpha: float = 0.8
    c1: float = 0.01**2
    c2: float = 0.03**2
    window: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilizers must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and at least 3")


DEFAULT = PhotometricConfig()


def _as_nchw(x) -> Tensor:
    x = T.constant(x)
    if x.ndim == 2:
        return T.reshape(x, (1, 1) + x.shape)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape)
    return x


def _check(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def _masked_mean(x: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return T.mean(x)
    m = np.broadcast_to(mask, x.shape).astype(np.float64)
    total = m.sum()
    if total == 0:
        raise ValueError("every pixel is masked")
    return T.scale(T.sum(T.mul(x, T.constant(m))), 1.0 / total)


def ssim_map(a: Tensor, b: Tensor, cfg: PhotometricConfig = DEFAULT) -> Tensor:
    """Per-pixel, per-channel SSIM with box-filtered local statistics."""
    k = cfg.window
    mu_a = T.box_filter(a, k)
    mu_b = T.box_filter(b, k)
    var_a = T.box_filter(a * a, k) - mu_a * mu_a
    var_b = T.box_filter(b * b, k) - mu_b * mu_b
    cov = T.box_filter(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (mu_a * mu_a + mu_b * mu_b + cfg.c1) * (var_a + var_b + cfg.c2)
    return num / den


def ssim(a, b, cfg: PhotometricConfig = DEFAULT, mask: np.ndarray | None = None) -> Tensor:
    a, b = _as_nchw(a), _as_nchw(b)
    _check(a, b)
    return _masked_mean(ssim_map(a, b, cfg), mask)


def photometric_error(target, recon, cfg: PhotometricConfig = DEFAULT, mask: np.ndarray | None = None) -> Tensor:
    """alpha * (1 - SSIM) + (1 - alpha) * mean |target - recon| over unmasked pixels."""
    a, b = _as_nchw(target), _as_nchw(recon)
    _check(a, b)
    if mask is not None and not np.any(mask):
        raise ValueError("every pixel is masked")
    terms = []
    if cfg.alpha > 0:
        terms.append(T.scale(1.0 - ssim(a, b, cfg, mask), cfg.alpha))
    if cfg.alpha < 1:
        terms.append(T.scale(_masked_mean(T.abs(a - b), mask), 1.0 - cfg.alpha))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def _arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _arrays(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def l1(a, b) -> float:
    a, b = _arrays(a, b)
    return float(np.mean(np.abs(a - b)))
