"""Training objective for the generator: pyramid perceptual, LSGAN + feature matching,
equivariance and keypoint-distance terms, plus the discriminator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .keypoints import KeypointNet, detect_keypoints
from .nn import Conv, Module
from .tensor import ShapeError, Tensor

PYRAMID_SCALES = (1, 2, 4, 8)
MIN_COARSE_EXTENT = 8
FEATURE_MATCHING_WEIGHT = 10.0


@dataclass(frozen=True)
class LossWeights:
    perceptual: float = 10.0
    gan: float = 1.0
    equivariance: float = 10.0
    distance: float = 10.0

    def __post_init__(self):
        if min(self.perceptual, self.gan, self.equivariance, self.distance) < 0:
            raise ValueError("loss weights must be non-negative")


class FeatureExtractor(Module):
    """Fixed random 4-stage convnet used in place of pretrained perceptual features.

    Parameters are drawn once from ``seed`` and never trained; weights from
    elsewhere can be supplied through :meth:`load_state_dict`.
    """

    def __init__(self, seed: int = 1234, channels=(16, 32, 32, 32)):
        super().__init__()
        rng = np.random.default_rng(seed)
        prev = 3
        for i, c in enumerate(channels):
            setattr(self, f"stage{i}", Conv(prev, c, 3, rng))
            prev = c
        self.stages = len(channels)

    def forward(self, image) -> list[Tensor]:
        x = T.constant(image)
        out = []
        for i in range(self.stages):
            if i:
                x = T.avg_pool(x, 2) if x.shape[2] % 2 == 0 and x.shape[2] > 1 else x
            x = T.relu(getattr(self, f"stage{i}")(x))
            out.append(x)
        return out


def _frozen(params):
    return [T.constant(p.data) for p in params]


def perceptual_loss(extractor: FeatureExtractor, generated, target) -> Tensor:
    """Sum over pyramid scales and extractor stages of the mean L1 feature distance."""
    generated, target = T.constant(generated), T.constant(target)
    if generated.shape != target.shape:
        raise ShapeError(f"image shapes differ: {generated.shape} vs {target.shape}")
    h = generated.shape[2]
    if h // PYRAMID_SCALES[-1] < MIN_COARSE_EXTENT or h % PYRAMID_SCALES[-1]:
        raise ShapeError(f"image of extent {h} is too small for a {len(PYRAMID_SCALES)}-level pyramid")
    total = None
    for s in PYRAMID_SCALES:
        g = T.avg_pool(generated, s) if s > 1 else generated
        t = T.avg_pool(target, s) if s > 1 else target
        for fg, ft in zip(extractor(g), extractor(t)):
            term = T.mean(T.abs(fg - ft))
            total = term if total is None else total + term
    return total


class Discriminator(Module):
    """Four stride-2 conv blocks then a 1x1 prediction head; keeps intermediate features."""

    def __init__(self, rng: np.random.Generator, channels=(16, 32, 64, 64)):
        super().__init__()
        prev = 3
        for i, c in enumerate(channels):
            setattr(self, f"block{i}", Conv(prev, c, 4, rng, stride=2, padding=1))
            prev = c
        self.blocks = len(channels)
        self.head = Conv(prev, 1, 1, rng, padding=0, gain=1.0)

    def forward(self, image) -> tuple[Tensor, list[Tensor]]:
        x = T.constant(image)
        feats = []
        for i in range(self.blocks):
            x = T.leaky_relu(getattr(self, f"block{i}")(x), 0.2)
            feats.append(x)
        return self.head(x), feats


@dataclass
class GanTerms:
    disc: Tensor
    gen: Tensor
    feature_matching: Tensor

    @property
    def generator_term(self) -> Tensor:
        return self.gen + T.scale(self.feature_matching, FEATURE_MATCHING_WEIGHT)


def discriminator_loss(disc: Discriminator, real, fake) -> Tensor:
    """mean((D(real) - 1)^2) + mean(D(fake)^2); ``fake`` should already be detached."""
    p_real, _ = disc(real)
    p_fake, _ = disc(fake)
    return T.mean((p_real - 1.0) * (p_real - 1.0)) + T.mean(p_fake * p_fake)


def generator_gan_loss(disc: Discriminator, real, fake) -> tuple[Tensor, Tensor]:
    """(mean((D(fake) - 1)^2), feature matching L1 with the real branch detached)."""
    with T.no_grad():
        _, real_feats = disc(real)
    p_fake, fake_feats = disc(fake)
    gen = T.mean((p_fake - 1.0) * (p_fake - 1.0))
    fm = None
    for rf, ff in zip(real_feats, fake_feats):
        term = T.mean(T.abs(ff - T.constant(rf.data)))
        fm = term if fm is None else fm + term
    return gen, fm


def lsgan_losses(disc: Discriminator, real, fake) -> GanTerms:
    gen, fm = generator_gan_loss(disc, real, fake)
    return GanTerms(discriminator_loss(disc, real, T.detach(T.constant(fake))), gen, fm)


# ---------------------------------------------------------------------------
# keypoint terms


@dataclass
class Affine:
    """x -> A x + b on normalized coordinates, per batch item: A (N, 2, 2), b (N, 2)."""

    A: np.ndarray
    b: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Affine":
        return cls(np.tile(np.eye(2), (n, 1, 1)), np.zeros((n, 2)))

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, max_angle_deg: float = 15.0,
               scale_range=(0.8, 1.2), max_shift: float = 0.1) -> "Affine":
        ang = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg, size=n))
        sc = rng.uniform(*scale_range, size=n)
        c, s = np.cos(ang), np.sin(ang)
        A = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], 1) * sc[:, None, None]
        return cls(A, rng.uniform(-max_shift, max_shift, size=(n, 2)))

    def inverse(self) -> "Affine":
        inv = np.linalg.inv(self.A)
        return Affine(inv, -np.einsum("nij,nj->ni", inv, self.b))

    def apply(self, pts) -> Tensor:
        """Apply to keypoints (N, K, 2)."""
        pts = T.constant(pts)
        At = T.constant(np.transpose(self.A, (0, 2, 1)))
        n, k, _ = pts.shape
        return T.matmul(pts, At) + T.constant(np.broadcast_to(self.b[:, None, :], (n, k, 2)).copy())

    def warp_image(self, image) -> Tensor:
        """Image whose content is moved by this transform: I_T(z) = I(T^-1(z))."""
        image = T.constant(image)
        n, _, h, w = image.shape
        from .nn import identity_grid

        z = np.broadcast_to(identity_grid(h, w).reshape(1, h * w, 2), (n, h * w, 2))
        inv = self.inverse()
        src = np.einsum("nij,npj->npi", inv.A, z) + inv.b[:, None, :]
        return T.grid_sample_bilinear(image, src.reshape(n, h, w, 2))


def equivariance_from_keypoints(kp, kp_transformed, transform: Affine) -> Tensor:
    """sum_k |x_k - T^-1(x_T(k))|_1, averaged over the batch."""
    back = transform.inverse().apply(kp_transformed)
    diff = T.abs(T.constant(kp) - back)
    return T.scale(T.sum(diff), 1.0 / diff.shape[0])


def equivariance_loss(net: KeypointNet, image, depth, rng: np.random.Generator | None = None,
                      transform: Affine | None = None, kp: Tensor | None = None) -> Tensor:
    image = T.constant(image)
    n = image.shape[0]
    if transform is None:
        transform = Affine.random(rng or np.random.default_rng(), n)
    if kp is None:
        kp = detect_keypoints(net, image, depth)
    kp_t = detect_keypoints(net, transform.warp_image(image), transform.warp_image(depth))
    return equivariance_from_keypoints(kp, kp_t, transform)


def keypoint_distance_loss(kp, alpha: float = 0.2, surrogate: bool = False) -> Tensor:
    """sum over ordered pairs i != j of (1 - sign(|x_i - x_j|_1 - alpha)), averaged over the batch.

    The sign form has no gradient; ``surrogate`` switches to the hinge
    max(0, alpha - |x_i - x_j|_1), which does.
    """
    kp = T.constant(kp)
    if kp.ndim == 2:
        kp = T.reshape(kp, (1,) + kp.shape)
    n, k, _ = kp.shape
    if surrogate:
        xi = T.broadcast_to(T.reshape(kp, (n, k, 1, 2)), (n, k, k, 2))
        xj = T.broadcast_to(T.reshape(kp, (n, 1, k, 2)), (n, k, k, 2))
        dist = T.sum(T.abs(xi - xj), axis=-1)
        off = ~np.eye(k, dtype=bool)
        hinge = T.relu(T.sub(alpha, dist))
        return T.scale(T.sum(T.mul(hinge, T.constant(np.broadcast_to(off, (n, k, k)).astype(float)))), 1.0 / n)
    x = kp.data
    dist = np.abs(x[:, :, None, :] - x[:, None, :, :]).sum(-1)
    off = ~np.eye(k, dtype=bool)
    value = (1.0 - np.sign(dist - alpha))[:, off].sum() / n
    return T.constant(value)


@dataclass
class LossParts:
    perceptual: Tensor
    gan: Tensor
    equivariance: Tensor
    distance_src: Tensor
    distance_drv: Tensor


def total_loss(weights: LossWeights, parts: LossParts) -> Tensor:
    """lambda_P L_P + lambda_G L_G + lambda_E L_E(drv) + lambda_D (L_D(src) + L_D(drv))."""
    return (
        T.scale(T.constant(parts.perceptual), weights.perceptual)
        + T.scale(T.constant(parts.gan), weights.gan)
        + T.scale(T.constant(parts.equivariance), weights.equivariance)
        + T.scale(T.constant(parts.distance_src) + T.constant(parts.distance_drv), weights.distance)
    )
