"""Depth-guided keypoints, dense motion from keypoint offsets, and masked feature warping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .depth import normalize_depth
from .nn import Conv, Module, expand_channels, identity_grid
from .tensor import ShapeError, Tensor

NUM_KEYPOINTS = 15
SPLAT_SIGMA = 0.1
BACKGROUND_WEIGHT = 0.01


def soft_argmax(heatmaps: Tensor) -> Tensor:
    """Expected grid coordinate of each normalized heatmap: (N, K, H, W) -> (N, K, 2)."""
    n, k, h, w = heatmaps.shape
    grid = identity_grid(h, w).reshape(h * w, 2)
    flat = T.reshape(heatmaps, (n * k, h * w))
    return T.reshape(T.matmul(flat, T.constant(grid)), (n, k, 2))


def spatial_softmax(logits: Tensor, temperature: float = 0.1) -> Tensor:
    n, k, h, w = logits.shape
    flat = T.reshape(T.scale(logits, 1.0 / temperature), (n, k, h * w))
    return T.reshape(T.softmax(flat, axis=-1), (n, k, h, w))


class KeypointNet(Module):
    """Hourglass on RGB + normalized depth producing K spatial-softmax heatmaps.

    Runs at half the input resolution.
    """

    def __init__(self, rng: np.random.Generator, num_kp: int = NUM_KEYPOINTS, in_ch: int = 4,
                 channels=(32, 64), temperature: float = 0.1):
        super().__init__()
        self.num_kp = num_kp
        self.temperature = temperature
        c1, c2 = channels
        self.down1 = Conv(in_ch, c1, 3, rng)
        self.down2 = Conv(c1, c2, 3, rng)
        self.up2 = Conv(c2 + c1, c1, 3, rng)
        self.up1 = Conv(c1 + in_ch, c1, 3, rng)
        self.out = Conv(c1, num_kp, 3, rng, gain=1.0)

    def heatmaps(self, rgbd: Tensor) -> Tensor:
        x0 = T.avg_pool(rgbd, 2)
        x1 = T.avg_pool(T.relu(self.down1(x0)), 2)
        x2 = T.avg_pool(T.relu(self.down2(x1)), 2)
        y = T.relu(self.up2(T.concat([T.upsample_bilinear(x2, 2), x1], axis=1)))
        y = T.relu(self.up1(T.concat([T.upsample_bilinear(y, 2), x0], axis=1)))
        return spatial_softmax(self.out(y), self.temperature)

    def forward(self, image, depth) -> Tensor:
        return detect_keypoints(self, image, depth)


def rgbd_input(image, depth) -> Tensor:
    image, depth = T.constant(image), T.constant(depth)
    if depth.ndim == 3:
        depth = T.reshape(depth, (depth.shape[0], 1) + depth.shape[1:])
    if image.shape[2:] != depth.shape[2:]:
        raise ShapeError(f"depth {depth.shape} not aligned with image {image.shape}")
    return T.concat([image, normalize_depth(depth)], axis=1)


def detect_keypoints(net: KeypointNet, image, depth) -> Tensor:
    """(N, K, 2) keypoints in [-1, 1]^2 from image (N, 3, H, W) and depth (N, 1, H, W)."""
    return soft_argmax(net.heatmaps(rgbd_input(image, depth)))


def keypoint_offsets(src: Tensor, drv: Tensor) -> Tensor:
    src, drv = T.constant(src), T.constant(drv)
    if src.shape != drv.shape:
        raise ShapeError(f"keypoint sets differ: {src.shape} vs {drv.shape}")
    return T.sub(src, drv)


def splat_weights(drv: Tensor, height: int, width: int, sigma: float = SPLAT_SIGMA,
                  bg: float = BACKGROUND_WEIGHT) -> Tensor:
    """Normalized Gaussian weights (N, K, H*W) of each keypoint at every grid location."""
    drv = T.constant(drv)
    n, k, _ = drv.shape
    hw = height * width
    z = identity_grid(height, width).reshape(hw, 2)
    shape = (n, k, hw)
    zx = T.constant(np.broadcast_to(z[:, 0], shape).copy())
    zy = T.constant(np.broadcast_to(z[:, 1], shape).copy())
    kx = T.broadcast_to(T.reshape(drv[:, :, 0], (n, k, 1)), shape)
    ky = T.broadcast_to(T.reshape(drv[:, :, 1], (n, k, 1)), shape)
    dx, dy = zx - kx, zy - ky
    w = T.exp(T.scale(dx * dx + dy * dy, -0.5 / sigma**2))
    norm = T.add(T.sum(w, axis=1, keepdims=True), bg)
    return w / T.broadcast_to(norm, shape)


def build_motion_field(offsets: Tensor, drv: Tensor, resolution: tuple[int, int],
                       sigma: float = SPLAT_SIGMA, bg: float = BACKGROUND_WEIGHT) -> Tensor:
    """w_m(z) = z + sum_n weight_n(z) * O_n on an (H, W) grid -> (N, H, W, 2)."""
    offsets = T.constant(offsets)
    h, w = resolution
    n, k, _ = offsets.shape
    wts = splat_weights(drv, h, w, sigma, bg)
    disp = T.matmul(T.transpose(wts, (0, 2, 1)), offsets)  # (N, HW, 2)
    z = T.constant(np.broadcast_to(identity_grid(h, w).reshape(1, h * w, 2), (n, h * w, 2)).copy())
    return T.reshape(z + disp, (n, h, w, 2))


@dataclass
class MotionBundle:
    w_m: Tensor  # (N, H', W', 2)
    M_m: Tensor  # (N, 1, H', W')
    M_o: Tensor  # (N, 1, H', W')

    @property
    def identity(self) -> np.ndarray:
        n, h, w, _ = self.w_m.shape
        return np.broadcast_to(identity_grid(h, w), (n, h, w, 2)).copy()


class OcclusionNet(Module):
    """Small hourglass on the warped downsampled image; two sigmoid heads (M_m, M_o)."""

    def __init__(self, rng: np.random.Generator, in_ch: int = 3, ch: int = 32):
        super().__init__()
        self.conv1 = Conv(in_ch, ch, 3, rng)
        self.conv2 = Conv(ch, ch, 3, rng)
        self.conv3 = Conv(2 * ch + in_ch, ch, 3, rng)
        self.head = Conv(ch, 2, 3, rng, gain=0.5)

    def forward(self, warped: Tensor) -> tuple[Tensor, Tensor]:
        a = T.relu(self.conv1(warped))
        b = T.relu(self.conv2(T.avg_pool(a, 2)))
        y = T.relu(self.conv3(T.concat([a, T.upsample_bilinear(b, 2), warped], axis=1)))
        logits = self.head(y)
        return T.sigmoid(logits[:, 0:1]), T.sigmoid(logits[:, 1:2])


def occlusion_forward(net: OcclusionNet, image, w_m: Tensor, factor: int = 4) -> tuple[Tensor, Tensor]:
    """Warp the image pooled by ``factor`` with w_m and predict (M_m, M_o)."""
    small = T.avg_pool(T.constant(image), factor)
    if small.shape[2:] != w_m.shape[1:3]:
        raise ShapeError(f"motion field {w_m.shape} does not match pooled image {small.shape}")
    return net(T.grid_sample_bilinear(small, w_m))


class FeatureEncoder(Module):
    """Same-resolution conv followed by two conv/ReLU/avg-pool down-blocks (input / 4)."""

    def __init__(self, rng: np.random.Generator, in_ch: int = 3, channels=(16, 32, 32)):
        super().__init__()
        c0, c1, c2 = channels
        self.stem = Conv(in_ch, c0, 3, rng)
        self.down1 = Conv(c0, c1, 3, rng)
        self.down2 = Conv(c1, c2, 3, rng)
        self.out_channels = c2

    def forward(self, x) -> Tensor:
        x = T.relu(self.stem(T.constant(x)))
        x = T.avg_pool(T.relu(self.down1(x)), 2)
        return T.avg_pool(T.relu(self.down2(x)), 2)


def masked_field(bundle: MotionBundle) -> Tensor:
    """M_m gates the displacement: M_m * (w_m - z) + z."""
    n, h, w, _ = bundle.w_m.shape
    z = T.constant(bundle.identity)
    m = T.broadcast_to(T.reshape(bundle.M_m, (n, h, w, 1)), (n, h, w, 2))
    return m * (bundle.w_m - z) + z


def warp_features(encoder: FeatureEncoder | None, source, bundle: MotionBundle,
                  features: Tensor | None = None) -> Tensor:
    """F_w = M_o * sample(E_I(I_s), masked field)."""
    feats = encoder(source) if features is None else features
    warped = T.grid_sample_bilinear(feats, masked_field(bundle))
    return expand_channels(bundle.M_o, feats.shape[1]) * warped


def motion_bundle(occlusion: OcclusionNet, source, kp_src: Tensor, kp_drv: Tensor,
                  resolution: tuple[int, int], sigma: float = SPLAT_SIGMA) -> MotionBundle:
    offsets = keypoint_offsets(kp_src, kp_drv)
    w_m = build_motion_field(offsets, kp_drv, resolution, sigma)
    factor = T.constant(source).shape[2] // resolution[0]
    M_m, M_o = occlusion_forward(occlusion, source, w_m, factor)
    return MotionBundle(w_m, M_m, M_o)


def export_keypoints(kp: np.ndarray) -> str:
    """Plain-text rows ``n,x,y`` for one keypoint set."""
    return "\n".join(f"{i},{x:.6f},{y:.6f}" for i, (x, y) in enumerate(np.asarray(kp))) + "\n"
