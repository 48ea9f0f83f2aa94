"""Self-supervised depth: depth and pose networks fitted by photometric consistency."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .camera import D_MAX, D_MIN, Intrinsics, RelativePose, axis_angle_to_rotation, reproject, synthesize_view
from .nn import Adam, Conv, Module, named_grads
from .photometric import DEFAULT as PE_DEFAULT, PhotometricConfig, photometric_error
from .tensor import Tensor

log = logging.getLogger(__name__)

DISP_SCALE = 1.0 / D_MIN - 1.0 / D_MAX
DISP_OFFSET = 1.0 / D_MAX
INIT_DEPTH = 3.0
# mean-normalized training depth sits at this scale, which keeps the 0.01-scaled
# translation head in an O(1) raw range
TRAIN_SCALE = 0.3


class NumericalFailure(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


def disparity_to_depth(s):
    """Map a sigmoid output in (0, 1) to depth in [D_MIN, D_MAX]."""
    return T.div(1.0, T.add(T.scale(s, DISP_SCALE), DISP_OFFSET))


def normalize_depth(depth) -> Tensor:
    """Depth rescaled to [0, 1] for use as a network input."""
    return T.scale(T.sub(depth, D_MIN), 1.0 / (D_MAX - D_MIN))


class DepthNet(Module):
    """Encoder of stride-2 convs, decoder of upsample + skip + conv, sigmoid head."""

    def __init__(self, rng: np.random.Generator, channels=(8, 16, 32, 32), in_ch: int = 3):
        super().__init__()
        self.levels = len(channels)
        prev = in_ch
        for i, c in enumerate(channels):
            setattr(self, f"enc{i}", Conv(prev, c, 3, rng, stride=2, padding=1))
            prev = c
        skips = [in_ch] + list(channels[:-1])
        for i in reversed(range(self.levels)):
            out = channels[i - 1] if i > 0 else channels[0]
            setattr(self, f"dec{i}", Conv(prev + skips[i], out, 3, rng))
            prev = out
        # start near a plausible scene depth rather than at sigmoid(0) ~ 0.2
        s0 = (1.0 / INIT_DEPTH - DISP_OFFSET) / DISP_SCALE
        self.head = Conv(prev, 1, 3, rng, gain=0.3, bias=float(np.log(s0 / (1.0 - s0))))

    def disparity(self, image: Tensor) -> Tensor:
        feats = [image]
        x = image
        for i in range(self.levels):
            x = T.leaky_relu(getattr(self, f"enc{i}")(x), 0.1)
            feats.append(x)
        for i in reversed(range(self.levels)):
            x = T.upsample_bilinear(x, 2)
            x = T.leaky_relu(getattr(self, f"dec{i}")(T.concat([x, feats[i]], axis=1)), 0.1)
        return T.sigmoid(self.head(x))

    def forward(self, image: Tensor) -> Tensor:
        return depth_forward(self, image)


def depth_forward(net: DepthNet, image) -> Tensor:
    """(N, 3, H, W) image -> (N, 1, H, W) depth in [0.1, 100]."""
    return disparity_to_depth(net.disparity(T.constant(image)))


class PoseNet(Module):
    """Consumes two frames stacked on channels; emits axis-angle, translation and raw intrinsics."""

    def __init__(self, rng: np.random.Generator, channels=(16, 32, 32, 32)):
        super().__init__()
        prev = 6
        self.levels = len(channels)
        for i, c in enumerate(channels):
            setattr(self, f"conv{i}", Conv(prev, c, 3, rng, stride=2, padding=1))
            prev = c
        self.head = Conv(prev, 10, 1, rng, padding=0, gain=0.01)

    def raw(self, target: Tensor, source: Tensor) -> Tensor:
        x = T.concat([T.constant(target), T.constant(source)], axis=1)
        for i in range(self.levels):
            x = T.leaky_relu(getattr(self, f"conv{i}")(x), 0.1)
        x = self.head(x)
        return T.mean(x, axis=(2, 3))  # (N, 10)

    def forward(self, target, source):
        return pose_forward(self, target, source)


def decode_pose(raw: Tensor, height: int, width: int) -> tuple[RelativePose, Intrinsics]:
    """Turn the 10 raw outputs into a pose (small-motion scaled) and valid intrinsics."""
    rot = axis_angle_to_rotation(T.scale(raw[:, 0:3], 0.01))
    trans = T.scale(raw[:, 3:6], 0.01)
    fx = T.scale(T.softplus(raw[:, 6]), width)
    fy = T.scale(T.softplus(raw[:, 7]), width)
    cx = T.scale(T.sigmoid(raw[:, 8]), width)
    cy = T.scale(T.sigmoid(raw[:, 9]), height)
    return RelativePose(rot, trans), Intrinsics(fx, fy, cx, cy)


def pose_forward(net: PoseNet, target, source) -> tuple[RelativePose, Intrinsics]:
    target = T.constant(target)
    _, _, h, w = target.shape
    return decode_pose(net.raw(target, source), h, w)


def _per_image_mean(x: Tensor) -> Tensor:
    return T.broadcast_to(T.mean(x, axis=(1, 2, 3), keepdims=True), x.shape)


def scale_normalize(depth: Tensor, scale: float = TRAIN_SCALE) -> Tensor:
    """Rescale each depth map so its mean inverse depth is 1 / scale.

    Removes the free global scale from the depth side of the depth/translation
    ambiguity so the network cannot drift into the range bounds.
    """
    inv_mean = _per_image_mean(T.div(1.0, depth))
    return T.scale(depth * inv_mean, scale)


def edge_aware_smoothness(disp: Tensor, image: Tensor) -> Tensor:
    """Mean |grad disparity| weighted by exp(-mean_channel |grad image|)."""
    dx = T.abs(disp[:, :, :, 1:] - disp[:, :, :, :-1])
    dy = T.abs(disp[:, :, 1:, :] - disp[:, :, :-1, :])
    img = image.data
    wx = np.exp(-np.mean(np.abs(img[:, :, :, 1:] - img[:, :, :, :-1]), axis=1, keepdims=True))
    wy = np.exp(-np.mean(np.abs(img[:, :, 1:, :] - img[:, :, :-1, :]), axis=1, keepdims=True))
    return T.mean(dx * wx) + T.mean(dy * wy)


def reconstruction_loss(depth: Tensor, pose: RelativePose, K: Intrinsics, target, source,
                        cfg: PhotometricConfig = PE_DEFAULT, mask: np.ndarray | None = None) -> Tensor:
    """Pe between the target frame and the source frame warped through the given geometry."""
    rp = reproject(depth, K, pose)
    valid = rp.valid if mask is None else rp.valid & mask.reshape(rp.valid.shape)
    warped, m = synthesize_view(T.constant(source), rp.normalized, valid)
    return photometric_error(target, warped, cfg, mask=m)


@dataclass
class DepthConfig:
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-4
    pose_lr: float | None = 1e-3  # None: same as lr
    betas: tuple[float, float] = (0.9, 0.999)
    smoothness: float = 1e-3
    normalize_scale: bool = True
    seed: int = 0
    clips: int = 256
    clip_length: int = 6
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig)
    log_every: int = 50


class DepthTrainer:
    """Holds both networks and their optimizers; one call to :meth:`step` is one update."""

    def __init__(self, cfg: DepthConfig, depth_net: DepthNet | None = None, pose_net: PoseNet | None = None):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 11])
        self.depth = depth_net or DepthNet(rng)
        self.pose = pose_net or PoseNet(rng)
        self.opt_depth = Adam(self.depth, cfg.lr, cfg.betas)
        self.opt_pose = Adam(self.pose, cfg.lr if cfg.pose_lr is None else cfg.pose_lr, cfg.betas)
        self.step_count = 0
        self.curve: list[tuple[int, float]] = []

    def loss(self, target: np.ndarray, source: np.ndarray) -> Tensor:
        tgt = T.constant(target)
        disp = self.depth.disparity(tgt)
        depth = disparity_to_depth(disp)
        if self.cfg.normalize_scale:
            depth = scale_normalize(depth)
            disp = disp / _per_image_mean(disp)
        pose, K = pose_forward(self.pose, tgt, source)
        loss = reconstruction_loss(depth, pose, K, tgt, source, self.cfg.photometric)
        if self.cfg.smoothness > 0:
            loss = loss + T.scale(edge_aware_smoothness(disp, tgt), self.cfg.smoothness)
        return loss

    def step(self, target: np.ndarray, source: np.ndarray) -> float:
        try:
            loss = self.loss(target, source)
        except FloatingPointError as exc:
            raise NumericalFailure(self.step_count + 1) from exc
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalFailure(self.step_count + 1)
        gd, gp = named_grads(loss, self.depth, self.pose)
        self.opt_depth.step(gd)
        self.opt_pose.step(gp)
        self.step_count += 1
        self.curve.append((self.step_count, value))
        return value


def depth_train_step(trainer: DepthTrainer, target: np.ndarray, source: np.ndarray) -> float:
    return trainer.step(target, source)


def batches(clips, batch: int, rng: np.random.Generator):
    """Endless stream of (target, source) stacks of consecutive frames from shuffled clips."""
    index = [(c, k) for c in range(len(clips)) for k in range(len(clips[c].frames) - 1)]
    while True:
        order = rng.permutation(len(index))
        for start in range(0, len(order) - batch + 1, batch):
            picks = [index[i] for i in order[start : start + batch]]
            tgt = np.stack([clips[c].frames[k] for c, k in picks])
            src = np.stack([clips[c].frames[k + 1] for c, k in picks])
            yield tgt, src


def train_depth(clips, cfg: DepthConfig, trainer: DepthTrainer | None = None, progress=None) -> DepthTrainer:
    """Run ``cfg.steps`` updates over shuffled consecutive pairs; returns the trainer (nets + curve)."""
    if not clips:
        raise ValueError("empty depth dataset")
    trainer = trainer or DepthTrainer(cfg)
    stream = batches(clips, cfg.batch, np.random.default_rng([cfg.seed, 12]))
    for _ in range(cfg.steps):
        tgt, src = next(stream)
        value = trainer.step(tgt, src)
        if cfg.log_every and trainer.step_count % cfg.log_every == 0:
            log.info("depth step %d loss %.5f", trainer.step_count, value)
        if progress is not None:
            progress(trainer.step_count, value)
    return trainer


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(np.ravel(a), np.ravel(b)).statistic)


def predict_depth(net: DepthNet, images: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return depth_forward(net, images).data[:, 0]


def foreground_spearman(net: DepthNet, clips) -> float:
    """Mean over clips of the rank correlation between predicted and true depth on the first frame's foreground."""
    images = np.stack([c.frames[0] for c in clips])
    pred = predict_depth(net, images)
    scores = [spearman(p[m > 0.5], c.depths[0][m > 0.5]) for p, c, m in zip(pred, clips, (c.fg_masks[0] for c in clips))]
    return float(np.mean(scores))
