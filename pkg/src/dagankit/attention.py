"""Cross-modal attention (depth queries against warped appearance keys/values), decoder, full generator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .depth import DepthNet, depth_forward, normalize_depth
from .keypoints import (
    FeatureEncoder,
    KeypointNet,
    SPLAT_SIGMA,
    MotionBundle,
    OcclusionNet,
    detect_keypoints,
    motion_bundle,
    warp_features,
)
from .nn import Conv, Module, ResBlock
from .tensor import ShapeError, Tensor


class AttentionParams(Module):
    """Three independently initialized 1x1 projections: W_q (depth), W_k and W_v (appearance)."""

    def __init__(self, rng: np.random.Generator, depth_ch: int, feat_ch: int, attn_ch: int | None = None):
        super().__init__()
        attn_ch = attn_ch or feat_ch // 2
        self.attn_ch = attn_ch
        self.query = Conv(depth_ch, attn_ch, 1, rng, padding=0, gain=1.0)
        self.key = Conv(feat_ch, attn_ch, 1, rng, padding=0, gain=1.0)
        self.value = Conv(feat_ch, feat_ch, 1, rng, padding=0, gain=1.0)


def _tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))


def cross_attention(p: AttentionParams, F_d: Tensor, F_w: Tensor) -> tuple[Tensor, Tensor]:
    """F_g = softmax(Q K^T / sqrt(C_a)) V with Q from depth features and K, V from warped features.

    Returns F_g (N, C_w, H', W') and the attention map A (N, H'W', H'W').
    """
    if F_d.shape[0] != F_w.shape[0] or F_d.shape[2:] != F_w.shape[2:]:
        raise ShapeError(f"depth features {F_d.shape} and warped features {F_w.shape} are not aligned")
    n, c, h, w = F_w.shape
    q = _tokens(p.query(F_d))
    k = _tokens(p.key(F_w))
    v = _tokens(p.value(F_w))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(q.shape[-1]))
    A = T.softmax(scores, axis=-1)
    out = T.matmul(A, v)  # (N, HW, C)
    F_g = T.reshape(T.transpose(out, (0, 2, 1)), (n, c, h, w))
    return F_g, A


class DepthEncoder(Module):
    """Two conv/ReLU/avg-pool down-blocks on normalized depth (input / 4)."""

    def __init__(self, rng: np.random.Generator, channels=(16, 16)):
        super().__init__()
        c1, c2 = channels
        self.down1 = Conv(1, c1, 3, rng)
        self.down2 = Conv(c1, c2, 3, rng)
        self.out_channels = c2

    def forward(self, depth_norm) -> Tensor:
        x = T.avg_pool(T.relu(self.down1(T.constant(depth_norm))), 2)
        return T.avg_pool(T.relu(self.down2(x)), 2)


def depth_encode(enc: DepthEncoder, depth_norm, like: Tensor | None = None) -> Tensor:
    """F_d from a [0, 1]-normalized depth map; checked against F_w's resolution when given."""
    F_d = enc(depth_norm)
    if like is not None and F_d.shape[2:] != like.shape[2:]:
        raise ShapeError(f"depth features {F_d.shape} do not match warped features {like.shape}")
    return F_d


class Decoder(Module):
    """Residual blocks at feature resolution, two upsampling blocks, sigmoid RGB head.

    With ``skip=True`` the warped features are concatenated to F_g on input.
    """

    def __init__(self, rng: np.random.Generator, feat_ch: int, skip: bool = True, channels=(32, 16),
                 res_blocks: int = 2):
        super().__init__()
        self.skip = skip
        cin = feat_ch * (2 if skip else 1)
        self.res_blocks = res_blocks
        for i in range(res_blocks):
            setattr(self, f"res{i}", ResBlock(cin, rng))
        c1, c2 = channels
        self.up1 = Conv(cin, c1, 3, rng)
        self.up2 = Conv(c1, c2, 3, rng)
        self.head = Conv(c2, 3, 3, rng, gain=1.0)

    def forward(self, F_g: Tensor, F_w: Tensor | None = None) -> Tensor:
        x = F_g
        if self.skip:
            if F_w is None:
                raise ValueError("decoder configured with a skip input needs F_w")
            x = T.concat([F_g, F_w], axis=1)
        for i in range(self.res_blocks):
            x = getattr(self, f"res{i}")(x)
        x = T.relu(self.up1(T.upsample_bilinear(x, 2)))
        x = T.relu(self.up2(T.upsample_bilinear(x, 2)))
        return T.sigmoid(self.head(x))


def decode(decoder: Decoder, F_g: Tensor, F_w: Tensor | None = None) -> Tensor:
    return decoder(F_g, F_w)


class Generator(Module):
    """Every trainable network of the motion-transfer path; the depth net is held outside."""

    def __init__(self, rng: np.random.Generator, num_kp: int = 15, feat_ch: int = 32, depth_ch: int = 16,
                 decoder_skip: bool = True, splat_sigma: float = SPLAT_SIGMA):
        super().__init__()
        self.splat_sigma = splat_sigma
        self.kp = KeypointNet(rng, num_kp)
        self.occlusion = OcclusionNet(rng)
        self.encoder = FeatureEncoder(rng, channels=(16, feat_ch, feat_ch))
        self.depth_encoder = DepthEncoder(rng, channels=(depth_ch, depth_ch))
        self.attention = AttentionParams(rng, depth_ch, feat_ch)
        self.decoder = Decoder(rng, feat_ch, skip=decoder_skip)


@dataclass
class Diagnostics:
    depth_src: Tensor
    depth_drv: Tensor
    kp_src: Tensor
    kp_drv: Tensor
    bundle: MotionBundle
    F_w: Tensor
    F_g: Tensor
    attention: Tensor


def frozen_depth(depth_net: DepthNet, image) -> Tensor:
    with T.no_grad():
        return depth_forward(depth_net, image)


def generate(gen: Generator, depth_net: DepthNet, source, driving,
             depth_src: Tensor | None = None, depth_drv: Tensor | None = None) -> tuple[Tensor, Tensor, Diagnostics]:
    """Source image re-posed by the driving image: returns I_g, the attention map and diagnostics."""
    source, driving = T.constant(source), T.constant(driving)
    D_s = frozen_depth(depth_net, source) if depth_src is None else depth_src
    D_d = frozen_depth(depth_net, driving) if depth_drv is None else depth_drv
    kp_s = detect_keypoints(gen.kp, source, D_s)
    kp_d = detect_keypoints(gen.kp, driving, D_d)
    feats = gen.encoder(source)
    res = feats.shape[2:]
    bundle = motion_bundle(gen.occlusion, source, kp_s, kp_d, res, gen.splat_sigma)
    F_w = warp_features(None, source, bundle, features=feats)
    F_d = depth_encode(gen.depth_encoder, normalize_depth(D_s), like=F_w)
    F_g, A = cross_attention(gen.attention, F_d, F_w)
    I_g = decode(gen.decoder, F_g, F_w if gen.decoder.skip else None)
    return I_g, A, Diagnostics(D_s, D_d, kp_s, kp_d, bundle, F_w, F_g, A)
