"""Procedural scenes with exact geometry, and puppet sequences with known anchors.

Depth scenes are a textured, possibly tilted foreground rectangle in front of
a fronto-parallel background plane, ray-cast through a pinhole camera so
per-pixel depth is exact. Puppets are a textured head blob carrying
coloured ellipses (two eyes, one mouth) whose centres are the motion
anchors.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .images import save_png

# ---------------------------------------------------------------------------
# depth scenes


@dataclass(frozen=True)
class DepthSceneParams:
    height: int = 64
    width: int = 64
    fg_depth: tuple[float, float] = (1.0, 3.0)
    bg_depth: tuple[float, float] = (8.0, 12.0)
    min_tilt_deg: float = 0.0
    max_tilt_deg: float = 20.0
    max_translation_frac: float = 0.05
    max_rotation_deg: float = 2.0
    focal_frac: tuple[float, float] = (0.6, 0.9)
    fg_extent_frac: tuple[float, float] = (0.35, 0.6)
    static: bool = False


@dataclass
class Texture:
    base: np.ndarray
    waves: list[tuple[np.ndarray, float, np.ndarray, float]]
    checker_color: np.ndarray
    checker_period: float
    checker_angle: float

    def __call__(self, s: np.ndarray, r: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.base, s.shape + (3,)).copy()
        for direction, omega, color, phase in self.waves:
            arg = omega * (direction[0] * s + direction[1] * r) + phase
            out += np.sin(arg)[..., None] * color
        ca, sa = np.cos(self.checker_angle), np.sin(self.checker_angle)
        u = (ca * s + sa * r) * np.pi / self.checker_period
        v = (-sa * s + ca * r) * np.pi / self.checker_period
        out += np.tanh(2.0 * np.sin(u) * np.sin(v))[..., None] * self.checker_color
        return np.clip(out, 0.0, 1.0)


def random_texture(rng: np.random.Generator, world_per_pixel: float) -> Texture:
    """Smooth colour texture whose finest period spans several pixels at the given scale."""
    base = rng.uniform(0.3, 0.7, size=3)
    waves = []
    for _ in range(3):
        ang = rng.uniform(0, 2 * np.pi)
        period_px = rng.uniform(7.0, 18.0)
        waves.append(
            (
                np.array([np.cos(ang), np.sin(ang)]),
                2 * np.pi / (period_px * world_per_pixel),
                rng.uniform(-0.12, 0.12, size=3),
                rng.uniform(0, 2 * np.pi),
            )
        )
    return Texture(
        base,
        waves,
        rng.uniform(-0.15, 0.15, size=3),
        rng.uniform(6.0, 12.0) * world_per_pixel,
        rng.uniform(0, np.pi),
    )


@dataclass
class DepthScene:
    """Foreground rectangle on plane n.X = n.center, background plane z = bg_depth (frame-0 camera)."""

    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    fg_center: np.ndarray
    fg_normal: np.ndarray
    fg_axes: np.ndarray
    fg_half: np.ndarray
    bg_depth: float
    fg_texture: Texture
    bg_texture: Texture

    @property
    def intrinsics(self) -> tuple[float, float, float, float]:
        return self.fx, self.fy, self.cx, self.cy

    def render(self, rotation: np.ndarray, translation: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Image (3, H, W), depth (H, W) and foreground mask for camera X_c = R X_w + t."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        rays_c = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        origin = -rotation.T @ translation
        rays_w = rays_c @ rotation  # (R^T d) for each ray, as row vectors
        # background plane z_w = bg_depth
        lam_b = (self.bg_depth - origin[2]) / rays_w[..., 2]
        hit_b = origin + lam_b[..., None] * rays_w
        # foreground plane
        n = self.fg_normal
        lam_f = (n @ self.fg_center - n @ origin) / (rays_w @ n)
        hit_f = origin + lam_f[..., None] * rays_w
        rel = hit_f - self.fg_center
        s = rel @ self.fg_axes[0]
        r = rel @ self.fg_axes[1]
        # signed distance to the rectangle edge in pixels (positive inside)
        inside_dist = np.minimum(self.fg_half[0] - np.abs(s), self.fg_half[1] - np.abs(r))
        px_per_world = self.fx / np.maximum(lam_f, 1e-6)
        coverage = np.clip(inside_dist * px_per_world + 0.5, 0.0, 1.0)
        coverage = np.where(lam_f > 0, coverage, 0.0)
        fg_col = self.fg_texture(s, r)
        bg_col = self.bg_texture(hit_b[..., 0], hit_b[..., 1])
        img = coverage[..., None] * fg_col + (1 - coverage[..., None]) * bg_col
        fg_mask = coverage >= 0.5
        # camera-space z of the visible surface (rays_c has unit z)
        depth = np.where(fg_mask, lam_f, lam_b)
        return np.clip(img, 0.0, 1.0).transpose(2, 0, 1), depth, fg_mask


def random_scene(rng: np.random.Generator, params: DepthSceneParams, fg_depth: float | None = None,
                 bg_depth: float | None = None) -> DepthScene:
    h, w = params.height, params.width
    d_f = rng.uniform(*params.fg_depth) if fg_depth is None else fg_depth
    d_b = rng.uniform(*params.bg_depth) if bg_depth is None else bg_depth
    if d_f >= d_b:
        raise ValueError(f"foreground depth {d_f} must be smaller than background depth {d_b}")
    f = rng.uniform(*params.focal_frac) * w
    fx, fy = f, f * rng.uniform(0.95, 1.05)
    cx = (w - 1) / 2 + rng.uniform(-1.5, 1.5)
    cy = (h - 1) / 2 + rng.uniform(-1.5, 1.5)
    tilt = np.deg2rad(rng.uniform(params.min_tilt_deg, params.max_tilt_deg))
    tilt_axis = rng.uniform(0, 2 * np.pi)
    axis = np.array([np.cos(tilt_axis), np.sin(tilt_axis), 0.0])
    rot = Rotation.from_rotvec(axis * tilt).as_matrix()
    normal = rot @ np.array([0.0, 0.0, 1.0])
    spin = rng.uniform(0, np.pi)
    e1 = rot @ np.array([np.cos(spin), np.sin(spin), 0.0])
    e2 = np.cross(normal, e1)
    half_img_world = 0.5 * w * d_f / f
    half = rng.uniform(*params.fg_extent_frac, size=2) * 2 * half_img_world * 0.5
    offset = rng.uniform(-0.15, 0.15, size=2) * 2 * half_img_world
    center = np.array([offset[0], offset[1], d_f])
    return DepthScene(
        fx, fy, cx, cy, h, w, center, normal, np.stack([e1, e2]), half, d_b,
        random_texture(rng, d_f / f), random_texture(rng, d_b / f),
    )


def random_motion(rng: np.random.Generator, params: DepthSceneParams, fg_depth: float) -> tuple[np.ndarray, np.ndarray]:
    """Axis-angle rotation and translation of one inter-frame step."""
    if params.static:
        return np.zeros(3), np.zeros(3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.4, 1.0) * params.max_translation_frac * fg_depth
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    aa = axis * np.deg2rad(rng.uniform(0.0, params.max_rotation_deg))
    return aa, t


@dataclass
class DepthPair:
    """Target frame I_i and source frame I_{i+1} with the exact geometry between them."""

    target: np.ndarray
    source: np.ndarray
    depth: np.ndarray
    source_depth: np.ndarray
    fg_mask: np.ndarray
    axis_angle: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: tuple[float, float, float, float]

    def covisible(self, erode: int = 1) -> np.ndarray:
        return covisible_mask(self.depth, self.source_depth, self.intrinsics, self.rotation, self.translation, erode)


def covisible_mask(depth, source_depth, intrinsics, rotation, translation, erode: int = 1,
                   rel_tol: float = 0.01) -> np.ndarray:
    """Target pixels that land inside the source view and are not hidden there.

    Computed from exact geometry: the projected depth must match the
    source's own depth at the landing point. ``erode`` shrinks the mask so
    local windows around kept pixels stay clear of occlusion boundaries.
    """
    fx, fy, cx, cy = intrinsics
    h, w = depth.shape
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pts = np.stack([(u - cx) / fx * depth, (v - cy) / fy * depth, depth], axis=-1)
    moved = pts @ np.asarray(rotation).T + np.asarray(translation)
    z = moved[..., 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    qu = fx * moved[..., 0] / zs + cx
    qv = fy * moved[..., 1] / zs + cy
    inside = front & (qu >= 0) & (qu <= w - 1) & (qv >= 0) & (qv <= h - 1)
    seen = ndimage.map_coordinates(source_depth, [qv, qu], order=1, mode="nearest")
    mask = inside & (np.abs(z - seen) <= rel_tol * z)
    if erode:
        mask = ndimage.binary_erosion(mask, iterations=erode, border_value=1)
    return mask


def gen_depth_pair(seed: int, params: DepthSceneParams = DepthSceneParams(), **scene_kw) -> DepthPair:
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, params, **scene_kw)
    aa, t = random_motion(rng, params, scene.fg_center[2])
    R = Rotation.from_rotvec(aa).as_matrix()
    target, depth, fg = scene.render(np.eye(3), np.zeros(3))
    source, source_depth, _ = scene.render(R, t)
    return DepthPair(target, source, depth, source_depth, fg, aa, R, t, scene.intrinsics)


@dataclass
class DepthClip:
    frames: np.ndarray  # (L, 3, H, W)
    depths: np.ndarray  # (L, H, W)
    fg_masks: np.ndarray
    intrinsics: tuple[float, float, float, float]
    rel_axis_angle: np.ndarray  # (L-1, 3) frame k -> k+1
    rel_translation: np.ndarray  # (L-1, 3)

    def pair(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.frames[k], self.frames[k + 1]


def gen_depth_clip(seed: int, length: int = 6, params: DepthSceneParams = DepthSceneParams()) -> DepthClip:
    """One scene seen by a camera moving with a constant per-frame motion."""
    if length < 2:
        raise ValueError("a clip needs at least two frames")
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, params)
    aa, t = random_motion(rng, params, scene.fg_center[2])
    step_R = Rotation.from_rotvec(aa).as_matrix()
    R, tc = np.eye(3), np.zeros(3)
    frames, depths, masks = [], [], []
    for _ in range(length):
        img, depth, fg = scene.render(R, tc)
        frames.append(img)
        depths.append(depth)
        masks.append(fg)
        R, tc = step_R @ R, step_R @ tc + t
    return DepthClip(
        np.stack(frames), np.stack(depths), np.stack(masks), scene.intrinsics,
        np.tile(aa, (length - 1, 1)), np.tile(t, (length - 1, 1)),
    )


def depth_corpus(seed: int, clips: int, length: int = 6, params: DepthSceneParams = DepthSceneParams()) -> list[DepthClip]:
    seeds = np.random.SeedSequence(seed).generate_state(clips)
    return [gen_depth_clip(int(s), length, params) for s in seeds]


# ---------------------------------------------------------------------------
# puppets

PART_NAMES = ("left_eye", "right_eye", "mouth")
PART_COLORS = np.array([[0.10, 0.15, 0.85], [0.10, 0.70, 0.15], [0.85, 0.10, 0.10]])
PART_HOME = np.array([[-0.32, -0.22], [0.32, -0.22], [0.0, 0.38]])
PART_RADII = np.array([[0.17, 0.12], [0.17, 0.12], [0.24, 0.11]])


@dataclass(frozen=True)
class PuppetParams:
    size: int = 64
    max_step: float = 0.05
    max_offset: float = 0.25


@dataclass
class PuppetIdentity:
    head_center: np.ndarray
    head_radii: np.ndarray
    head_texture: Texture
    bg_texture: Texture
    part_scale: np.ndarray


@dataclass
class PuppetSample:
    frame: np.ndarray  # (3, S, S)
    anchors: np.ndarray  # (M, 2) normalized x, y


def puppet_identity(seed: int) -> PuppetIdentity:
    rng = np.random.default_rng(seed)
    head_tex = random_texture(rng, 1.0 / 32)
    head_tex.base = np.array([0.85, 0.65, 0.5]) + rng.uniform(-0.12, 0.12, size=3)
    bg_tex = random_texture(rng, 1.0 / 32)
    bg_tex.base = rng.uniform(0.2, 0.45, size=3)
    for tex, amp in ((head_tex, 0.4), (bg_tex, 0.6)):
        tex.waves = [(d, om, c * amp, ph) for d, om, c, ph in tex.waves]
        tex.checker_color = tex.checker_color * amp
    return PuppetIdentity(
        head_center=rng.uniform(-0.05, 0.05, size=2),
        head_radii=np.array([rng.uniform(0.72, 0.82), rng.uniform(0.82, 0.92)]),
        head_texture=head_tex,
        bg_texture=bg_tex,
        part_scale=rng.uniform(0.9, 1.1, size=len(PART_NAMES)),
    )


def _soft_ellipse(x, y, center, radii, px_per_unit):
    dx = (x - center[0]) / radii[0]
    dy = (y - center[1]) / radii[1]
    rho = np.sqrt(dx * dx + dy * dy)
    edge = (1.0 - rho) * min(radii) * px_per_unit
    return np.clip(edge + 0.5, 0.0, 1.0)


def render_puppet(identity: PuppetIdentity, anchors: np.ndarray, size: int = 64) -> np.ndarray:
    """Deterministic (3, S, S) rendering of one pose given the part anchors."""
    xs = np.linspace(-1.0, 1.0, size)
    x, y = np.meshgrid(xs, xs)
    px_per_unit = (size - 1) / 2
    img = identity.bg_texture(x, y)
    head = _soft_ellipse(x, y, identity.head_center, identity.head_radii, px_per_unit)[..., None]
    img = head * identity.head_texture(x, y) + (1 - head) * img
    for k, anchor in enumerate(anchors):
        m = _soft_ellipse(x, y, anchor, PART_RADII[k] * identity.part_scale[k], px_per_unit)[..., None]
        img = m * PART_COLORS[k] + (1 - m) * img
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1)


def gen_puppet_sequence(seed: int, length: int, params: PuppetParams = PuppetParams(),
                        identity_seed: int | None = None) -> list[PuppetSample]:
    """Random-walk the anchors (each step at most ``max_step``) and render every frame."""
    if length < 2:
        raise ValueError("a puppet sequence needs at least two frames")
    identity = puppet_identity(seed if identity_seed is None else identity_seed)
    rng = np.random.default_rng([seed, 1])
    offsets = rng.uniform(-0.6, 0.6, size=PART_HOME.shape) * params.max_offset
    out = []
    for i in range(length):
        if i:
            step = rng.normal(size=offsets.shape)
            norms = np.linalg.norm(step, axis=1, keepdims=True)
            step = step / np.maximum(norms, 1e-12) * rng.uniform(0, params.max_step, size=(len(step), 1))
            offsets = np.clip(offsets + step, -params.max_offset, params.max_offset)
        anchors = PART_HOME + offsets
        out.append(PuppetSample(render_puppet(identity, anchors, params.size), anchors.copy()))
    return out


def part_centroids(image: np.ndarray, tolerance: float = 0.25) -> np.ndarray:
    """Colour-matched centroid (normalized x, y) of every part; NaN if a part is absent."""
    c, h, w = image.shape
    xs = np.linspace(-1.0, 1.0, w)
    ys = np.linspace(-1.0, 1.0, h)
    gx, gy = np.meshgrid(xs, ys)
    pix = image.transpose(1, 2, 0)
    out = np.full((len(PART_COLORS), 2), np.nan)
    for k, color in enumerate(PART_COLORS):
        dist = np.linalg.norm(pix - color, axis=-1)
        wts = np.clip(1.0 - dist / tolerance, 0.0, None)
        total = wts.sum()
        if total > 1e-6:
            out[k] = [(wts * gx).sum() / total, (wts * gy).sum() / total]
    return out


# ---------------------------------------------------------------------------
# export


def export_depth_corpus(out_dir: str, clips: list[DepthClip]) -> str:
    """PNG frames per clip plus a manifest of intrinsics and relative poses."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for ci, clip in enumerate(clips):
        cdir = os.path.join(out_dir, f"clip_{ci:04d}")
        os.makedirs(cdir, exist_ok=True)
        for fi, frame in enumerate(clip.frames):
            rel = os.path.join(f"clip_{ci:04d}", f"frame_{fi:03d}.png")
            save_png(os.path.join(out_dir, rel), frame)
            np.save(os.path.join(cdir, f"depth_{fi:03d}.npy"), clip.depths[fi])
            row = {"frame": rel, "intrinsics": list(clip.intrinsics)}
            if fi < len(clip.frames) - 1:
                row["pose_to_next"] = {
                    "axis_angle": clip.rel_axis_angle[fi].tolist(),
                    "translation": clip.rel_translation[fi].tolist(),
                }
            lines.append(json.dumps(row))
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def export_puppet_corpus(out_dir: str, sequences: list[list[PuppetSample]]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for si, seq in enumerate(sequences):
        sdir = f"seq_{si:04d}"
        os.makedirs(os.path.join(out_dir, sdir), exist_ok=True)
        for fi, sample in enumerate(seq):
            rel = os.path.join(sdir, f"frame_{fi:03d}.png")
            save_png(os.path.join(out_dir, rel), sample.frame)
            anchors = " ".join(f"{k},{x:.6f},{y:.6f}" for k, (x, y) in enumerate(sample.anchors))
            lines.append(f"{rel} {anchors}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest
