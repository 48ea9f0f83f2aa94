"""Pinhole reprojection between two frames and bilinear view synthesis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

D_MIN = 0.1
D_MAX = 100.0
MIN_Z = 1e-6
_SMALL = 1e-6


@dataclass
class Intrinsics:
    """Per-sample focal lengths and principal point in pixels; each field has shape (N,)."""

    fx: Tensor
    fy: Tensor
    cx: Tensor
    cy: Tensor

    @classmethod
    def from_values(cls, fx, fy, cx, cy, batch: int = 1) -> "Intrinsics":
        def col(v):
            return T.constant(np.broadcast_to(np.asarray(v, dtype=np.float64), (batch,)).copy())

        return cls(col(fx), col(fy), col(cx), col(cy))

    def matrix(self) -> np.ndarray:
        n = self.fx.shape[0]
        k = np.zeros((n, 3, 3))
        k[:, 0, 0] = self.fx.data
        k[:, 1, 1] = self.fy.data
        k[:, 0, 2] = self.cx.data
        k[:, 1, 2] = self.cy.data
        k[:, 2, 2] = 1.0
        return k

    def validate(self, height: int, width: int) -> None:
        if np.any(self.fx.data <= 0) or np.any(self.fy.data <= 0):
            raise ValueError("focal lengths must be positive")
        if np.any((self.cx.data < 0) | (self.cx.data >= width)) or np.any(
            (self.cy.data < 0) | (self.cy.data >= height)
        ):
            raise ValueError("principal point outside the image")


@dataclass
class RelativePose:
    """Rotation (N, 3, 3) and translation (N, 3) taking target-camera points to the source camera."""

    rotation: Tensor
    translation: Tensor

    @classmethod
    def identity(cls, batch: int = 1) -> "RelativePose":
        return cls(T.constant(np.tile(np.eye(3), (batch, 1, 1))), T.constant(np.zeros((batch, 3))))

    @classmethod
    def from_axis_angle(cls, axis_angle, translation) -> "RelativePose":
        return cls(axis_angle_to_rotation(axis_angle), T.constant(translation))


def _sinc_coeff(s: Tensor) -> Tensor:
    """sin(theta)/theta as a function of s = theta**2."""
    v = s.data
    th = np.sqrt(np.maximum(v, 0.0))
    small = v < _SMALL
    th_safe = np.where(small, 1.0, th)
    out = np.where(small, 1 - v / 6 + v * v / 120, np.sin(th_safe) / th_safe)
    d = np.where(
        small,
        -1 / 6 + v / 60,
        (th_safe * np.cos(th_safe) - np.sin(th_safe)) / (2 * th_safe**3),
    )
    return Tensor._result(out, (s,), lambda g: (g * d,), "rodrigues_a")


def _cosc_coeff(s: Tensor) -> Tensor:
    """(1 - cos(theta))/theta**2 as a function of s = theta**2."""
    v = s.data
    th = np.sqrt(np.maximum(v, 0.0))
    small = v < _SMALL
    th_safe = np.where(small, 1.0, th)
    out = np.where(small, 0.5 - v / 24 + v * v / 720, (1 - np.cos(th_safe)) / th_safe**2)
    d = np.where(
        small,
        -1 / 24 + v / 360,
        (th_safe * np.sin(th_safe) - 2 * (1 - np.cos(th_safe))) / (2 * th_safe**4),
    )
    return Tensor._result(out, (s,), lambda g: (g * d,), "rodrigues_b")


def axis_angle_to_rotation(v) -> Tensor:
    """Rodrigues' formula for a batch of axis-angle vectors (N, 3) -> (N, 3, 3).

    R = I + a(theta) [v]x + b(theta) [v]x^2 with the zero-angle limit taken
    by series expansion.
    """
    v = T.constant(v)
    if v.ndim == 1:
        v = T.reshape(v, (1, 3))
    n = v.shape[0]
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    zero = T.constant(np.zeros(n))
    skew = T.reshape(T.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1), (n, 3, 3))
    s = T.sum(T.mul(v, v), axis=1)
    a = T.broadcast_to(T.reshape(_sinc_coeff(s), (n, 1, 1)), (n, 3, 3))
    b = T.broadcast_to(T.reshape(_cosc_coeff(s), (n, 1, 1)), (n, 3, 3))
    eye = T.constant(np.tile(np.eye(3), (n, 1, 1)))
    return eye + a * skew + b * T.matmul(skew, skew)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Column (u) and row (v) index arrays of shape (H, W)."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return u, v


def pixels_to_normalized(coords: Tensor, height: int, width: int) -> Tensor:
    """(N, H, W, 2) pixel coordinates to the [-1, 1] pixel-center convention."""
    sx = 2.0 / (width - 1) if width > 1 else 0.0
    sy = 2.0 / (height - 1) if height > 1 else 0.0
    n, h, w, _ = coords.shape
    s = T.constant(np.broadcast_to(np.array([sx, sy]), coords.shape).copy())
    return T.sub(T.mul(coords, s), 1.0)


@dataclass
class Reprojection:
    pixels: Tensor
    normalized: Tensor
    valid: np.ndarray


def _per_sample(x: Tensor, shape) -> Tensor:
    return T.broadcast_to(T.reshape(x, (x.shape[0], 1, 1)), shape)


def reproject(depth: Tensor, K: Intrinsics, pose: RelativePose) -> Reprojection:
    """Where each target pixel lands in the source frame.

    ``depth`` is (N, 1, H, W) or (N, H, W). Returns pixel coordinates,
    normalized coordinates and a validity mask (points in front of the
    source camera).
    """
    depth = T.constant(depth)
    if depth.ndim == 4:
        depth = T.reshape(depth, (depth.shape[0], depth.shape[2], depth.shape[3]))
    n, h, w = depth.shape
    if np.any(depth.data <= 0):
        raise ValueError("depth must be positive")
    shape = (n, h, w)
    u, v = pixel_grid(h, w)
    u = T.constant(np.broadcast_to(u, shape).copy())
    v = T.constant(np.broadcast_to(v, shape).copy())
    fx, fy = _per_sample(K.fx, shape), _per_sample(K.fy, shape)
    cx, cy = _per_sample(K.cx, shape), _per_sample(K.cy, shape)
    # back-project: X = D K^-1 [u, v, 1]
    X = depth * ((u - cx) / fx)
    Y = depth * ((v - cy) / fy)
    Z = depth
    R, t = pose.rotation, pose.translation
    r = [[_per_sample(R[:, i, j], shape) for j in range(3)] for i in range(3)]
    tt = [_per_sample(t[:, i], shape) for i in range(3)]
    Xs = r[0][0] * X + r[0][1] * Y + r[0][2] * Z + tt[0]
    Ys = r[1][0] * X + r[1][1] * Y + r[1][2] * Z + tt[1]
    Zs = r[2][0] * X + r[2][1] * Y + r[2][2] * Z + tt[2]
    valid = Zs.data > MIN_Z
    Zs = T.where_const(valid, Zs, 1.0)
    qu = fx * (Xs / Zs) + cx
    qv = fy * (Ys / Zs) + cy
    pixels = T.stack([qu, qv], axis=-1)
    return Reprojection(pixels, pixels_to_normalized(pixels, h, w), valid)


def synthesize_view(source: Tensor, coords, valid: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Sample ``source`` (N, C, H, W) at normalized ``coords``.

    Accepts a :class:`Reprojection` directly. Returns the warped image and
    the (N, 1, H, W) validity mask carried alongside it.
    """
    if isinstance(coords, Reprojection):
        valid = coords.valid if valid is None else valid
        coords = coords.normalized
    warped = T.grid_sample_bilinear(source, coords)
    n, _, h, w = warped.shape
    mask = np.ones((n, 1, h, w), dtype=bool) if valid is None else valid.reshape(n, 1, h, w)
    return warped, mask
