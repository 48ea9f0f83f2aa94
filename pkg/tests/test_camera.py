import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from dagankit import tensor as T
from dagankit.camera import (
    Intrinsics,
    RelativePose,
    axis_angle_to_rotation,
    reproject,
    synthesize_view,
)


def test_zero_rotation_is_identity():
    assert np.array_equal(axis_angle_to_rotation(np.zeros(3)).data[0], np.eye(3))


def test_quarter_turn_about_z():
    R = axis_angle_to_rotation([0.0, 0.0, np.pi / 2]).data[0]
    assert np.allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_rotation_is_orthonormal_and_matches_scipy(v):
    R = axis_angle_to_rotation(np.array(v)).data[0]
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert np.allclose(R, Rotation.from_rotvec(v).as_matrix(), atol=1e-12)


def test_small_angle_series_is_smooth():
    v = np.array([[1e-5, -2e-5, 3e-6]])
    assert np.allclose(axis_angle_to_rotation(v).data[0], Rotation.from_rotvec(v[0]).as_matrix(), atol=1e-15)


def _scalar_case(depth):
    K = Intrinsics.from_values(100.0, 100.0, 0.0, 0.0)
    pose = RelativePose(T.constant(np.eye(3)[None]), T.constant([[0.1, 0.0, 0.0]]))
    rp = reproject(np.full((1, 1, 64, 64), depth), K, pose)
    return rp.pixels.data[0, 40, 50]


def test_reproject_parallax():
    assert np.allclose(_scalar_case(2.0), [55.0, 40.0])
    assert np.allclose(_scalar_case(4.0), [52.5, 40.0])


def test_identity_pose_is_fixed(rng):
    K = Intrinsics.from_values(30.0, 31.0, 15.2, 14.7)
    rp = reproject(rng.uniform(0.5, 50.0, size=(1, 1, 32, 32)), K, RelativePose.identity())
    u, v = np.meshgrid(np.arange(32.0), np.arange(32.0))
    assert np.allclose(rp.pixels.data[0, ..., 0], u)
    assert np.allclose(rp.pixels.data[0, ..., 1], v)
    assert rp.valid.all()


def test_points_behind_camera_are_invalid():
    K = Intrinsics.from_values(10.0, 10.0, 4.0, 4.0)
    pose = RelativePose(T.constant(np.eye(3)[None]), T.constant([[0.0, 0.0, -5.0]]))
    rp = reproject(np.full((1, 8, 8), 2.0), K, pose)
    assert not rp.valid.any()
    assert np.all(np.isfinite(rp.pixels.data))


def test_nonpositive_depth_rejected():
    with pytest.raises(ValueError):
        reproject(np.zeros((1, 4, 4)), Intrinsics.from_values(1, 1, 1, 1), RelativePose.identity())


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics.from_values(-1.0, 1.0, 2.0, 2.0).validate(4, 4)
    with pytest.raises(ValueError):
        Intrinsics.from_values(1.0, 1.0, 9.0, 2.0).validate(4, 4)
    Intrinsics.from_values(1.0, 1.0, 2.0, 2.0).validate(4, 4)


def _grid(h, w, shift=0.0):
    xs = np.linspace(-1, 1, w) + shift * 2.0 / (w - 1)
    gx, gy = np.meshgrid(xs, np.linspace(-1, 1, h))
    return np.stack([gx, gy], -1)[None]


def test_synthesize_identity(rng):
    img = rng.uniform(size=(1, 3, 6, 6))
    out, mask = synthesize_view(T.constant(img), _grid(6, 6))
    assert np.allclose(out.data, img, atol=1e-15)
    assert mask.all()


def test_synthesize_shift_clamps_border(rng):
    img = rng.uniform(size=(1, 1, 4, 5))
    out, _ = synthesize_view(T.constant(img), _grid(4, 5, shift=1.0))
    assert np.allclose(out.data[..., :-1], img[..., 1:])
    assert np.allclose(out.data[..., -1], img[..., -1])


def test_synthesize_constant(rng):
    out, _ = synthesize_view(T.constant(np.full((1, 3, 5, 5), 0.4)), rng.uniform(-2, 2, size=(1, 5, 5, 2)))
    assert np.allclose(out.data, 0.4)


def test_reproject_gradients_reach_depth_and_pose(rng):
    depth = T.parameter(rng.uniform(2, 3, size=(1, 1, 6, 6)))
    aa = T.parameter(np.array([[0.01, -0.02, 0.005]]))
    t = T.parameter(np.array([[0.05, 0.01, 0.0]]))
    rp = reproject(depth, Intrinsics.from_values(5.0, 5.0, 2.5, 2.5), RelativePose(axis_angle_to_rotation(aa), t))
    grads = T.grad(T.sum(rp.pixels), [depth, aa, t])
    assert all(np.abs(g).sum() > 0 for g in grads)
