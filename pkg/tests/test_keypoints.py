import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dagankit import tensor as T
from dagankit.gradcheck import finite_diff_check
from dagankit.keypoints import (
    BACKGROUND_WEIGHT,
    SPLAT_SIGMA,
    FeatureEncoder,
    KeypointNet,
    MotionBundle,
    OcclusionNet,
    build_motion_field,
    detect_keypoints,
    export_keypoints,
    keypoint_offsets,
    motion_bundle,
    occlusion_forward,
    soft_argmax,
    spatial_softmax,
    warp_features,
)
from dagankit.nn import identity_grid
from dagankit.tensor import ShapeError


def test_peaked_heatmap_gives_its_grid_position():
    logits = np.zeros((1, 1, 16, 16))
    logits[0, 0, 4, 11] = 50.0
    kp = soft_argmax(spatial_softmax(T.constant(logits))).data[0, 0]
    assert np.allclose(kp, identity_grid(16, 16)[4, 11], atol=1e-3)


def test_uniform_heatmap_gives_centre():
    kp = soft_argmax(T.constant(np.full((1, 2, 8, 8), 1 / 64))).data
    assert np.allclose(kp, 0.0, atol=1e-15)


def test_heatmaps_are_distributions(rng):
    net = KeypointNet(rng, num_kp=5)
    from dagankit.keypoints import rgbd_input

    h = net.heatmaps(rgbd_input(rng.uniform(size=(2, 3, 16, 16)), rng.uniform(1, 5, size=(2, 1, 16, 16)))).data
    assert np.all(h >= 0)
    assert np.allclose(h.sum(axis=(2, 3)), 1.0)


def test_mirrored_net_mirrors_x(rng):
    net = KeypointNet(rng, num_kp=4)
    mirrored = KeypointNet(np.random.default_rng(0), num_kp=4)
    mirrored.load_state_dict({k: v[..., ::-1] if v.ndim == 4 else v for k, v in net.state_dict().items()})
    image = rng.uniform(size=(1, 3, 16, 16))
    depth = rng.uniform(1, 5, size=(1, 1, 16, 16))
    kp = detect_keypoints(net, image, depth).data
    kp_m = detect_keypoints(mirrored, image[..., ::-1], depth[..., ::-1]).data
    assert np.allclose(kp_m[..., 0], -kp[..., 0], atol=1e-12)
    assert np.allclose(kp_m[..., 1], kp[..., 1], atol=1e-12)


def test_keypoints_inside_square(rng):
    kp = detect_keypoints(KeypointNet(rng), rng.uniform(size=(2, 3, 32, 32)), rng.uniform(1, 5, size=(2, 1, 32, 32)))
    assert kp.shape == (2, 15, 2)
    assert np.all(np.abs(kp.data) <= 1.0)


def test_misaligned_depth_rejected(rng):
    with pytest.raises(ShapeError):
        detect_keypoints(KeypointNet(rng), np.zeros((1, 3, 16, 16)), np.ones((1, 1, 8, 8)))


def test_offsets():
    assert np.allclose(keypoint_offsets([[[0.2, 0.3]]], [[[0.1, 0.1]]]).data, [[[0.1, 0.2]]])
    same = np.random.default_rng(0).uniform(-1, 1, size=(1, 15, 2))
    assert np.array_equal(keypoint_offsets(same, same).data, np.zeros_like(same))
    with pytest.raises(ShapeError):
        keypoint_offsets(np.zeros((1, 15, 2)), np.zeros((1, 14, 2)))


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_shifting_driving_points_subtracts_shift(dx, dy):
    rng = np.random.default_rng(1)
    src, drv = rng.uniform(-1, 1, size=(2, 1, 15, 2))
    base = keypoint_offsets(src, drv).data
    moved = keypoint_offsets(src, drv + np.array([dx, dy])).data
    assert np.allclose(moved, base - np.array([dx, dy]))


def _splat_oracle(offsets, drv, h, w, sigma=SPLAT_SIGMA, bg=BACKGROUND_WEIGHT):
    z = identity_grid(h, w)
    d2 = ((z[None, :, :, None, :] - drv[:, None, None, :, :]) ** 2).sum(-1)
    wts = np.exp(-d2 / (2 * sigma**2))
    wts = wts / (bg + wts.sum(-1, keepdims=True))
    return z[None] + np.einsum("nhwk,nkc->nhwc", wts, offsets)


def test_motion_field_matches_closed_form(rng):
    drv = rng.uniform(-1, 1, size=(2, 15, 2))
    off = rng.normal(size=(2, 15, 2)) * 0.1
    assert np.allclose(build_motion_field(off, drv, (8, 8)).data, _splat_oracle(off, drv, 8, 8), atol=1e-13)


def test_zero_offsets_give_identity(rng):
    drv = rng.uniform(-1, 1, size=(1, 15, 2))
    w_m = build_motion_field(np.zeros((1, 15, 2)), drv, (16, 16)).data
    assert np.array_equal(w_m[0], identity_grid(16, 16))


def test_displacement_at_isolated_keypoint():
    drv = np.array([[[0.0, 0.0]]])
    O = np.array([[[0.3, -0.2]]])
    w_m = build_motion_field(O, drv, (9, 9)).data
    assert np.allclose(w_m[0, 4, 4], O[0, 0] / (1 + BACKGROUND_WEIGHT))
    # fifteen keypoints, all but one at least 5 sigma from the query point
    others = np.array([[0.8, 0.8], [-0.8, 0.8], [0.8, -0.8], [-0.8, -0.8], [0.6, 0.0], [-0.6, 0.0], [0.0, 0.6],
                       [0.0, -0.6], [0.9, 0.3], [-0.9, 0.3], [0.3, 0.9], [0.3, -0.9], [-0.3, 0.9], [-0.3, -0.9]])
    drv15 = np.concatenate([drv[0], others])[None]
    off15 = np.concatenate([O[0], np.ones((14, 2))])[None]
    w_m = build_motion_field(off15, drv15, (9, 9)).data
    assert np.allclose(w_m[0, 4, 4], 0.990 * O[0, 0], atol=1e-3)


def test_far_field_displacement_is_tiny():
    O = np.array([[[1.0, 0.0]]])
    drv = np.array([[[-1.0, 0.0]]])
    disp = build_motion_field(O, drv, (1, 41)).data[0, 0, :, 0] - identity_grid(1, 41)[0, :, 0]
    dist = identity_grid(1, 41)[0, :, 0] + 1.0
    w5 = np.exp(-12.5)
    # exactly 5 sigma away the background share follows the closed form
    assert disp[np.isclose(dist, 5 * SPLAT_SIGMA)][0] == pytest.approx(w5 / (BACKGROUND_WEIGHT + w5))
    assert np.all(disp[dist >= 6 * SPLAT_SIGMA - 1e-12] < 2e-5)


def test_field_is_translation_consistent(rng):
    drv = rng.uniform(-0.4, 0.4, size=(1, 15, 2))
    off = rng.normal(size=(1, 15, 2)) * 0.1
    step = np.array([0.25, 0.0])  # one grid cell of a 9 x 9 grid
    a = build_motion_field(off, drv, (9, 9)).data
    b = build_motion_field(off, drv + step, (9, 9)).data
    assert np.allclose(b[:, :, 1:], a[:, :, :-1] + step, atol=1e-8)


def test_occlusion_masks_range_and_zero_net(rng):
    net = OcclusionNet(rng, ch=8)
    w_m = T.constant(np.broadcast_to(identity_grid(8, 8), (2, 8, 8, 2)).copy())
    M_m, M_o = occlusion_forward(net, rng.uniform(size=(2, 3, 32, 32)), w_m)
    for m in (M_m, M_o):
        assert m.shape == (2, 1, 8, 8)
        assert np.all((m.data > 0) & (m.data < 1))
    net.load_state_dict({k: np.zeros_like(v) for k, v in net.state_dict().items()})
    M_m, M_o = occlusion_forward(net, rng.uniform(size=(2, 3, 32, 32)), w_m)
    assert np.all(M_m.data == 0.5) and np.all(M_o.data == 0.5)


def test_occlusion_gradient_reaches_field(rng):
    net = OcclusionNet(rng, ch=4)
    image = rng.uniform(size=(1, 3, 32, 32))
    wts = rng.normal(size=(2, 1, 1, 8, 8))

    def f(field):
        M_m, M_o = occlusion_forward(net, image, field)
        return T.sum(M_m * T.constant(wts[0])) + T.sum(M_o * T.constant(wts[1]))

    rep = finite_diff_check(f, [identity_grid(8, 8)[None] + rng.normal(size=(1, 8, 8, 2)) * 0.05])
    assert rep.max_rel_error < 1e-4
    assert np.abs(rep.analytic[0]).sum() > 0


def _bundle(w_m, m_m, m_o):
    n, h, w, _ = w_m.shape
    return MotionBundle(T.constant(w_m), T.constant(np.full((n, 1, h, w), m_m)), T.constant(np.full((n, 1, h, w), m_o)))


def test_identity_bundle_returns_encoder_features(rng):
    enc = FeatureEncoder(rng)
    src = rng.uniform(size=(1, 3, 32, 32))
    ident = identity_grid(8, 8)[None]
    F_w = warp_features(enc, src, _bundle(ident, 1.0, 1.0))
    assert np.array_equal(F_w.data, enc(src).data)


def test_full_occlusion_zeroes_features(rng):
    enc = FeatureEncoder(rng)
    F_w = warp_features(enc, rng.uniform(size=(1, 3, 32, 32)), _bundle(rng.uniform(-1, 1, size=(1, 8, 8, 2)), 1.0, 0.0))
    assert np.all(F_w.data == 0.0)


def test_zero_confidence_uses_identity_field(rng):
    enc = FeatureEncoder(rng)
    src = rng.uniform(size=(1, 3, 32, 32))
    F_w = warp_features(enc, src, _bundle(rng.uniform(-1, 1, size=(1, 8, 8, 2)), 0.0, 1.0))
    assert np.array_equal(F_w.data, enc(src).data)


def test_self_reenactment_fixpoint(rng):
    enc, occ, kpn = FeatureEncoder(rng), OcclusionNet(rng, ch=8), KeypointNet(rng)
    img = rng.uniform(size=(1, 3, 32, 32))
    kp = detect_keypoints(kpn, img, np.full((1, 1, 32, 32), 2.0))
    bundle = motion_bundle(occ, img, kp, kp, (8, 8))
    assert np.array_equal(bundle.w_m.data, bundle.identity)
    F_w = warp_features(enc, img, bundle)
    assert np.allclose(F_w.data, bundle.M_o.data * enc(img).data, atol=1e-15)


def test_gradient_from_features_reaches_keypoint_net(rng):
    kpn, occ, enc = KeypointNet(rng, num_kp=4), OcclusionNet(rng, ch=4), FeatureEncoder(rng)
    src, drv = rng.uniform(size=(2, 1, 3, 32, 32))
    depth = np.full((1, 1, 32, 32), 2.0)
    bundle = motion_bundle(occ, src, detect_keypoints(kpn, src, depth), detect_keypoints(kpn, drv, depth), (8, 8))
    loss = T.sum(warp_features(enc, src, bundle))
    g = T.grad(loss, kpn.parameters())
    assert sum(np.abs(x).sum() for x in g) > 0


def test_export_keypoints():
    text = export_keypoints(np.array([[0.5, -0.25], [0.0, 1.0]]))
    assert text.splitlines() == ["0,0.500000,-0.250000", "1,0.000000,1.000000"]
