import numpy as np
import pytest

from dagankit import tensor as T
from dagankit.camera import Intrinsics, RelativePose, reproject, synthesize_view
from dagankit.photometric import photometric_error
from dagankit.synthetic import (
    PART_HOME,
    DepthSceneParams,
    PuppetParams,
    depth_corpus,
    export_depth_corpus,
    export_puppet_corpus,
    gen_depth_clip,
    gen_depth_pair,
    gen_puppet_sequence,
    part_centroids,
    puppet_identity,
    render_puppet,
)


def test_static_camera_gives_identical_frames():
    pair = gen_depth_pair(5, DepthSceneParams(static=True))
    assert np.array_equal(pair.target, pair.source)


def test_same_seed_is_bitwise_identical():
    a, b = gen_depth_pair(17), gen_depth_pair(17)
    for name in ("target", "source", "depth", "rotation", "translation"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.target, gen_depth_pair(18).target)


def test_degenerate_depths_rejected():
    with pytest.raises(ValueError):
        gen_depth_pair(0, fg_depth=9.0, bg_depth=8.5)


def test_motion_bounds():
    for seed in range(20):
        pair = gen_depth_pair(seed)
        assert np.linalg.norm(pair.translation) <= 0.05 * 3.0 + 1e-12
        assert np.degrees(np.linalg.norm(pair.axis_angle)) <= 2.0 + 1e-9


def test_depth_ranges_and_pixels():
    pair = gen_depth_pair(3)
    fg, bg = pair.depth[pair.fg_mask], pair.depth[~pair.fg_mask]
    assert fg.size and bg.size
    assert fg.max() < bg.min()
    assert np.all((bg >= 8.0) & (bg <= 12.0 * 1.01))
    for img in (pair.target, pair.source):
        assert img.min() >= 0.0 and img.max() <= 1.0


def _round_trip(pair, depth=None):
    K = Intrinsics.from_values(*pair.intrinsics)
    pose = RelativePose(T.constant(pair.rotation[None]), T.constant(pair.translation[None]))
    rep = reproject(T.constant((pair.depth if depth is None else depth)[None, None]), K, pose)
    recon, _ = synthesize_view(T.constant(pair.source[None]), rep.normalized)
    return photometric_error(pair.target[None], recon, mask=pair.covisible()).item()


@pytest.mark.parametrize("seed", [1, 2, 3, 4, 5])
def test_true_geometry_reconstructs_target(seed):
    assert _round_trip(gen_depth_pair(seed)) < 0.01


def test_wrong_depth_does_not_reconstruct():
    pair = gen_depth_pair(2)
    wrong = np.full_like(pair.depth, pair.depth.mean() * 4)
    assert _round_trip(pair, wrong) > 0.01 > _round_trip(pair)


def test_covisible_mask_is_full_for_static_camera():
    pair = gen_depth_pair(4, DepthSceneParams(static=True))
    assert pair.covisible(erode=0).all()


def test_clip_poses_are_constant_and_consistent():
    clip = gen_depth_clip(9, length=4)
    assert clip.frames.shape == (4, 3, 64, 64)
    assert np.all(clip.rel_translation == clip.rel_translation[0])
    assert [len(c.frames) for c in depth_corpus(0, 3, 5)] == [5, 5, 5]


# ---------------------------------------------------------------------------
# puppets


def test_zero_walk_gives_identical_frames():
    seq = gen_puppet_sequence(3, 2, PuppetParams(max_step=0.0))
    assert np.array_equal(seq[0].frame, seq[1].frame)


def test_puppet_determinism_and_range():
    a, b = gen_puppet_sequence(8, 5), gen_puppet_sequence(8, 5)
    assert all(np.array_equal(x.frame, y.frame) and np.array_equal(x.anchors, y.anchors) for x, y in zip(a, b))
    for s in a:
        assert s.frame.shape == (3, 64, 64)
        assert s.frame.min() >= 0 and s.frame.max() <= 1
        assert np.all(np.abs(s.anchors) <= 1)


def test_walk_steps_are_bounded():
    seq = gen_puppet_sequence(12, 30)
    steps = np.linalg.norm(np.diff([s.anchors for s in seq], axis=0), axis=-1)
    assert steps.max() <= 0.05 + 1e-12
    assert steps.max() > 0


def test_short_sequence_rejected():
    with pytest.raises(ValueError):
        gen_puppet_sequence(0, 1)


@pytest.mark.parametrize("part", [0, 1, 2])
def test_anchor_shift_moves_rendered_centroid(part):
    ident = puppet_identity(21)
    anchors = PART_HOME.copy()
    moved = anchors.copy()
    moved[part, 0] += 0.2
    before = part_centroids(render_puppet(ident, anchors))[part]
    after = part_centroids(render_puppet(ident, moved))[part]
    assert after[0] - before[0] == pytest.approx(0.2, abs=0.01)
    assert after[1] - before[1] == pytest.approx(0.0, abs=0.01)


def test_centroids_sit_on_anchors():
    seq = gen_puppet_sequence(5, 3)
    for s in seq:
        assert np.allclose(part_centroids(s.frame), s.anchors, atol=0.03)


def test_missing_part_is_nan():
    img = np.full((3, 16, 16), 0.5)
    assert np.isnan(part_centroids(img)).all()


def test_exports_write_frames_and_manifests(tmp_path):
    path = export_depth_corpus(str(tmp_path / "d"), depth_corpus(1, 2, 3))
    lines = open(path).read().splitlines()
    assert len(lines) == 6
    assert (tmp_path / "d" / "clip_0001" / "frame_002.png").is_file()
    assert "pose_to_next" in lines[0] and "pose_to_next" not in lines[2]

    path = export_puppet_corpus(str(tmp_path / "p"), [gen_puppet_sequence(s, 2) for s in (1, 2)])
    rows = open(path).read().splitlines()
    assert len(rows) == 4
    assert rows[0].startswith("seq_0000/frame_000.png 0,")
    assert len(rows[0].split()) == 4
