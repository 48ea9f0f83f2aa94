"""End-to-end acceptance checks, one test per criterion.

Criteria 4, 7 and 8 share one depth run and one generator run (about 45 minutes
on one CPU core). Each test records a PASS/FAIL line that is repeated in the
terminal summary.
"""
import time

import numpy as np
import pytest

from dagankit import tensor as T
from dagankit.attention import AttentionParams, cross_attention
from dagankit.camera import Intrinsics, RelativePose, reproject, synthesize_view
from dagankit.checkpoint import CheckpointError, decode, load_checkpoint, save_checkpoint
from dagankit.cli import main
from dagankit.config import RunConfig
from dagankit.depth import foreground_spearman
from dagankit.gan import evaluate_reenactment
from dagankit.gradcheck import run_suite
from dagankit.keypoints import FeatureEncoder, MotionBundle, build_motion_field, warp_features
from dagankit.losses import (
    Affine,
    LossParts,
    LossWeights,
    equivariance_from_keypoints,
    keypoint_distance_loss,
    total_loss,
)
from dagankit.nn import identity_grid
from dagankit.photometric import photometric_error
from dagankit.pipeline import load_depth_net, run_depth_stage, run_gan_stage
from dagankit.synthetic import depth_corpus, gen_depth_pair

# the long runs: defaults everywhere except the keypoint-spread term, which
# needs its hinge form to carry a gradient (see README)
RUN = RunConfig(seed=0, distance_surrogate=True)
HELD_OUT_SEED = 999
SMOOTH = 100


def test_gradient_suite(criterion):
    start = time.process_time()
    results = run_suite()
    elapsed = time.process_time() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    criterion(1, {"all < 1e-4": all(r.ok for r in results), "< 2 min": elapsed < 120},
              f"{len(results)} checks, worst {worst.name} {worst.max_rel_error:.2e}, {elapsed:.1f} s")


def test_geometric_identity(criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        h, w = rng.integers(8, 48, size=2)
        image = rng.uniform(size=(1, 3, h, w))
        depth = rng.uniform(0.5, 50.0, size=(1, 1, h, w))
        K = Intrinsics.from_values(rng.uniform(0.5, 2) * w, rng.uniform(0.5, 2) * h,
                                   rng.uniform(0, w - 1), rng.uniform(0, h - 1))
        rep = reproject(T.constant(depth), K, RelativePose.identity())
        recon, _ = synthesize_view(T.constant(image), rep.normalized)
        worst = max(worst, photometric_error(image, recon).item())
    criterion(2, {"Pe < 1e-10": worst < 1e-10}, f"20 random triples, max Pe {worst:.2e}")


def test_ground_truth_round_trip(criterion):
    start = time.process_time()
    errors = []
    for seed in range(50):
        pair = gen_depth_pair(seed)
        K = Intrinsics.from_values(*pair.intrinsics)
        pose = RelativePose(T.constant(pair.rotation[None]), T.constant(pair.translation[None]))
        rep = reproject(T.constant(pair.depth[None, None]), K, pose)
        recon, _ = synthesize_view(T.constant(pair.source[None]), rep.normalized)
        errors.append(photometric_error(pair.target[None], recon, mask=pair.covisible()).item())
    elapsed = time.process_time() - start
    criterion(3, {"every Pe < 0.01": max(errors) < 0.01, "< 1 min": elapsed < 60},
              f"50 pairs, max Pe {max(errors):.4f}, mean {np.mean(errors):.4f}, {elapsed:.1f} s")


def test_loss_unit_values(criterion):
    kp = np.random.default_rng(0).uniform(-0.8, 0.8, size=(1, 15, 2))
    eq = equivariance_from_keypoints(kp, kp + 0.1, Affine.identity(1)).item()

    grid = np.linspace(-0.9, 0.9, 4)
    spread = np.array([(x, y) for x in grid for y in grid])[:15][None]
    coincident = spread.copy()
    coincident[0, 1] = coincident[0, 0]
    at_alpha = spread * 3 + 5
    at_alpha[0, 0], at_alpha[0, 1] = [0.0, 0.0], [0.2, 0.0]
    dist = [keypoint_distance_loss(k, 0.2).item() for k in (spread, coincident, at_alpha)]

    parts = LossParts(*[T.constant(v) for v in (0.3, 0.2, 0.1, 0.0, 2.0)])
    total = total_loss(LossWeights(10.0, 1.0, 10.0, 10.0), parts).item()
    hand = 10 * 0.3 + 1 * 0.2 + 10 * 0.1 + 10 * (0.0 + 2.0)
    criterion(5, {"equivariance 3.0": abs(eq - 3.0) < 1e-12, "distance 0/4/2": dist == [0.0, 4.0, 2.0],
                  "composition": abs(total - hand) < 1e-12},
              f"L_E {eq:.12f}, L_D {dist}, total {total!r} vs {hand!r}")


def test_motion_field_fixpoints(criterion):
    rng = np.random.default_rng(6)
    checks = {"w_m = z": True, "F_w = E_I(I_s)": True, "rows sum to 1": True, "F_g in hull": True}
    worst_row = 0.0
    for _ in range(10):
        drv = rng.uniform(-1, 1, size=(2, 15, 2))
        w_m = build_motion_field(np.zeros((2, 15, 2)), drv, (16, 16)).data
        checks["w_m = z"] &= bool(np.array_equal(w_m, np.broadcast_to(identity_grid(16, 16), w_m.shape)))

        enc = FeatureEncoder(rng)
        src = rng.uniform(size=(1, 3, 32, 32))
        ones = T.constant(np.ones((1, 1, 8, 8)))
        bundle = MotionBundle(T.constant(identity_grid(8, 8)[None]), ones, ones)
        checks["F_w = E_I(I_s)"] &= bool(np.array_equal(warp_features(enc, src, bundle).data, enc(src).data))

        p = AttentionParams(rng, depth_ch=8, feat_ch=16)
        F_w = T.constant(rng.normal(size=(2, 16, 6, 6)) * 2)
        F_g, A = cross_attention(p, T.constant(rng.normal(size=(2, 8, 6, 6)) * 2), F_w)
        worst_row = max(worst_row, float(np.abs(A.data.sum(-1) - 1).max()))
        V = p.value(F_w).data.reshape(2, 16, -1)
        g = F_g.data.reshape(2, 16, -1)
        checks["F_g in hull"] &= bool(np.all(g >= V.min(-1, keepdims=True) - 1e-12)
                                      and np.all(g <= V.max(-1, keepdims=True) + 1e-12))
    checks["rows sum to 1"] = worst_row < 1e-5
    criterion(6, checks, f"10 random draws, worst row-sum error {worst_row:.1e}")


# ---------------------------------------------------------------------------
# long runs


@pytest.fixture(scope="session")
def depth_run(tmp_path_factory):
    path = tmp_path_factory.mktemp("acceptance") / "depth.ckpt"
    start = time.process_time()
    trainer = run_depth_stage(RUN, path, path.with_suffix(".loss.csv"))
    return path, trainer, time.process_time() - start


@pytest.fixture(scope="session")
def gan_run(depth_run):
    depth_path = depth_run[0]
    path = depth_path.with_name("gan.ckpt")
    before = load_depth_net(load_checkpoint(depth_path)).checksum()
    start = time.process_time()
    trainer = run_gan_stage(RUN, depth_path, path, path.with_suffix(".loss.csv"))
    elapsed = time.process_time() - start
    return path, trainer, elapsed, before


@pytest.mark.slow
def test_depth_recovery(depth_run, criterion):
    _, trainer, elapsed = depth_run
    score = foreground_spearman(trainer.depth, depth_corpus(HELD_OUT_SEED, 20))
    criterion(4, {"Spearman > 0.7": score > 0.7, "< 30 min": elapsed < 1800},
              f"{trainer.step_count} steps, mean foreground Spearman {score:.3f} over 20 held-out frames, "
              f"{elapsed / 60:.1f} min")


@pytest.mark.slow
def test_self_reenactment(gan_run, criterion):
    _, trainer, elapsed, _ = gan_run
    curve = np.array([r.perceptual for r in trainer.records])
    early, late = curve[:SMOOTH].mean(), curve[-SMOOTH:].mean()
    report = evaluate_reenactment(trainer.gen, trainer.depth, RUN.gan_config())
    checks = {
        "(a) L_P falls 30%": late <= 0.7 * early,
        "(b) PSNR >= 20": report.psnr >= 20.0,
        "(b) copy + 2 dB": report.psnr >= report.copy_psnr + 2.0,
        "(c) centroids": report.centroid_ratio <= 0.6,
        "< 2 h": elapsed < 7200,
    }
    criterion(7, checks,
              f"{trainer.step_count} steps, L_P {early:.3f} -> {late:.3f}, PSNR {report.psnr:.2f} dB "
              f"(copy {report.copy_psnr:.2f}, source-as-driving {report.identity_psnr:.2f}), "
              f"centroid ratio {report.centroid_ratio:.3f}, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_frozen_depth(gan_run, criterion):
    path, trainer, _, before = gan_run
    in_memory = trainer.depth.checksum()
    saved = load_depth_net(load_checkpoint(path)).checksum()
    criterion(8, {"in memory": in_memory == before, "in checkpoint": saved == before},
              f"depth checksum {before[:12]} before, {in_memory[:12]} after")


def test_determinism_and_persistence(tmp_path, criterion):
    def train(tag):
        depth, gan = tmp_path / f"{tag}.depth.ckpt", tmp_path / f"{tag}.gan.ckpt"
        codes = [main(["train-depth", "--steps", "3", "--out", str(depth)]),
                 main(["train-gan", "--depth", str(depth), "--steps", "2", "--set", "batch=2",
                       "--set", "puppet_sequences=4", "--out", str(gan)])]
        return codes, depth.read_bytes(), gan.read_bytes()

    codes_a, depth_a, gan_a = train("a")
    codes_b, depth_b, gan_b = train("b")

    ckpt = load_checkpoint(tmp_path / "a.gan.ckpt")
    resaved = save_checkpoint(tmp_path / "c.ckpt", tensors=ckpt.tensors, meta=ckpt.meta).read_bytes()

    corrupt = bytearray(gan_a)
    corrupt[len(corrupt) // 2] ^= 0xFF
    rejected = []
    for blob in (bytes(corrupt), gan_a[:-100]):
        try:
            decode(blob)
            rejected.append(False)
        except CheckpointError as exc:
            rejected.append(exc.reason == "crc")
    checks = {"runs succeed": codes_a == codes_b == [0, 0], "depth bitwise": depth_a == depth_b,
              "gan bitwise": gan_a == gan_b, "round trip fixpoint": resaved == gan_a, "CRC rejection": all(rejected)}
    criterion(9, checks, f"checkpoints {len(depth_a)} / {len(gan_a)} bytes, corruptions rejected {rejected}")
