"""Glue between checkpoints, networks and image folders used by the command line."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import Generator, generate
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .depth import DepthNet, DepthTrainer, PoseNet, predict_depth, train_depth
from .gan import GanTrainer, puppet_dataset, train_gan
from .images import colorize, draw_points, load_png, save_png
from .losses import Discriminator
from .photometric import l1, psnr, ssim
from .synthetic import DepthSceneParams, depth_corpus

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


# ---------------------------------------------------------------------------
# training stages


def run_depth_stage(cfg: RunConfig, ckpt_path, log_path=None) -> DepthTrainer:
    params = DepthSceneParams(height=cfg.resolution, width=cfg.resolution)
    dcfg = cfg.depth_config()
    clips = depth_corpus(cfg.seed, dcfg.clips, dcfg.clip_length, params)
    trainer = DepthTrainer(dcfg)
    log = open(log_path, "w") if log_path else None
    try:
        def progress(step, value):
            if log:
                log.write(f"{step},{value:.8f}\n")

        if dcfg.steps > 0:
            train_depth(clips, dcfg, trainer, progress)
    finally:
        if log:
            log.close()
    save_checkpoint(ckpt_path, {"depth": trainer.depth, "pose": trainer.pose},
                    meta={"stage": "depth", "seed": cfg.seed, "config": cfg.digest(), "step": trainer.step_count})
    return trainer


def load_depth_net(ckpt: Checkpoint) -> DepthNet:
    return ckpt.restore(DepthNet(np.random.default_rng(0)), "depth")


def run_gan_stage(cfg: RunConfig, depth_ckpt_path, ckpt_path, log_path=None) -> GanTrainer:
    if depth_ckpt_path is None or not Path(depth_ckpt_path).is_file():
        raise FileNotFoundError(f"depth checkpoint {depth_ckpt_path!r} not found; train-depth must run first")
    depth_net = load_depth_net(load_checkpoint(depth_ckpt_path))
    before = depth_net.checksum()
    gcfg = cfg.gan_config()
    trainer = GanTrainer(gcfg, depth_net)
    log = open(log_path, "w") if log_path else None
    try:
        def progress(rec):
            if log:
                log.write(rec.line() + "\n")

        if gcfg.steps > 0:
            train_gan(puppet_dataset(gcfg), gcfg, depth_net, trainer, progress)
    finally:
        if log:
            log.close()
    after = depth_net.checksum()
    if after != before:
        raise RuntimeError("depth network changed during generator training")
    save_checkpoint(
        ckpt_path, {"depth": depth_net, "gen": trainer.gen, "disc": trainer.disc},
        meta={"stage": "gan", "seed": cfg.seed, "config": cfg.digest(), "step": trainer.step_count,
              "num_kp": gcfg.num_kp, "decoder_skip": gcfg.decoder_skip, "splat_sigma": gcfg.splat_sigma,
              "depth_checksum": after},
    )
    return trainer


@dataclass
class GanModel:
    depth: DepthNet
    gen: Generator
    disc: Discriminator | None = None


def load_gan_model(ckpt: Checkpoint) -> GanModel:
    if ckpt.meta.get("stage") != "gan":
        raise CheckpointError("names", "checkpoint does not hold a trained generator")
    rng = np.random.default_rng(0)
    gen = Generator(rng, num_kp=int(ckpt.meta["num_kp"]), decoder_skip=bool(ckpt.meta["decoder_skip"]),
                    splat_sigma=float(ckpt.meta["splat_sigma"]))
    ckpt.restore(gen, "gen")
    disc = ckpt.restore(Discriminator(rng), "disc") if ckpt.subset("disc") else None
    return GanModel(load_depth_net(ckpt), gen, disc)


# ---------------------------------------------------------------------------
# inference helpers


def reenact(model: GanModel, source: np.ndarray, driving: np.ndarray):
    """One generated frame per driving frame: returns (images, attention, diagnostics)."""
    with T.no_grad():
        out, attn, diag = generate(model.gen, model.depth, source, driving)
    return out.data, attn.data, diag


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"{folder} is not a directory")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def attention_grid(attn: np.ndarray, queries: int = 4) -> np.ndarray:
    """Tile the attention rows of a few evenly spaced query positions into one image."""
    hw = attn.shape[-1]
    side = int(round(np.sqrt(hw)))
    picks = np.linspace(0, hw - 1, queries * queries).astype(int)
    tiles = [colorize(attn[p].reshape(side, side))[0] for p in picks]
    rows = [np.concatenate(tiles[r * queries : (r + 1) * queries], axis=1) for r in range(queries)]
    grid = np.concatenate(rows, axis=0)
    return np.broadcast_to(grid, (3,) + grid.shape).copy()


def write_diagnostics(folder, stem: str, source: np.ndarray, driving: np.ndarray, diag, attn: np.ndarray) -> None:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    save_png(folder / f"{stem}_depth_source.png", colorize(diag.depth_src.data[0, 0]))
    save_png(folder / f"{stem}_depth_driving.png", colorize(diag.depth_drv.data[0, 0]))
    save_png(folder / f"{stem}_kp_source.png", draw_points(source, diag.kp_src.data[0]))
    save_png(folder / f"{stem}_kp_driving.png", draw_points(driving, diag.kp_drv.data[0]))
    save_png(folder / f"{stem}_attention.png", attention_grid(attn[0]))


def depth_png(net: DepthNet, image: np.ndarray) -> np.ndarray:
    return colorize(predict_depth(net, image[None])[0])


# ---------------------------------------------------------------------------
# evaluation


def frame_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    return {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt).item(), "l1": l1(pred, gt)}


def evaluate_folders(pred_dir, gt_dir) -> dict:
    preds, gts = list_images(pred_dir), list_images(gt_dir)
    if len(preds) != len(gts):
        raise ValueError(f"frame count mismatch: {len(preds)} predicted vs {len(gts)} ground truth")
    if not preds:
        raise ValueError("no frames to evaluate")
    frames = []
    for p, g in zip(preds, gts):
        m = frame_metrics(load_png(p), load_png(g))
        frames.append({"pred": p.name, "gt": g.name, **m})
    mean = {k: float(np.mean([f[k] for f in frames])) for k in ("psnr", "ssim", "l1")}
    return {"count": len(frames), "mean": mean, "frames": frames}
