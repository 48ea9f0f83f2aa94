"""Alternating discriminator / generator training on puppet sequences with a frozen depth net."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import Generator, generate
from .depth import DepthNet, NumericalFailure, depth_forward
from .losses import (
    Discriminator,
    FeatureExtractor,
    LossParts,
    LossWeights,
    discriminator_loss,
    equivariance_loss,
    generator_gan_loss,
    keypoint_distance_loss,
    perceptual_loss,
    total_loss,
)
from .nn import Adam, named_grads
from .synthetic import PuppetParams, gen_puppet_sequence

log = logging.getLogger(__name__)


@dataclass
class GanConfig:
    steps: int = 5000
    resolution: int = 64
    batch: int = 4
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    num_kp: int = 15
    splat_sigma: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    distance_alpha: float = 0.2
    distance_surrogate: bool = False
    decoder_skip: bool = True
    sequences: int = 48
    sequence_length: int = 24
    extractor_seed: int = 1234
    log_every: int = 100


@dataclass
class LossRecord:
    step: int
    perceptual: float
    gan: float
    equivariance: float
    distance: float
    total: float
    disc: float

    def line(self) -> str:
        return (f"{self.step},{self.perceptual:.6f},{self.gan:.6f},{self.equivariance:.6f},"
                f"{self.distance:.6f},{self.total:.6f}")


class GanTrainer:
    def __init__(self, cfg: GanConfig, depth_net: DepthNet, generator: Generator | None = None,
                 discriminator: Discriminator | None = None):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 21])
        self.depth = depth_net
        self.gen = generator or Generator(rng, num_kp=cfg.num_kp, decoder_skip=cfg.decoder_skip,
                                               splat_sigma=cfg.splat_sigma)
        self.disc = discriminator or Discriminator(rng)
        self.extractor = FeatureExtractor(cfg.extractor_seed)
        self.opt_gen = Adam(self.gen, cfg.lr, cfg.betas)
        self.opt_disc = Adam(self.disc, cfg.lr, cfg.betas)
        self.rng = np.random.default_rng([cfg.seed, 22])
        self.step_count = 0
        self.records: list[LossRecord] = []

    def step(self, source: np.ndarray, driving: np.ndarray) -> LossRecord:
        try:
            return self._step(source, driving)
        except FloatingPointError as exc:
            raise NumericalFailure(self.step_count + 1, "value") from exc

    def _step(self, source: np.ndarray, driving: np.ndarray) -> LossRecord:
        cfg = self.cfg
        src, drv = T.constant(source), T.constant(driving)
        with T.no_grad():
            D_s = depth_forward(self.depth, src)
            D_d = depth_forward(self.depth, drv)
        I_g, _, diag = generate(self.gen, self.depth, src, drv, D_s, D_d)

        # discriminator update on (real driving, detached generated)
        d_loss = discriminator_loss(self.disc, drv, T.detach(I_g))
        self._check(d_loss, "discriminator loss")
        self.opt_disc.step(named_grads(d_loss, self.disc))

        # generator update on the full objective
        L_P = perceptual_loss(self.extractor, I_g, drv)
        adv, fm = generator_gan_loss(self.disc, drv, I_g)
        L_G = adv + T.scale(fm, 10.0)
        L_E = equivariance_loss(self.gen.kp, drv, D_d, self.rng, kp=diag.kp_drv)
        L_Ds = keypoint_distance_loss(diag.kp_src, cfg.distance_alpha, cfg.distance_surrogate)
        L_Dd = keypoint_distance_loss(diag.kp_drv, cfg.distance_alpha, cfg.distance_surrogate)
        loss = total_loss(cfg.weights, LossParts(L_P, L_G, L_E, L_Ds, L_Dd))
        self._check(loss, "generator loss")
        self.opt_gen.step(named_grads(loss, self.gen))

        self.step_count += 1
        rec = LossRecord(self.step_count, L_P.item(), L_G.item(), L_E.item(),
                         L_Ds.item() + L_Dd.item(), loss.item(), d_loss.item())
        self.records.append(rec)
        return rec

    def _check(self, loss, what: str) -> None:
        if not np.isfinite(loss.item()):
            raise NumericalFailure(self.step_count + 1, what)


def gan_train_step(trainer: GanTrainer, source: np.ndarray, driving: np.ndarray) -> LossRecord:
    return trainer.step(source, driving)


def puppet_dataset(cfg: GanConfig, seed_offset: int = 0) -> list[np.ndarray]:
    """One (L, 3, S, S) frame stack per sequence."""
    seeds = np.random.SeedSequence([cfg.seed, 31, seed_offset]).generate_state(cfg.sequences)
    return [np.stack([s.frame for s in gen_puppet_sequence(int(sd), cfg.sequence_length, PuppetParams(size=cfg.resolution))])
            for sd in seeds]


def sample_pairs(sequences: list[np.ndarray], batch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Source/driving frames drawn from the same sequence at two random times."""
    src, drv = [], []
    for _ in range(batch):
        seq = sequences[rng.integers(len(sequences))]
        i, j = rng.choice(len(seq), size=2, replace=False)
        src.append(seq[i])
        drv.append(seq[j])
    return np.stack(src), np.stack(drv)


def train_gan(sequences, cfg: GanConfig, depth_net: DepthNet, trainer: GanTrainer | None = None,
              progress=None) -> GanTrainer:
    trainer = trainer or GanTrainer(cfg, depth_net)
    rng = np.random.default_rng([cfg.seed, 32])
    for _ in range(cfg.steps):
        src, drv = sample_pairs(sequences, cfg.batch, rng)
        rec = trainer.step(src, drv)
        if cfg.log_every and rec.step % cfg.log_every == 0:
            log.info("gan step %d  L_P %.4f  L_G %.4f  L_E %.4f  total %.4f", rec.step, rec.perceptual,
                     rec.gan, rec.equivariance, rec.total)
        if progress is not None:
            progress(rec)
    return trainer


@dataclass
class ReenactmentReport:
    psnr: float  # generated vs driving, same sequence
    copy_psnr: float  # source frame itself vs driving
    identity_psnr: float  # source used as its own driving frame
    centroid_ratio: float  # cross-sequence part placement relative to not moving at all


def evaluate_reenactment(gen: Generator, depth_net: DepthNet, cfg: GanConfig, count: int = 8,
                         times=(6, 12, 18, 23), seed_offset: int = 1) -> ReenactmentReport:
    """Score a generator on puppet sequences it never saw during training.

    Self-reenactment drives frame 0 of each sequence with later frames of
    the same sequence. Cross-sequence reenactment drives sequence i with
    sequence i+1 and measures how far the rendered part centroids land from
    the driving anchors, relative to the source anchors' distance. A part the
    generator fails to render counts as not moved.
    """
    from .photometric import psnr
    from .synthetic import part_centroids

    seeds = np.random.SeedSequence([cfg.seed, 31, seed_offset]).generate_state(count)
    length = max(times) + 1
    seqs = [gen_puppet_sequence(int(s), length, PuppetParams(size=cfg.resolution)) for s in seeds]
    src = np.stack([q[0].frame for q in seqs for _ in times])
    drv = np.stack([q[t].frame for q in seqs for t in times])
    with T.no_grad():
        out = generate(gen, depth_net, src, drv)[0].data
        same = generate(gen, depth_net, src[:: len(times)], src[:: len(times)])[0].data
    self_psnr = float(np.mean([psnr(o, d) for o, d in zip(out, drv)]))
    copy_psnr = float(np.mean([psnr(s, d) for s, d in zip(src, drv)]))
    identity_psnr = float(np.mean([psnr(o, s) for o, s in zip(same, src[:: len(times)])]))

    cross_drv = [(seqs[(i + 1) % count], t) for i in range(count) for t in times]
    with T.no_grad():
        cross = generate(gen, depth_net, src, np.stack([q[t].frame for q, t in cross_drv]))[0].data
    moved, base = 0.0, 0.0
    for k, (img, (q, t)) in enumerate(zip(cross, cross_drv)):
        a_src, a_drv = seqs[k // len(times)][0].anchors, q[t].anchors
        start = np.linalg.norm(a_src - a_drv, axis=1)
        got = np.linalg.norm(part_centroids(img) - a_drv, axis=1)
        moved += np.where(np.isnan(got), start, got).sum()
        base += start.sum()
    return ReenactmentReport(self_psnr, copy_psnr, identity_psnr, float(moved / base))
