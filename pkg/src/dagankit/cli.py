"""``dagankit`` command line.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .depth import NumericalFailure

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")


def _run_config(args, steps_key: str | None = None) -> RunConfig:
    overrides = {"seed": args.seed}
    if steps_key:
        overrides[steps_key] = args.steps
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dagankit", description="Depth-aware keypoint reenactment toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-depth", help="fit depth and pose networks on synthetic clips")
    _config_args(p)
    p.add_argument("--out", default="depth.ckpt")
    p.add_argument("--log", help="step,loss lines (default: <out>.loss.csv)")

    p = sub.add_parser("train-gan", help="train the generator against a frozen depth network")
    _config_args(p)
    p.add_argument("--depth", required=True, help="checkpoint written by train-depth")
    p.add_argument("--out", default="gan.ckpt")
    p.add_argument("--log", help="step,L_P,L_G,L_E,L_D,total lines (default: <out>.loss.csv)")

    p = sub.add_parser("reenact", help="animate a source image with a folder of driving frames")
    p.add_argument("--source", required=True)
    p.add_argument("--driving", required=True, help="folder of driving frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", action="store_true")

    p = sub.add_parser("eval", help="PSNR / SSIM / L1 between two frame folders")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="JSON report path (default: stdout)")

    sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")

    p = sub.add_parser("gen-data", help="export a synthetic corpus")
    p.add_argument("--kind", choices=("depth", "puppet"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--length", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("visualize", help="depth map, keypoints and attention for one image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--driving", help="driving frame (needs a train-gan checkpoint)")
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------


def cmd_train_depth(args) -> int:
    from .pipeline import run_depth_stage

    cfg = _run_config(args, "depth_steps")
    log = args.log or f"{args.out}.loss.csv"
    trainer = run_depth_stage(cfg, args.out, log)
    print(f"depth checkpoint {args.out} after {trainer.step_count} steps")
    return EXIT_OK


def cmd_train_gan(args) -> int:
    from .pipeline import run_gan_stage

    cfg = _run_config(args, "gan_steps")
    if not Path(args.depth).is_file():
        raise UsageError(f"depth checkpoint {args.depth} not found; run train-depth first")
    log = args.log or f"{args.out}.loss.csv"
    trainer = run_gan_stage(cfg, args.depth, args.out, log)
    print(f"generator checkpoint {args.out} after {trainer.step_count} steps")
    return EXIT_OK


def cmd_reenact(args) -> int:
    from .images import load_png, save_png
    from .pipeline import list_images, load_gan_model, reenact, write_diagnostics

    model = load_gan_model(load_checkpoint(args.ckpt))
    source = load_png(args.source)
    size = source.shape[1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written, failed = 0, 0
    for frame in list_images(args.driving):
        try:
            driving = load_png(frame, size)
        except Exception as exc:  # unreadable frame: report and move on
            print(f"error: {frame.name}: {exc}", file=sys.stderr)
            failed += 1
            continue
        images, attn, diag = reenact(model, source[None], driving[None])
        save_png(out / f"{frame.stem}.png", images[0])
        if args.diagnostics:
            write_diagnostics(out / "diagnostics", frame.stem, source, driving, diag, attn)
        written += 1
    print(f"{written} frames written to {out}" + (f", {failed} failed" if failed else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate_folders

    report = evaluate_folders(args.pred, args.gt)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite()
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<50} {r.max_rel_error:.3e}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_gen_data(args) -> int:
    from . import synthetic as S

    if args.count < 1 or args.length < 2:
        raise UsageError("--count must be >= 1 and --length >= 2")
    if args.kind == "depth":
        params = S.DepthSceneParams(height=args.size, width=args.size)
        manifest = S.export_depth_corpus(args.out, S.depth_corpus(args.seed, args.count, args.length, params))
    else:
        seeds = np.random.SeedSequence(args.seed).generate_state(args.count)
        seqs = [S.gen_puppet_sequence(int(s), args.length, S.PuppetParams(size=args.size)) for s in seeds]
        manifest = S.export_puppet_corpus(args.out, seqs)
    print(f"manifest {manifest}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .images import load_png, save_png
    from .pipeline import depth_png, load_depth_net, load_gan_model, reenact, write_diagnostics

    ckpt = load_checkpoint(args.ckpt)
    image = load_png(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    if args.driving is None:
        save_png(out / f"{stem}_depth.png", depth_png(load_depth_net(ckpt), image))
    else:
        model = load_gan_model(ckpt)
        driving = load_png(args.driving, image.shape[1])
        images, attn, diag = reenact(model, image[None], driving[None])
        save_png(out / f"{stem}_generated.png", images[0])
        write_diagnostics(out, stem, image, driving, diag, attn)
    print(f"wrote visualizations to {out}")
    return EXIT_OK


COMMANDS = {
    "train-depth": cmd_train_depth,
    "train-gan": cmd_train_gan,
    "reenact": cmd_reenact,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
