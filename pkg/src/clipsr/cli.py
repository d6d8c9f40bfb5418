"""Command-line entry points.

Verbs: ``dataset-gen``, ``pretrain-clip``, ``train-sr``, ``infer``, ``eval``.
Exit status is 0 on success, 2 when inputs or configuration fail validation
and 1 on runtime failures (I/O, corrupt checkpoints).
"""

from __future__ import annotations

import argparse
import os
import sys

from .checkpoint import load_checkpoint, read_manifest
from .config import RunConfig, load_config
from .data import generate_dataset, load_manifest, load_split
from .errors import ConfigurationError, DimensionError, InputError, ValidationError
from .imaging import ImageBuffer, PPMParseError, read_image, write_image
from .metrics import psnr, ssim
from .training import (
    SRTrainer,
    build_sr,
    clip_retrieval,
    evaluate,
    format_report,
    load_clip,
    load_sr,
    pretrain_clip,
    save_clip,
    sr_expected_shapes,
)

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2
VALIDATION_ERRORS = (ValidationError, ConfigurationError, DimensionError, InputError, PPMParseError)


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag in ("seed", "steps", "scale", "clip_steps"):
        v = getattr(args, flag, None)
        if v is not None:
            out[flag] = str(v)
    return out


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), _overrides(args))


def _require_data(root) -> None:
    if not os.path.exists(os.path.join(root, "manifest.json")):
        raise FileNotFoundError(f"no dataset at {root} (manifest.json missing)")


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_dataset_gen(args) -> int:
    if args.count <= 0:
        raise ValidationError("--count must be positive")
    try:
        manifest = generate_dataset(args.out, args.count, args.seed, args.splits, args.hr_size)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    _say(f"wrote {manifest['count']} pairs to {args.out} " +
         " ".join(f"{k}={v}" for k, v in manifest["splits"].items()))
    return EXIT_OK


def cmd_pretrain_clip(args) -> int:
    cfg = _config(args)
    _require_data(args.data)
    train = load_split(args.data, "train")
    log_path = args.log or args.out_checkpoint + ".loss.csv"
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("step,loss\n")
        bundle, losses = pretrain_clip(train, cfg, log=lambda s, v: log.write(f"{s},{v:.8g}\n"))
    save_clip(args.out_checkpoint, bundle, cfg, len(losses))
    msg = f"pretrained encoders for {len(losses)} steps, final loss {losses[-1]:.4f}" if losses else "no steps run"
    splits = load_manifest(args.data)["splits"]
    if splits.get("val", 0) >= 16:
        msg += f", val top-1 {clip_retrieval(bundle, load_split(args.data, 'val')):.3f}"
    _say(msg)
    return EXIT_OK


def cmd_train_sr(args) -> int:
    cfg = _config(args)
    clip = None
    if cfg.text_on:
        if not args.clip_checkpoint:
            raise ValidationError("the text path needs --clip-checkpoint")
        clip, _ = load_clip(args.clip_checkpoint, cfg)
    model = build_sr(cfg, clip)
    _require_data(args.data)
    train = load_split(args.data, "train", cfg.scale)
    trainer = SRTrainer(model, train)
    log_mode = "w"
    if args.resume:
        header = read_manifest(args.resume)
        if clip is not None and header.get("meta", {}).get("vocab") != list(clip.vocab.tokens):
            raise ValidationError("resume checkpoint was trained with a different vocabulary")
        trainer.restore(load_checkpoint(args.resume, sr_expected_shapes(model, header), cfg.to_dict()))
        log_mode = "a"
    total = cfg.total_steps(len(train))
    remaining = max(0, total - trainer.step)
    log_path = args.log or args.out + ".loss.csv"
    with open(log_path, log_mode, encoding="utf-8") as log:
        if log_mode == "w":
            log.write("step,rec,per,adv,disc,total\n")
        every = args.save_every or remaining
        while remaining > 0:
            chunk = min(every, remaining)
            trainer.run(chunk, log=log)
            remaining -= chunk
            trainer.save(args.out)
    if total <= trainer.step and not os.path.exists(args.out):
        trainer.save(args.out)
    _say(f"variant {cfg.variant}: trained to step {trainer.step}, checkpoint {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = load_sr(args.checkpoint)
    cfg = model.cfg
    if args.scale != cfg.scale:
        raise ValidationError(f"checkpoint was trained for scale {cfg.scale}, got --scale {args.scale}")
    img = read_image(args.image)
    if img.height != cfg.lr_size or img.width != cfg.lr_size:
        raise ValidationError(
            f"input is {img.height}x{img.width}; this checkpoint takes {cfg.lr_size}x{cfg.lr_size} at scale {cfg.scale}")
    if cfg.text_on and args.caption is None:
        raise ValidationError("this model needs --caption")
    sr = model.super_resolve(img.to_chw()[None], [args.caption or ""])[0]
    out = ImageBuffer.from_chw(sr)
    write_image(args.out, out)
    _say(f"wrote {out.height}x{out.width} image to {args.out}")
    if args.gt:
        gt = read_image(args.gt)
        if (gt.height, gt.width) != (out.height, out.width):
            raise ValidationError(f"ground truth is {gt.height}x{gt.width}, output {out.height}x{out.width}")
        q = out.quantized()
        _say(f"psnr = {psnr(q, gt):.6f}\nssim = {ssim(q, gt):.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_sr(args.checkpoint)
    if args.scale is not None and args.scale != model.cfg.scale:
        raise ValidationError(f"checkpoint was trained for scale {model.cfg.scale}, got --scale {args.scale}")
    _require_data(args.data)
    entries = [e for e in load_manifest(args.data)["entries"] if e["split"] == args.split]
    if not entries:
        raise InputError(f"split {args.split!r} is empty")
    split = load_split(args.data, args.split, model.cfg.scale)
    text = format_report(evaluate(model, split, args.split))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file ([model], [loss], [optim], [train], [clip], [ablation])")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clipsr", description="Text-guided super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", help="render a synthetic caption/image corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", default="80/10/10")
    p.add_argument("--hr-size", type=int, default=64)
    p.set_defaults(func=cmd_dataset_gen)

    p = sub.add_parser("pretrain-clip", help="contrastive pretraining of the text and image encoders")
    p.add_argument("--data", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--log", help="loss curve CSV (default: <checkpoint>.loss.csv)")
    p.add_argument("--clip-steps", dest="clip_steps", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain_clip)

    p = sub.add_parser("train-sr", help="train the super-resolution generator")
    p.add_argument("--data", required=True)
    p.add_argument("--clip-checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from an SR checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--save-every", type=int, default=0)
    p.add_argument("--log", help="per-step loss CSV (default: <out>.loss.csv)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_sr)

    p = sub.add_parser("infer", help="super-resolve one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption")
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gt", help="ground-truth HR image; prints PSNR/SSIM")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM report against a bicubic baseline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scale", type=int)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
