"""Command-line pipeline: conv autoencoder -> capsule encoder -> capsule decoder -> samples.

Exit codes: 0 success, 1 numerical failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import conv_frontend as conv
from . import plotting
from .capsule_core import DomainError, SingularEnergyError, squash
from .data_io import (
    CheckpointError,
    IdxFormatError,
    format_config,
    load_checkpoint,
    load_idx_images,
    parse_config,
    save_checkpoint,
    save_image_grid,
    tile_images,
)
from .numerics import Rng, ShapeError
from .poe_train import (
    DecoderModel,
    EncoderModel,
    OrientationStats,
    TrainConfig,
    TrainingError,
    generate,
    gradcheck,
    train_decoder,
    train_encoder,
)

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_USAGE = 2

GRADCHECK_TOL = 1e-5

# flag dest -> TrainConfig field
TRAIN_FLAGS = {
    "epochs": "epochs",
    "batch": "batch_size",
    "lr": "learning_rate",
    "momentum": "momentum",
    "l2": "l2",
    "decay": "lr_decay",
    "routing_iters": "routing_iters",
    "seed": "seed",
    "init_std": "init_std",
    "activity_threshold": "activity_threshold",
    "threads": "threads",
}


class UsageError(Exception):
    pass


def _add_common(p, out_help):
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--data", help="IDX image file")
    p.add_argument("--checkpoint", help="input checkpoint")
    p.add_argument("--out", help=out_help)
    p.add_argument("--limit", type=int, help="use only the first N images")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    p.add_argument("--quiet", action="store_true")
    d = TrainConfig()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--l2", type=float, default=d.l2)
    p.add_argument("--decay", type=float, default=d.lr_decay)
    p.add_argument("--routing-iters", type=int, default=d.routing_iters)
    p.add_argument("--init-std", type=float, default=d.init_std)
    p.add_argument("--activity-threshold", type=float, default=d.activity_threshold)
    p.add_argument("--threads", type=int, default=d.threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capspoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-conv", help="train the convolutional autoencoder")
    _add_common(p, "checkpoint to write (default model.poec)")
    p.add_argument("--channels", type=int, default=128)
    p.add_argument("--kernel", type=int, default=9)
    p.add_argument("--leaky-slope", type=float, default=0.01)
    p.add_argument("--dropout", type=float, default=0.25)
    p.set_defaults(func=cmd_train_conv)

    p = sub.add_parser("train-caps", help="train the capsule encoder on frozen conv features")
    _add_common(p, "checkpoint to write (default: overwrite --checkpoint)")
    p.add_argument("--n-caps", type=int, default=20)
    p.add_argument("--caps-dim", type=int, default=16)
    p.set_defaults(func=cmd_train_caps)

    p = sub.add_parser("train-decoder", help="train the capsule decoder with the encoder frozen")
    _add_common(p, "checkpoint to write (default: overwrite --checkpoint)")
    p.set_defaults(func=cmd_train_decoder)

    p = sub.add_parser("generate", help="sample images from single capsules")
    _add_common(p, "PGM grid to write (default samples.pgm)")
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--capsule", type=int, help="only this capsule column")
    p.add_argument("--restricted", action="store_true", help="sample from the visited hemisphere only")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the CD data term")
    _add_common(p, "CSV of per-entry errors (optional)")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--n-in", type=int, default=8)
    p.add_argument("--n-out", type=int, default=4)
    p.add_argument("--dim", type=int, default=4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with values from ``--config`` installed as defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config) as f:
            values = parse_config(f.read())
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"{args.config}: {exc}") from exc
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{args.config}: {key} expects a boolean, got {raw!r}")
            defaults[dest] = raw.lower() in ("true", "1", "yes")
        else:
            try:
                defaults[dest] = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {raw!r}") from exc
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def train_config(args) -> TrainConfig:
    try:
        return TrainConfig(**{field: getattr(args, dest) for dest, field in TRAIN_FLAGS.items()})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _say(args, msg):
    if not args.quiet:
        print(msg, flush=True)


def _load_images(args):
    if not args.data:
        raise UsageError("--data is required")
    if not os.path.exists(args.data):
        raise UsageError(f"data file not found: {args.data}")
    try:
        images = load_idx_images(args.data).images
    except IdxFormatError as exc:
        raise UsageError(str(exc)) from exc
    if args.limit is not None:
        images = images[: args.limit]
    if len(images) == 0:
        raise UsageError("dataset is empty")
    return images


def _load_sections(path, required):
    if not path:
        raise UsageError("--checkpoint is required")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        sections = load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    missing = [name for name in required if name not in sections]
    if missing:
        raise UsageError(f"{path} lacks required sections {missing}; run the earlier stages first")
    return sections


def stack_to_sections(stack: conv.ConvStack) -> dict:
    out = {f"conv.{name}": value for name, value in stack.params().items()}
    out["conv.meta"] = np.array(
        [*stack.image_shape, *stack.strides, stack.leaky_slope, stack.dropout_rate], dtype=np.float64
    )
    return out


def sections_to_stack(sections: dict) -> conv.ConvStack:
    meta = sections["conv.meta"]
    if meta.shape != (7,):
        raise ShapeError(f"conv.meta has shape {meta.shape}, expected (7,)")
    params = {name: sections[f"conv.{name}"] for name in conv.PARAM_NAMES}
    return conv.ConvStack(
        **params,
        image_shape=tuple(int(v) for v in meta[:3]),
        strides=(int(meta[3]), int(meta[4])),
        leaky_slope=float(meta[5]),
        dropout_rate=float(meta[6]),
    )


CONV_SECTIONS = [f"conv.{n}" for n in conv.PARAM_NAMES] + ["conv.meta"]


def _history_outputs(args, base, rows, metric, title):
    plotting.write_csv(rows, f"{base}.csv")
    if not args.no_figures:
        plotting.plot_history(rows, metric, f"{base}.png", title=title, logy=True)


def _recorder(args, rows, metric):
    def on_epoch(epoch, metrics):
        rows.append({"epoch": epoch, **metrics})
        _say(args, f"epoch {epoch:4d}  {metric} {metrics[metric]:.6g}  lr {metrics['lr']:.4g}")

    return on_epoch


def cmd_train_conv(args) -> int:
    images = _load_images(args)
    cfg = train_config(args)
    out = args.out or "model.poec"
    rng = Rng(cfg.seed)
    try:
        stack = conv.init_stack(
            rng, images.shape[1:], channels=args.channels, kernel=args.kernel,
            leaky_slope=args.leaky_slope, dropout_rate=args.dropout,
        )
    except ShapeError as exc:
        raise UsageError(str(exc)) from exc
    rows = []
    stack = conv.train_autoencoder(images, cfg, stack=stack, on_epoch=_recorder(args, rows, "mse"))
    sections = stack_to_sections(stack)
    sections["config.conv"] = format_config(cfg.as_dict())
    save_checkpoint(sections, out)
    _history_outputs(args, f"{out}.conv-history", rows, "mse", "autoencoder reconstruction MSE")
    _say(args, f"wrote {out}")
    return EXIT_OK


def _capsule_dataset(args, sections):
    stack = sections_to_stack(sections)
    images = _load_images(args)
    if images.shape[1:] != stack.image_shape:
        raise ShapeError(f"data images {images.shape[1:]} do not match conv checkpoint {stack.image_shape}")
    vols = np.concatenate([conv.encode(images[k : k + 64], stack) for k in range(0, len(images), 64)])
    return conv.volume_to_capsules(vols)


def cmd_train_caps(args) -> int:
    sections = _load_sections(args.checkpoint, CONV_SECTIONS)
    cfg = train_config(args)
    data = _capsule_dataset(args, sections)
    _say(args, f"{len(data)} samples of {data.shape[1]} capsules x {data.shape[2]}")
    rows = []
    encoder, stats = train_encoder(data, cfg, n_out=args.n_caps, d_out=args.caps_dim,
                                   on_epoch=_recorder(args, rows, "activation"))
    sections.update({
        "encoder.w": encoder.w,
        "stats.sums": stats.sums,
        "stats.counts": stats.counts,
        "config.caps": format_config(cfg.as_dict()),
    })
    for stale in ("decoder.u", "config.decoder"):
        sections.pop(stale, None)
    out = args.out or args.checkpoint
    save_checkpoint(sections, out)
    _history_outputs(args, f"{out}.caps-history", rows, "activation", "mean best-capsule activation")
    _say(args, f"active samples per capsule: {' '.join(str(int(c)) for c in stats.counts)}")
    _say(args, f"wrote {out}")
    return EXIT_OK


def cmd_train_decoder(args) -> int:
    sections = _load_sections(args.checkpoint, CONV_SECTIONS + ["encoder.w"])
    cfg = train_config(args)
    data = _capsule_dataset(args, sections)
    rows = []
    decoder = train_decoder(data, EncoderModel(sections["encoder.w"]), cfg,
                            on_epoch=_recorder(args, rows, "angle_error"))
    sections["decoder.u"] = decoder.u
    sections["config.decoder"] = format_config(cfg.as_dict())
    out = args.out or args.checkpoint
    save_checkpoint(sections, out)
    _history_outputs(args, f"{out}.decoder-history", rows, "angle_error", "mean reconstruction angle error")
    _say(args, f"wrote {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    sections = _load_sections(args.checkpoint, CONV_SECTIONS + ["decoder.u"])
    stack = sections_to_stack(sections)
    decoder = DecoderModel(sections["decoder.u"])
    stats = None
    if "stats.sums" in sections:
        stats = OrientationStats(sections["stats.sums"], sections["stats.counts"])
    elif args.restricted:
        raise UsageError("restricted sampling needs orientation statistics from train-caps")
    n_up = decoder.u.shape[0]
    if args.rows < 1:
        raise UsageError("--rows must be positive")
    if args.capsule is not None and not 0 <= args.capsule < n_up:
        raise UsageError(f"--capsule must lie in [0, {n_up})")
    capsules = [args.capsule] if args.capsule is not None else list(range(n_up))
    if decoder.u.shape[1] * decoder.u.shape[2] != int(np.prod(stack.volume_shape)):
        raise ShapeError(f"decoder output {decoder.u.shape[1:3]} does not fill conv volume {stack.volume_shape}")

    rng = Rng(args.seed)
    images, report = [], []
    for r in range(args.rows):
        for j in capsules:
            layer, noise = generate(decoder, stats, rng, j, restricted=args.restricted,
                                    routing_iters=args.routing_iters)
            vol = conv.capsules_to_volume(layer, stack.volume_shape)
            images.append(conv.decode(vol, stack))
            direction = stats.directions[j] if stats is not None else np.zeros_like(noise)
            report.append({
                "row": r,
                "capsule": j,
                "restricted": int(args.restricted),
                "noise_norm": float(np.linalg.norm(noise)),
                "dot_mean_direction": float(noise @ direction),
                "squashed_norm": float(np.linalg.norm(squash(noise))),
            })
    out = args.out or "samples.pgm"
    save_image_grid(images, len(capsules), out)
    base = os.path.splitext(out)[0]
    plotting.write_csv(report, f"{base}.samples.csv")
    if not args.no_figures:
        mode = "restricted" if args.restricted else "complete"
        plotting.plot_image_grid(tile_images(images, len(capsules)), args.rows, len(capsules),
                                 f"{base}.png", title=f"samples ({mode} domain)")
    _say(args, f"wrote {out} ({args.rows} x {len(capsules)} tiles)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if min(args.n_in, args.n_out, args.dim) < 1:
        raise UsageError("--n-in, --n-out and --dim must be positive")
    rng = Rng(args.seed)
    x = squash(rng.normal((args.n_in, args.dim)))
    w = rng.normal((args.n_in, args.n_out, args.dim, args.dim))
    report = gradcheck(w, x, eps=args.eps, routing_iters=args.routing_iters)
    i, j, row, col = report.worst
    print(f"entries checked      {report.n_checked}")
    print(f"eps                  {report.eps:g}")
    print(f"max relative error   {report.max_rel_error:.3e}")
    print(f"worst entry          i={i} j={j} row={row} col={col}")
    print(f"analytic / numeric   {report.analytic:.12e} / {report.numeric:.12e}")
    ok = report.passed(GRADCHECK_TOL)
    print(f"result               {'PASS' if ok else 'FAIL'} (tolerance {GRADCHECK_TOL:g})")
    if args.out:
        rows = [
            {"i": a, "j": b, "row": c, "col": d, "rel_error": float(report.rel_errors[a, b, c, d])}
            for a, b, c, d in np.ndindex(report.rel_errors.shape)
        ]
        plotting.write_csv(rows, args.out)
        if not args.no_figures:
            plotting.plot_gradcheck(report.rel_errors, GRADCHECK_TOL, f"{os.path.splitext(args.out)[0]}.png")
    return EXIT_OK if ok else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        start = time.perf_counter()
        code = args.func(args)
        if not getattr(args, "quiet", False) and args.command != "gradcheck":
            print(f"done in {time.perf_counter() - start:.1f}s")
        return code
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, ShapeError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, conv.ConvTrainingError, SingularEnergyError, DomainError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
