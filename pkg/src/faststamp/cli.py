"""Command-line interface: ``python -m faststamp <command> ...`` or ``faststamp <command>``.

Every command prints one JSON object on stdout when it succeeds. Failures
print ``{"error": <type>, "message": <text>, "exit_code": <n>}`` on stderr
and exit with:

====  ==========================================================
0     success
1     unexpected internal error
2     usage error (bad flags, malformed hex message, bad config)
3     image or dataset input error (missing, unsupported, truncated)
4     checkpoint error (manifest, integrity, shape mismatch)
5     run failure (training diverged, dataflow deadlock)
====  ==========================================================
"""
import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import (
    CheckpointError, ConfigError, DeadlockError, ImageFormatError, TrainingDivergedError,
    TruncatedFileError,
)

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_RUN = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _exit_code(exc):
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, (ImageFormatError, TruncatedFileError, FileNotFoundError, IsADirectoryError)):
        return EXIT_INPUT
    if isinstance(exc, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(exc, (TrainingDivergedError, DeadlockError)):
        return EXIT_RUN
    return EXIT_INTERNAL


# ------------------------------------------------------------ helpers


def _load_run_config(args):
    from .config import RunConfig

    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _load_any_checkpoint(path):
    """(float params or None, quantized params or None)."""
    from . import checkpoint
    from .model import load_checkpoint
    from .quant import load_qcheckpoint

    meta, _, _ = checkpoint.read(path)
    if meta.get("kind") == "fixed":
        return None, load_qcheckpoint(path)
    return load_checkpoint(path), None


def _check_hex(text):
    t = text.strip().lower()
    t = t[2:] if t.startswith("0x") else t
    if not t or any(ch not in "0123456789abcdef" for ch in t):
        raise UsageError(f"--message must be a hex string, got {text!r}")


def _message(text, length):
    from .model import BitMessage

    _check_hex(text)
    try:
        return BitMessage.from_hex(text, length)
    except ValueError as e:
        raise UsageError(f"--message: {e}") from e


def _spec(text):
    from .quant import FixedSpec

    try:
        return FixedSpec.parse(text)
    except ConfigError as e:
        raise UsageError(str(e)) from e


def _read_u8(path):
    from .imageio import read_image_u8

    if not os.path.exists(path):
        raise FileNotFoundError(f"no such image: {path}")
    return read_image_u8(path)


def _eval_images(directory, config):
    from .imageio import list_images, read_image_u8

    paths = list_images(directory)
    if not paths:
        raise FileNotFoundError(f"no .png/.ppm images in {directory}")
    imgs = [read_image_u8(p) for p in paths]
    for p, im in zip(paths, imgs):
        if tuple(im.shape[1:]) != tuple(config.image_size):
            raise ImageFormatError(f"{p}: size {im.shape[1:]} differs from model {config.image_size}")
    return np.stack(imgs)


# ------------------------------------------------------------ commands


def cmd_train(args):
    from .train import train_loop

    cfg = _load_run_config(args).override(
        seed=args.seed,
        train={"iterations": args.iterations, "mode": args.mode, "lr": args.lr,
               "batch_size": args.batch_size, "eval_every": args.eval_every},
        paths={"dataset": args.dataset, "val_dataset": args.val_dataset, "out_dir": args.out})
    tc = cfg.train_config()
    if not tc.out_dir:
        raise UsageError("train needs --out (or paths.out_dir in the config)")
    os.makedirs(tc.out_dir, exist_ok=True)
    cfg.dump(os.path.join(tc.out_dir, "run_config.json"))
    start = time.perf_counter()
    res = train_loop(tc)
    summary = {"out_dir": tc.out_dir, "best": res.best_eval, "iterations": tc.iterations,
               "wall_seconds": round(time.perf_counter() - start, 1),
               "best_checkpoint": os.path.join(tc.out_dir, "best"),
               "final_checkpoint": os.path.join(tc.out_dir, "final")}
    with open(os.path.join(tc.out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    _emit(summary)


def cmd_embed(args):
    _check_hex(args.message)
    from .imageio import write_image
    from .metrics import PSNR_CAP, psnr
    from .model import encode
    from .quant import fixed_encoder_forward, quantize_params
    from .transforms import to_uint8

    params, qparams = _load_any_checkpoint(args.checkpoint)
    config = (params or qparams).config
    msg = _message(args.message, config.message_length)
    x = _read_u8(args.image)
    if tuple(x.shape[1:]) != tuple(config.image_size):
        raise ImageFormatError(f"image is {x.shape[1:]}, model expects {tuple(config.image_size)}")
    fixed = args.fixed or (qparams.spec.name if qparams is not None else None)
    if args.dataflow and not fixed:
        fixed = "Q6.10"
    if fixed:
        spec = _spec(fixed)
        if qparams is None:
            qparams = quantize_params(params, spec)
        elif qparams.spec.name != spec.name:
            raise ConfigError(f"checkpoint is {qparams.spec.name}, --fixed asks for {spec.name}")
        if args.dataflow:
            from .dataflow import build_pipeline, run_streaming

            out, _ = run_streaming(build_pipeline(qparams), x, msg.bits, schedule=args.schedule)
        else:
            out = fixed_encoder_forward(x, msg.bits, qparams)
    else:
        out = to_uint8(encode(x.astype(np.float64) / 255.0, msg, params))
    write_image(args.out, out)
    _emit({"out": args.out, "message": msg.to_hex(), "path": "dataflow" if args.dataflow else
           ("fixed:" + fixed if fixed else "float"),
           "psnr": min(psnr(x / 255.0, out / 255.0), PSNR_CAP)})


def cmd_extract(args):
    from .metrics import hard_bits
    from .model import BitMessage, decode

    params, qparams = _load_any_checkpoint(args.checkpoint)
    if params is None:
        raise ConfigError("extract needs a float checkpoint (quantized checkpoints hold only the encoder)")
    x = _read_u8(args.image)
    if tuple(x.shape[1:]) != tuple(params.config.image_size):
        raise ImageFormatError(f"image is {x.shape[1:]}, model expects {tuple(params.config.image_size)}")
    soft = decode(x.astype(np.float64) / 255.0, params)
    msg = BitMessage(hard_bits(soft))
    _emit({"message": msg.to_hex(), "soft_bits": [round(float(v), 6) for v in soft]})


def cmd_eval(args):
    from .metrics import MetricsReport, bpp, mac_count
    from .train import eval_transforms, evaluate

    params, _ = _load_any_checkpoint(args.checkpoint)
    if params is None:
        raise ConfigError("eval needs a float checkpoint")
    cfg = params.config
    imgs = _eval_images(args.images, cfg).astype(np.float64) / 255.0
    msgs = np.random.default_rng(args.seed).integers(0, 2, (len(imgs), cfg.message_length))
    tf = eval_transforms("semi_fragile" if args.tamper else "robust", args.jpeg_quality, args.tamper_area)
    ev = evaluate(params, imgs, msgs, tf, seed=args.seed)
    _, macs = mac_count(cfg, "encoder")
    h, w = cfg.image_size
    reports = [MetricsReport(ev["psnr"], ev["ssim"], bra, bpp(cfg.message_length, h, w, 3),
                             {"encoder": macs}, label=name)
               for name, bra in ev["bra"].items()]
    lines = "".join(json.dumps(r.to_record(), sort_keys=True) + "\n" for r in reports)
    if args.report:
        with open(args.report, "w") as f:
            f.write(lines)
    _emit({"images": len(imgs), "reports": [r.to_record() for r in reports]})


def cmd_quantize(args):
    from .model import load_checkpoint
    from .quant import quantize_params, save_qcheckpoint

    spec = _spec(args.qformat)
    params = load_checkpoint(args.checkpoint)
    save_qcheckpoint(quantize_params(params, spec), args.out)
    _emit({"out": args.out, "qformat": spec.name})


def cmd_sweep(args):
    from .quant import bitwidth_sweep, sweep_records, sweep_table

    params, _ = _load_any_checkpoint(args.checkpoint)
    if params is None:
        raise ConfigError("sweep needs a float checkpoint")
    specs = [_spec(s).name for s in args.formats.split(",") if s.strip()]
    imgs = _eval_images(args.images, params.config)
    msgs = np.random.default_rng(args.seed).integers(0, 2, (len(imgs), params.config.message_length))
    rows = bitwidth_sweep(params, imgs, msgs, specs)
    if args.report:
        with open(args.report, "w") as f:
            f.write(sweep_records(rows))
    print(sweep_table(rows), file=sys.stderr)
    _emit({"rows": rows})


def cmd_dataflow_sim(args):
    _check_hex(args.message)
    from .dataflow import build_pipeline, min_fifo_depths, run_streaming
    from .quant import quantize_params

    params, qparams = _load_any_checkpoint(args.checkpoint)
    if qparams is None:
        qparams = quantize_params(params, _spec(args.qformat))
    graph = build_pipeline(qparams, capacity=args.capacity, skip_capacity=args.skip_capacity)
    msg = _message(args.message, qparams.config.message_length)
    x = _read_u8(args.image)
    out, report = run_streaming(graph, x, msg.bits, schedule=args.schedule, seed=args.seed)
    if args.report:
        with open(args.report, "w") as f:
            f.write(report.to_jsonl())
    if args.graph:
        with open(args.graph, "w") as f:
            f.write(graph.dump())
    if args.out:
        from .imageio import write_image

        write_image(args.out, out)
    result = {"stages": len(graph.stages), "fifos": len(graph.fifos), "clones": graph.count("clone"),
              "steps": report.steps, "conserved": report.conserved(),
              "max_high_water": max(report.high_water().values())}
    if args.min_depths:
        result["min_depths"] = min_fifo_depths(graph, args.schedule)
    _emit(result)


# ------------------------------------------------------------ parser


def build_parser():
    p = _Parser(prog="faststamp", description="Neural image watermarking with a fixed-point encoder.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a model (robust or semi_fragile)")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--mode", choices=["robust", "semi_fragile"])
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset", help="folder of PNG/PPM images, or 'toy'")
    t.add_argument("--val-dataset")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="watermark one image")
    e.add_argument("--image", required=True)
    e.add_argument("--message", required=True, help="hex, ceil(L/4) digits")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--fixed", metavar="QM.N", help="use the integer encoder in this Q-format")
    e.add_argument("--dataflow", action="store_true", help="run the streaming simulator")
    e.add_argument("--schedule", default="greedy")
    e.set_defaults(func=cmd_embed)

    x = sub.add_parser("extract", help="decode the message of one image")
    x.add_argument("--image", required=True)
    x.add_argument("--checkpoint", required=True)
    x.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="PSNR/SSIM/BRA over a folder of images")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--images", required=True)
    v.add_argument("--report")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--jpeg-quality", type=int, default=75)
    v.add_argument("--tamper", action="store_true", help="also report BRA after local tampering")
    v.add_argument("--tamper-area", type=float, default=0.25)
    v.set_defaults(func=cmd_eval)

    q = sub.add_parser("quantize", help="float checkpoint -> fixed-point checkpoint")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--qformat", default="Q6.10")
    q.set_defaults(func=cmd_quantize)

    w = sub.add_parser("sweep", help="bit-width sweep of the fixed-point encoder")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--images", required=True)
    w.add_argument("--formats", default="Q6.2,Q6.4,Q6.6,Q6.8,Q6.10,Q6.12,Q2.6")
    w.add_argument("--report")
    w.add_argument("--seed", type=int, default=0)
    w.set_defaults(func=cmd_sweep)

    d = sub.add_parser("dataflow-sim", help="stream one image through the stage graph")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--message", required=True)
    d.add_argument("--qformat", default="Q6.10")
    d.add_argument("--schedule", default="greedy")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--capacity", type=int)
    d.add_argument("--skip-capacity", type=int)
    d.add_argument("--report")
    d.add_argument("--graph")
    d.add_argument("--out")
    d.add_argument("--min-depths", action="store_true")
    d.set_defaults(func=cmd_dataflow_sim)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("missing command; see --help")
        args.func(args)
        return EXIT_OK
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 - every failure becomes an error record
        code = _exit_code(e)
        print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code}),
              file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
