"""Command-line interface.

Every command builds one report dict. With ``--json`` it is printed to stdout as
a single JSON document; otherwise as ``key: value`` lines carrying the same
numbers. Logs go to stderr. Exit codes: 0 ok, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import statistics
import struct
import sys
import time
from pathlib import Path

import numpy as np

from . import flops
from .binarize import pack_bits
from .data import (
    ConfigError,
    IdxError,
    LabeledImages,
    ArchiveError,
    LayerConfig,
    idx_load,
    load_config,
    load_weights,
    multimnist_batches,
    synthetic_blobs,
    to_idx_bytes_images,
)
from .routing import LAYERS, ProjectorConfig, class_scores
from .tensor import ShapeError
from .train import TrainConfig, train_demo
from .xnor import PackedVector, xnor_popcount_dot

log = logging.getLogger("xncaps")

DOMAIN_ERRORS = (ValueError, OSError, ShapeError, IdxError, ArchiveError, ConfigError, KeyError)

# published speed-up rows, all evaluated at the default projector config
SPEEDUP_TABLE = (
    ("ResNet_XnODR", "xnodr", 63.99, True),
    ("ResNet_XnIDR", "xnidr", 63.90, False),
    ("MobileNetV2_XnODR", "xnodr", 63.98, True),
    ("MobileNetV2_XnIDR", "xnidr", 63.80, True),
)


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _layer_config(args) -> LayerConfig | None:
    return load_config(args.config) if getattr(args, "config", None) else None


def _projector_from_flags(args, required: bool) -> ProjectorConfig:
    base = _layer_config(args)
    values = {}
    for key in ("caps_in", "caps_out", "dim_in", "dim_out"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
        elif base is not None:
            values[key] = getattr(base.projector, key)
        elif not required:
            values[key] = getattr(flops.DEFAULT_CONFIG, key)
        else:
            raise UsageError(f"missing --{key.replace('_', '-')} (or --config)")
    iterations = getattr(args, "iterations", None) or (base.projector.iterations if base else 3)
    return ProjectorConfig(iterations=iterations, **values)


def _add_projector_flags(p: argparse.ArgumentParser) -> None:
    for key in ("caps-in", "caps-out", "dim-in", "dim-out"):
        p.add_argument(f"--{key}", type=_positive_int)


# ---------------------------------------------------------------------------
# commands


def cmd_speedup(args) -> dict:
    cfg = flops.DEFAULT_CONFIG if args.table else _projector_from_flags(args, required=True)
    report = {
        "config": {k: getattr(cfg, k) for k in ("caps_in", "caps_out", "dim_in", "dim_out")},
        "xnodr": {
            "float_ops": flops.lp_out_float_ops(cfg),
            "binary_ops": flops.lp_out_binary_ops(cfg),
            "speedup": flops.speedup_xnodr(cfg),
        },
        "xnidr": {
            "float_ops": flops.lp_in_float_ops(cfg),
            "binary_ops": flops.lp_in_binary_ops(cfg),
            "speedup": flops.speedup_xnidr(cfg),
        },
    }
    if args.table:
        report["table"] = [
            {
                "model": model,
                "published": published,
                "computed": report[variant]["speedup"],
                "reproducible": reproducible,
                "match": abs(report[variant]["speedup"] - published) <= 0.01,
            }
            for model, variant, published, reproducible in SPEEDUP_TABLE
        ]
    return report


def cmd_flops(args) -> dict:
    if args.preset:
        stack = flops.FcStack.preset(args.preset)
    elif args.input is not None:
        stack = flops.FcStack(args.input, tuple(args.widths or ()))
    else:
        raise UsageError("give --preset or --input with --widths")
    cfg = _projector_from_flags(args, required=False)
    return {
        "stack": {"input_width": stack.input_width, "layer_widths": list(stack.layer_widths)},
        "fc_flops": flops.fc_stack_flops(stack),
        "config": {k: getattr(cfg, k) for k in ("caps_in", "caps_out", "dim_in", "dim_out", "iterations")},
        "xnodr": flops.cost_report(cfg, "xnodr", stack, args.binarize_cost).as_dict(),
        "xnidr": flops.cost_report(cfg, "xnidr", stack, args.binarize_cost).as_dict(),
    }


def cmd_forward(args) -> dict:
    weights = load_weights(args.weights)["W"]
    primary = load_weights(args.input)["primary"]
    if weights.ndim != 4:
        raise ShapeError(f"tensor W must be [caps_in, caps_out, dim_in, dim_out], got {weights.shape}")
    if primary.ndim != 3 or primary.shape[1:] != (weights.shape[0], weights.shape[2]):
        raise ShapeError(f"tensor primary {primary.shape} does not match tensor W {weights.shape}")
    base = _layer_config(args)
    iterations = args.iterations or (base.projector.iterations if base else 3)
    cfg = ProjectorConfig(*weights.shape, iterations=iterations)
    v = LAYERS[args.layer](primary, weights, cfg)
    report = {
        "layer": args.layer,
        "config": {k: getattr(cfg, k) for k in ("caps_in", "caps_out", "dim_in", "dim_out", "iterations")},
        "scores": class_scores(v).astype(float).tolist(),
        "activated": v[:, 0, :, 0, :].astype(float).tolist(),
    }
    if args.output:
        Path(args.output).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


def cmd_train_demo(args) -> dict:
    if args.mnist_images:
        if not args.mnist_labels:
            raise UsageError("--mnist-images needs --mnist-labels")
        data = idx_load(args.mnist_images, args.mnist_labels)
        if args.samples:
            data = LabeledImages(data.images[: args.samples], data.labels[: args.samples], data.num_classes)
    else:
        data = synthetic_blobs(args.samples or 256, seed=args.seed)
    cfg = TrainConfig(layer=args.layer, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    base = _layer_config(args)
    if base is not None:
        cfg = TrainConfig(**{**cfg.__dict__, "iterations": base.projector.iterations, "loss": base.loss})
    result = train_demo(data, cfg)
    report = result.as_dict()
    report["samples"] = len(data)
    report["dataset"] = "mnist" if args.mnist_images else "synthetic-blobs"
    return report


def cmd_bench(args) -> dict:
    if args.n < 64:
        raise UsageError("--n must be at least 64")
    rng = np.random.default_rng(args.seed)
    a = rng.choice([-1.0, 1.0], args.n)
    b = rng.choice([-1.0, 1.0], args.n)
    pa, pb = PackedVector.from_signs(a), PackedVector.from_signs(b)
    la, lb = a.tolist(), b.tolist()

    def timed(fn):
        times, value = [], None
        for _ in range(args.trials):
            t0 = time.perf_counter()
            value = fn()
            times.append(time.perf_counter() - t0)
        return statistics.median(times), value

    t_packed, packed = timed(lambda: xnor_popcount_dot(pa, pb))
    t_scalar, scalar = timed(lambda: sum(x * y for x, y in zip(la, lb)))
    t_numpy, vectorised = timed(lambda: float(np.dot(a.astype(np.float32), b.astype(np.float32))))
    return {
        "n": args.n,
        "trials": args.trials,
        "correct": packed == scalar == vectorised,
        "dot": packed,
        "median_seconds": {"packed_xnor": t_packed, "scalar_float": t_scalar, "numpy_float32": t_numpy},
        "measured_speedup_vs_scalar": t_scalar / t_packed,
        "measured_speedup_vs_numpy": t_numpy / t_packed,
        "analytic_speedup": flops.generic_speedup(1, args.n, 1),
    }


def _write_idx_stream(path: Path, shape: tuple[int, ...], chunks) -> str:
    digest = hashlib.sha256()
    with open(path, "wb") as f:
        head = bytes([0, 0, 0x08, len(shape)]) + struct.pack(f">{len(shape)}I", *shape)
        f.write(head)
        digest.update(head)
        for chunk in chunks:
            raw = np.ascontiguousarray(chunk, dtype=np.uint8).tobytes()
            f.write(raw)
            digest.update(raw)
    return digest.hexdigest()


def cmd_gen_multimnist(args) -> dict:
    base = idx_load(args.images, args.labels)
    out = Path(args.out)
    n = len(base) * args.per_digit
    canvas = max(base.images.shape[1:3]) + 2 * args.shift_max
    labels = []

    def image_chunks():
        for chunk in multimnist_batches(base, args.per_digit, args.shift_max, args.seed):
            labels.append(chunk.labels.astype(np.uint8))
            yield to_idx_bytes_images(chunk)

    images_path = out.with_name(out.name + "-images.idx")
    labels_path = out.with_name(out.name + "-labels.idx")
    images_sha = _write_idx_stream(images_path, (n, canvas, canvas), image_chunks())
    labels_sha = _write_idx_stream(labels_path, (n, 2), labels)
    return {
        "base_digits": len(base),
        "per_digit": args.per_digit,
        "images": n,
        "canvas": canvas,
        "images_path": str(images_path),
        "labels_path": str(labels_path),
        "images_sha256": images_sha,
        "labels_sha256": labels_sha,
    }


def cmd_selftest(args) -> dict:
    rng = np.random.default_rng(args.seed)
    cfg = flops.DEFAULT_CONFIG
    checks = {
        "speedup_xnodr": abs(flops.speedup_xnodr(cfg) - 63.99) <= 0.01,
        "speedup_xnidr": abs(flops.speedup_xnidr(cfg) - 63.80) <= 0.01,
        "fc_resnet50": flops.fc_stack_flops(flops.FcStack.preset("resnet50-fc")) == 5_253_120,
        "fc_mobilenetv2": flops.fc_stack_flops(flops.FcStack.preset("mobilenetv2-fc")) == 1_640_960,
        "bops_to_flops": flops.bops_to_flops(40_960) == 640 and flops.bops_to_flops(81_920) == 1_280,
    }
    ok = True
    for n in (1, 7, 63, 64, 65, 1000):
        for _ in range(50):
            a, b = rng.choice([-1, 1], n), rng.choice([-1, 1], n)
            ok &= xnor_popcount_dot(PackedVector.from_signs(a), PackedVector.from_signs(b)) == int(a @ b)
    checks["xnor_dot"] = bool(ok)
    small = ProjectorConfig(3, 2, 4, 3)
    p = rng.normal(size=(2, 3, 4)).astype(np.float32)
    W = rng.normal(size=small.weight_shape).astype(np.float32)
    norms_ok = True
    for layer in LAYERS.values():
        norms_ok &= bool(np.all(class_scores(layer(p, W, small)) < 1))
    checks["squash_bound"] = norms_ok
    words = pack_bits(np.ones(65, bool))
    checks["padding_zero"] = int(words[-1]) == 1
    return {"checks": checks, "passed": all(checks.values())}


# ---------------------------------------------------------------------------
# plumbing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="emit one JSON document")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON layer config document")

    parser = argparse.ArgumentParser(prog="xncaps", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("speedup", parents=[common], help="analytic speed-up of both projectors")
    _add_projector_flags(p)
    p.add_argument("--table", action="store_true", help="compare with the published speed-up rows")
    p.set_defaults(func=cmd_speedup)

    p = sub.add_parser("flops", parents=[common], help="dense-stack FLOPs and projector cost reports")
    p.add_argument("--preset", choices=sorted(flops.FC_PRESETS))
    p.add_argument("--input", type=_positive_int)
    p.add_argument("--widths", type=_positive_int, nargs="*")
    p.add_argument("--binarize-cost", type=float, default=1.0, help="FLOPs per binarized element (unverified)")
    _add_projector_flags(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("forward", parents=[common], help="run a capsule layer on archived tensors")
    p.add_argument("--layer", choices=sorted(LAYERS), required=True)
    p.add_argument("--weights", required=True, help="archive holding tensor 'W'")
    p.add_argument("--input", required=True, help="archive holding tensor 'primary'")
    p.add_argument("--iterations", type=_positive_int)
    p.add_argument("--output", help="also write the JSON report here")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("train-demo", parents=[common], help="train a toy frontend plus capsule head")
    p.add_argument("--layer", choices=sorted(LAYERS), default="xnidr")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--samples", type=_positive_int)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--mnist-images")
    p.add_argument("--mnist-labels")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("bench", parents=[common], help="time packed XNOR dot against float dots")
    p.add_argument("--n", type=int, default=65_536)
    p.add_argument("--trials", type=_positive_int, default=20)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-multimnist", parents=[common], help="compose a MultiMNIST set from IDX files")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--per-digit", type=_positive_int, default=4)
    p.add_argument("--shift-max", type=int, default=4)
    p.set_defaults(func=cmd_gen_multimnist)

    p = sub.add_parser("selftest", parents=[common], help="quick built-in consistency checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def _human(report, prefix: str = "") -> list[str]:
    lines = []
    for key, value in report.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            lines += _human(value, name + ".")
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            for i, row in enumerate(value):
                lines += _human(row, f"{name}[{i}].")
        else:
            lines.append(f"{name}: {json.dumps(value)}")
    return lines


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.json = getattr(args, "json", False)
    args.seed = getattr(args, "seed", 0)
    args.config = getattr(args, "config", None)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        report = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"xncaps: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"xncaps: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - never crash with a traceback
        log.exception("unexpected failure")
        print(f"xncaps: internal error: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(report, sort_keys=True, indent=2))
    else:
        print("\n".join(_human(report)))
    if args.command == "selftest" and not report["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
