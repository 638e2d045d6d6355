"""``flowlite`` command line: train, infer, eval, viz, gradcheck, ablate.

Configuration is flat ``key=value`` text (``--config FILE``) with ``--set
key=value`` overrides on top, then the dedicated flags. Keys are routed to the
model or the training config; anything else is rejected. When no seed is
given anywhere, ``FLOWLITE_SEED`` supplies it.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path

import cv2
import numpy as np

from . import checkpoint as ckpt_io
from .evaluation import region_report, report_csv
from .flowio import (FlowFormatError, flow_to_color, read_flo, read_kitti_png, write_color_png,
                     write_flo)
from .gradcheck import run_suite
from .network import ModelConfig, Variant, parse_pairs, predict
from .training import ABLATION_COLUMNS, MetricsLog, TrainConfig, run_ablation, train

log = logging.getLogger("flowlite")

SEED_ENV = "FLOWLITE_SEED"
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config resolution


def _read_pairs(path) -> list:
    if not path:
        return []
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def resolve_configs(args) -> tuple:
    """(ModelConfig, TrainConfig) from file, ``--set`` overrides, flags and the seed fallback."""
    lines = _read_pairs(getattr(args, "config", None)) + list(getattr(args, "set", None) or [])
    model_lines, train_lines = [], []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"expected key=value, got {line!r}")
        key = line.split("=", 1)[0].strip()
        if key in MODEL_KEYS:
            model_lines.append(line)
        elif key in TRAIN_KEYS:
            train_lines.append(line)
        else:
            known = ", ".join(sorted(MODEL_KEYS | TRAIN_KEYS))
            raise UsageError(f"unknown config key {key!r}; known keys: {known}")
    try:
        model_kw = parse_pairs(ModelConfig, model_lines)
        train_kw = parse_pairs(TrainConfig, train_lines)
        if getattr(args, "variant", None):
            model_kw["variant"] = args.variant
        if getattr(args, "steps", None) is not None:
            train_kw["steps"] = args.steps
        if getattr(args, "seed", None) is not None:
            train_kw["seed"] = args.seed
        elif "seed" not in train_kw and os.environ.get(SEED_ENV):
            train_kw["seed"] = int(os.environ[SEED_ENV])
        if getattr(args, "metrics", None):
            train_kw["log_path"] = args.metrics
        model_cfg = ModelConfig(**model_kw)
        if "level_weights" not in train_kw:
            train_kw["level_weights"] = [1.0] * len(model_cfg.decoded_levels)
        train_cfg = TrainConfig(**train_kw)
        train_cfg.validate(model_cfg)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip('"')) from exc
    return model_cfg, train_cfg


def _log_config(model_cfg: ModelConfig, train_cfg: TrainConfig = None) -> None:
    log.info("resolved model config:\n%s", model_cfg.to_text().rstrip())
    if train_cfg is not None:
        log.info("resolved train config:\n%s", train_cfg.to_text().rstrip())


def _seed_only(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get(SEED_ENV, "0"))


# ---------------------------------------------------------------------------
# file helpers


def load_image(path) -> np.ndarray:
    """``[1, 3, H, W]`` float32 in [0, 1] from ``.npy`` (HxWx3 or 3xHxW) or any OpenCV-readable image."""
    path = os.fspath(path)
    if path.endswith(".npy"):
        arr = np.load(path).astype(np.float32)
        if arr.ndim == 4 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim == 3 and arr.shape[0] != 3 and arr.shape[2] == 3:
            arr = arr.transpose(2, 0, 1)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise UsageError(f"{path}: expected a 3-channel image, got shape {arr.shape}")
        return arr[None]
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise UsageError(f"cannot read image {path}")
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return (img[:, :, ::-1].astype(np.float32) / np.float32(scale)).transpose(2, 0, 1)[None].copy()


def load_flow(path):
    """(flow [1,2,H,W] array, valid mask or None) from ``.flo``, KITTI ``.png`` or ``.npy``."""
    path = os.fspath(path)
    if path.endswith(".flo"):
        flow, valid = read_flo(path, with_mask=True)
        return flow.data, valid.data
    if path.endswith(".png"):
        flow, valid = read_kitti_png(path)
        return flow.data, valid.data
    if path.endswith(".npy"):
        arr = np.load(path).astype(np.float32)
        return (arr if arr.ndim == 4 else arr[None]), None
    raise UsageError(f"{path}: unsupported flow format (use .flo, .png or .npy)")


def load_mask(path) -> np.ndarray:
    path = os.fspath(path)
    if path.endswith(".npy"):
        m = np.load(path)
    else:
        m = cv2.imread(path, cv2.IMREAD_UNCHANGED)
        if m is None:
            raise UsageError(f"cannot read mask {path}")
        if m.ndim == 3:
            m = m[:, :, 0]
    m = np.asarray(m)
    while m.ndim < 4:
        m = m[None]
    return (m != 0).astype(np.float32)


def pad_to_multiple(img: np.ndarray, divisor: int) -> tuple:
    """Reflect-pad the bottom/right of ``[N, C, H, W]`` to multiples of ``divisor``."""
    h, w = img.shape[2:]
    ph, pw = (-h) % divisor, (-w) % divisor
    if ph == 0 and pw == 0:
        return img, (h, w)
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode), (h, w)


def infer_flow(i1: np.ndarray, i2: np.ndarray, cfg: ModelConfig, params: dict) -> np.ndarray:
    if i1.shape != i2.shape:
        raise UsageError(f"image sizes differ: {i1.shape[2:]} vs {i2.shape[2:]}")
    p1, (h, w) = pad_to_multiple(i1, cfg.divisor)
    p2, _ = pad_to_multiple(i2, cfg.divisor)
    flow = predict(p1, p2, cfg, params)
    return np.ascontiguousarray(flow[:, :, :h, :w])


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    model_cfg, train_cfg = resolve_configs(args)
    _log_config(model_cfg, train_cfg)
    if train_cfg.log_path:
        Path(train_cfg.log_path).parent.mkdir(parents=True, exist_ok=True)
    result = train(model_cfg, train_cfg, metrics=MetricsLog(train_cfg.log_path))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ckpt_io.save(args.out, result)
    log.info("wrote checkpoint %s (step %d)", args.out, result.step)
    return 0


def cmd_infer(args) -> int:
    ck = ckpt_io.load(args.checkpoint)
    _log_config(ck.config)
    params = ck.tensors(requires_grad=False)
    flow = infer_flow(load_image(args.image1), load_image(args.image2), ck.config, params)
    write_flo(args.out, flow)
    log.info("wrote %s (%dx%d)", args.out, flow.shape[3], flow.shape[2])
    if args.color:
        write_color_png(args.color, flow_to_color(flow, args.max_mag))
        log.info("wrote %s", args.color)
    return 0


def cmd_eval(args) -> int:
    u, _ = load_flow(args.flow)
    u_gt, valid = load_flow(args.gt)
    if u.shape != u_gt.shape:
        raise UsageError(f"flow shapes differ: {u.shape} vs {u_gt.shape}")
    masks = {}
    for item in args.mask or []:
        if "=" not in item:
            raise UsageError(f"--mask expects name=path, got {item!r}")
        name, path = item.split("=", 1)
        m = load_mask(path)
        if m.shape[2:] != u.shape[2:]:
            raise UsageError(f"mask {name} has extents {m.shape[2:]}, flow has {u.shape[2:]}")
        masks[name] = m
    rows = region_report(u, u_gt, masks, valid=valid)
    _write_text(args.out, report_csv(rows))
    return 0


def cmd_viz(args) -> int:
    u, _ = load_flow(args.flow)
    write_color_png(args.out, flow_to_color(u, args.max_mag))
    log.info("wrote %s", args.out)
    return 0


def cmd_gradcheck(args) -> int:
    seed = _seed_only(args)
    log.info("resolved config: seed=%d", seed)
    results = run_suite(seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} max_rel_error={r.max_rel_error:.3e}  "
              f"elements={r.elements}  {r.seconds:.2f}s")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for r in rows:
        out = []
        for col in ABLATION_COLUMNS:
            v = r[col]
            if isinstance(v, bool):
                v = "yes" if v else "no"
            elif isinstance(v, float):
                v = f"{v:.6f}"
            out.append(v)
        writer.writerow(out)
    return buf.getvalue()


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = resolve_configs(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [train_cfg.seed]
    variants = [Variant.parse(v) for v in args.variants.split(",")] if args.variants else None
    _log_config(model_cfg, train_cfg)
    log.info("ablation seeds: %s", seeds)
    kwargs = {"variants": variants} if variants else {}
    rows = run_ablation(model_cfg, train_cfg, seeds=seeds, **kwargs)
    _write_text(args.out, ablation_csv(rows))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help=f"random seed (fallback: ${SEED_ENV}, then 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowlite", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic pairs and write a checkpoint")
    _add_config_args(p)
    p.add_argument("--variant", help=f"one of {', '.join(v.label for v in Variant)}")
    p.add_argument("--steps", type=int)
    p.add_argument("--metrics", help="append JSON-lines metrics here")
    p.add_argument("--out", default="flowlite.ckpt", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="estimate flow between two images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image1")
    p.add_argument("image2")
    p.add_argument("--out", default="flow.flo")
    p.add_argument("--color", help="also write a colour-coded PNG")
    p.add_argument("--max-mag", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="per-region AEE / Fl report as CSV")
    p.add_argument("flow")
    p.add_argument("gt")
    p.add_argument("--mask", action="append", metavar="NAME=PATH", help="named region mask (repeatable)")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render a flow file as a colour PNG")
    p.add_argument("flow")
    p.add_argument("--out", default="flow.png")
    p.add_argument("--max-mag", type=float)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the ablation variants and tabulate held-out errors")
    _add_config_args(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--seeds", help="comma-separated shared seeds")
    p.add_argument("--variants", help="comma-separated subset (default NO,CM-,CMFD-,CM,CMFD)")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ckpt_io.CheckpointError, FlowFormatError, OSError) as exc:
        print(f"flowlite {args.command}: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ValueError) as exc:
        print(f"flowlite {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
