"""Toy-scale supervised training on synthetic image pairs."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import engine as E
from .checkpoint import Checkpoint
from .engine import DTYPE, Tensor, avg_pool2x
from .evaluation import aee, fl_rate
from .network import (ModelConfig, Variant, _format_value, forward, init_params, is_new_module, parse_pairs,
                      predict)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, tensor_name: str):
        super().__init__(f"non-finite loss at step {step}; first non-finite tensor: {tensor_name}")
        self.step = step
        self.tensor_name = tensor_name


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    max_disp: float = 8.0
    motion: str = "affine"  # affine | translation | zero
    translation: tuple = (0.0, 0.0)
    perturbation: float = 0.3


@dataclass
class SynthSample:
    i1: np.ndarray
    i2: np.ndarray
    u_gt: np.ndarray
    seed: int
    matched: np.ndarray = None


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Colour multi-scale noise in [0, 1], shape [3, h, w]."""
    img = np.zeros((3, h, w), dtype=np.float64)
    size = 4
    amp = 1.0
    while size <= max(h, w):
        coarse = rng.standard_normal((3, max(2, size * h // max(h, w)), max(2, size * w // max(h, w))))
        zoom = (1, h / coarse.shape[1], w / coarse.shape[2])
        img += amp * ndimage.zoom(coarse, zoom, order=1, mode="nearest", grid_mode=True)
        size *= 2
        amp *= 0.8
    img -= img.min()
    img /= max(img.max(), 1e-8)
    return img.astype(DTYPE)


def _flow_field(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    if cfg.motion == "zero":
        return np.zeros((2, h, w), dtype=DTYPE)
    if cfg.motion == "translation":
        tx, ty = cfg.translation
        return np.stack([np.full((h, w), tx), np.full((h, w), ty)]).astype(DTYPE)
    if cfg.motion != "affine":
        raise ValueError(f"unknown motion model {cfg.motion!r}")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs -= (w - 1) / 2.0
    ys -= (h - 1) / 2.0
    t = rng.uniform(-1.0, 1.0, size=2) * cfg.max_disp * 0.6
    angle = rng.uniform(-0.1, 0.1)
    zoom = rng.uniform(-0.08, 0.08)
    shear = rng.uniform(-0.05, 0.05, size=2)
    a = np.array([[zoom + math.cos(angle) - 1.0, -math.sin(angle) + shear[0]],
                  [math.sin(angle) + shear[1], zoom + math.cos(angle) - 1.0]])
    u = t[0] + a[0, 0] * xs + a[0, 1] * ys
    v = t[1] + a[1, 0] * xs + a[1, 1] * ys
    coarse = rng.standard_normal((2, 3, 3)) * cfg.perturbation * cfg.max_disp * 0.25
    smooth = ndimage.zoom(coarse, (1, h / 3, w / 3), order=3, mode="nearest", grid_mode=True)
    flow = np.stack([u, v]) + smooth
    peak = np.sqrt((flow ** 2).sum(axis=0)).max()
    if peak > cfg.max_disp:
        flow *= cfg.max_disp / peak
    return flow.astype(DTYPE)


def synth_sample(rng: np.random.Generator, cfg: SynthConfig = SynthConfig(), seed: int = 0) -> SynthSample:
    """A pair with ``i1(x) = i2(x + u_gt(x))``: the flow carries pixels of image 1 onto image 2.

    Image 2 is a random texture; image 1 samples it (bilinear, border clamp) at
    the flow targets. ``matched`` marks pixels whose target lies inside image 2.
    """
    i2 = _texture(rng, cfg.height, cfg.width)
    u = _flow_field(rng, cfg)
    i1 = E.grid_sample(Tensor(i2[None]), Tensor(u[None]), padding="border").data[0]
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width]
    tx, ty = xs + u[0], ys + u[1]
    matched = ((tx >= 0) & (tx <= cfg.width - 1) & (ty >= 0) & (ty <= cfg.height - 1)).astype(DTYPE)
    return SynthSample(i1=i1, i2=i2, u_gt=u, seed=seed, matched=matched)


def sample_for(seed: int, index: int, cfg: SynthConfig) -> SynthSample:
    """Sample number ``index`` of stream ``seed``; independent of generation order."""
    rng = np.random.default_rng([int(seed), int(index)])
    return synth_sample(rng, cfg, seed=int(index))


def batch_of(samples: Sequence[SynthSample]):
    i1 = np.stack([s.i1 for s in samples])
    i2 = np.stack([s.i2 for s in samples])
    u = np.stack([s.u_gt for s in samples])
    return i1, i2, u


# ---------------------------------------------------------------------------
# targets and loss


def downscale_flow(u_gt: np.ndarray, level: int) -> np.ndarray:
    """Area-average ground truth to ``level`` and express it in that level's pixels."""
    out = np.asarray(u_gt, dtype=DTYPE)
    for _ in range(level - 1):
        out = avg_pool2x(out) * DTYPE(0.5)
    return out


def confidence_target(u, u_gt) -> np.ndarray:
    """``exp(-|u_gt - u|^2)`` per pixel; a constant label, never differentiated."""
    u = u.data if isinstance(u, Tensor) else np.asarray(u)
    u_gt = u_gt.data if isinstance(u_gt, Tensor) else np.asarray(u_gt)
    diff = u_gt.astype(np.float64) - u.astype(np.float64)
    return np.exp(-(diff ** 2).sum(axis=1, keepdims=True)).astype(DTYPE)


def loss(preds: dict, u_gt: np.ndarray, level_weights: Sequence[float], conf_weight: float = 5.0,
         targets: Optional[Sequence[np.ndarray]] = None):
    """Multiscale L2 flow loss plus the confidence L2 loss.

    Confidence labels are computed from the (detached) predictions unless
    ``targets`` supplies them per level. Returns ``(total, flow_term,
    conf_term)`` as scalar tensors.
    """
    flows, confs, levels = preds["flows"], preds["confidences"], preds["levels"]
    if len(level_weights) != len(levels):
        raise ValueError(f"{len(level_weights)} level weights for {len(levels)} levels")
    flow_terms, conf_terms = [], []
    for i, (u, m, level, wl) in enumerate(zip(flows, confs, levels, level_weights)):
        gt = downscale_flow(u_gt, level)
        err = E.sub(u, Tensor(gt))
        sq = E.square(err)
        # mean over pixels of the squared norm = channel-sum / (N*H*W)
        flow_terms.append(E.scale(E.sum_all(sq), wl / (sq.shape[0] * sq.shape[2] * sq.shape[3])))
        target = Tensor(confidence_target(u, gt) if targets is None else targets[i])
        conf_terms.append(E.mean_all(E.square(E.sub(m, target))))
    flow_term = flow_terms[0]
    for t in flow_terms[1:]:
        flow_term = E.add(flow_term, t)
    conf_term = conf_terms[0]
    for t in conf_terms[1:]:
        conf_term = E.add(conf_term, t)
    total = E.add(flow_term, E.scale(conf_term, conf_weight))
    return total, flow_term, conf_term


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, params: dict, lr_for: Callable[[str], float], betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = {k: float(lr_for(k)) for k in params}
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            lr = self.lr[k]
            if g is None or lr == 0.0:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 4
    lr_new: float = 1e-3
    lr_backbone: float = 5e-4
    lr_decay_start: float = 0.6
    level_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    conf_weight: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0
    seed: int = 0
    image_size: int = 64
    max_disp: float = 8.0
    holdout_size: int = 8
    eval_every: int = 0
    log_path: str = ""

    def validate(self, model_cfg: Optional[ModelConfig] = None) -> None:
        if self.lr_new < 0 or self.lr_backbone < 0:
            raise ValueError("learning rates must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if model_cfg is not None and len(self.level_weights) != len(model_cfg.decoded_levels):
            raise ValueError(f"level_weights has {len(self.level_weights)} entries, model decodes "
                             f"{len(model_cfg.decoded_levels)} levels")

    def synth(self) -> SynthConfig:
        return SynthConfig(height=self.image_size, width=self.image_size, max_disp=self.max_disp)

    @classmethod
    def from_pairs(cls, lines) -> "TrainConfig":
        return cls(**parse_pairs(cls, lines))

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


HOLDOUT_OFFSET = 1_000_003


def holdout_set(train_cfg: TrainConfig) -> list:
    cfg = train_cfg.synth()
    return [sample_for(train_cfg.seed + HOLDOUT_OFFSET, i, cfg) for i in range(train_cfg.holdout_size)]


def evaluate(model_cfg: ModelConfig, params: dict, samples: Sequence[SynthSample]) -> dict:
    """Mean full-resolution AEE and Fl rate over ``samples`` (one image at a time)."""
    aees, fls = [], []
    for s in samples:
        u = predict(s.i1[None], s.i2[None], model_cfg, params)
        aees.append(aee(u, s.u_gt[None]))
        fls.append(fl_rate(u, s.u_gt[None]))
    return {"aee": float(np.mean(aees)), "fl": float(np.mean(fls))}


def learning_rate_scale(step: int, train_cfg: TrainConfig) -> float:
    """Constant, then cosine decay to 10% over the final part of the run."""
    total = max(train_cfg.steps, 1)
    start = train_cfg.lr_decay_start * total
    if step < start:
        return 1.0
    t = (step - start) / max(total - start, 1.0)
    return 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * t))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm`` (0 disables); returns the norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads))
    if max_norm > 0 and norm > max_norm:
        factor = DTYPE(max_norm / norm)
        for g in grads:
            g *= factor
    return norm


def _first_nonfinite(preds: dict, params: dict) -> str:
    for level, u, m in zip(preds["levels"], preds["flows"], preds["confidences"]):
        if not np.isfinite(u.data).all():
            return f"flow at level {level}"
        if not np.isfinite(m.data).all():
            return f"confidence at level {level}"
    for k, p in params.items():
        if not np.isfinite(p.data).all():
            return k
    return "loss"


class MetricsLog:
    """Append-only line-delimited JSON records."""

    def __init__(self, path: str = ""):
        self.path = path
        self.records: list = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, init: Optional[dict] = None,
          metrics: Optional[MetricsLog] = None) -> Checkpoint:
    train_cfg.validate(model_cfg)
    metrics = metrics if metrics is not None else MetricsLog(train_cfg.log_path)
    params = init if init is not None else init_params(model_cfg, seed=train_cfg.seed)
    base_lr = {k: (train_cfg.lr_new if is_new_module(k) else train_cfg.lr_backbone) for k in params}
    opt = Adam(params, lambda k: base_lr[k], betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.eps)
    synth_cfg = train_cfg.synth()
    holdout = holdout_set(train_cfg) if train_cfg.holdout_size else []
    init_eval = evaluate(model_cfg, params, holdout) if holdout else None
    if init_eval:
        metrics.write({"step": 0, "loss": None, "flow_loss": None, "conf_loss": None,
                       "holdout_aee": init_eval["aee"]})

    started = time.perf_counter()
    for step in range(train_cfg.steps):
        samples = [sample_for(train_cfg.seed, step * train_cfg.batch_size + b, synth_cfg)
                   for b in range(train_cfg.batch_size)]
        i1, i2, u = batch_of(samples)
        preds = forward(Tensor(i1), Tensor(i2), model_cfg, params)
        total, flow_term, conf_term = loss(preds, u, train_cfg.level_weights, train_cfg.conf_weight)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, _first_nonfinite(preds, params))
        opt.zero_grad()
        E.backward(total)
        norm = clip_grad_norm(params.values(), train_cfg.grad_clip)
        log.debug("step %d loss %.4f grad_norm %.3f", step + 1, value, norm)
        scale = learning_rate_scale(step, train_cfg)
        for k in opt.lr:
            opt.lr[k] = base_lr[k] * scale
        opt.step()

        last = step + 1 == train_cfg.steps
        if (train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0) or last:
            record = {"step": step + 1, "loss": value, "flow_loss": flow_term.item(),
                      "conf_loss": conf_term.item(),
                      "holdout_aee": evaluate(model_cfg, params, holdout)["aee"] if holdout else None}
            metrics.write(record)
            log.info("step %d loss %.4f holdout_aee %s (%.1fs)", step + 1, value,
                     record["holdout_aee"], time.perf_counter() - started)

    extra = {"init_holdout_aee": init_eval["aee"] if init_eval else None}
    return Checkpoint(config=model_cfg, params={k: p.data.copy() for k, p in params.items()},
                      step=train_cfg.steps, seed=train_cfg.seed, extra=extra)


# ---------------------------------------------------------------------------
# ablation


ABLATION_VARIANTS = (Variant.NO, Variant.CM_MINUS, Variant.CMFD_MINUS, Variant.CM, Variant.CMFD)
ABLATION_COLUMNS = ("variant", "cost_volume_modulation", "flow_field_deformation", "confidence_map",
                    "holdout_aee", "holdout_fl_all", "init_holdout_aee", "seeds")


def run_ablation(base_cfg: ModelConfig, train_cfg: TrainConfig, variants=ABLATION_VARIANTS,
                 seeds: Sequence[int] = (0,)) -> list:
    """Train every variant under each shared seed; one row per variant (medians over seeds)."""
    rows = []
    for variant in variants:
        variant = Variant.parse(variant)
        cfg = base_cfg.replace(variant=variant)
        aees, fls, inits = [], [], []
        for seed in seeds:
            tc = dataclasses.replace(train_cfg, seed=int(seed))
            ckpt = train(cfg, tc)
            params = ckpt.tensors(requires_grad=False)
            result = evaluate(cfg, params, holdout_set(tc))
            aees.append(result["aee"])
            fls.append(result["fl"])
            inits.append(ckpt.extra.get("init_holdout_aee"))
        rows.append({
            "variant": variant.label,
            "cost_volume_modulation": variant.modulation,
            "flow_field_deformation": variant.deformation,
            "confidence_map": variant.confidence,
            "holdout_aee": float(np.median(aees)),
            "holdout_fl_all": float(np.median(fls)),
            "init_holdout_aee": float(np.median([x for x in inits if x is not None])) if any(
                x is not None for x in inits) else float("nan"),
            "seeds": " ".join(str(s) for s in seeds),
            "per_seed_aee": aees,
        })
    return rows
