"""Central finite-difference checks of every differentiable op.

The scalar probed is ``sum(w * op(inputs))`` for a fixed random positive
cotangent ``w``; it is accumulated in float64 so the only float32 noise left
in a difference quotient comes from the op's own outputs. Inputs are drawn so
that no coordinate sits within ``eps`` of a kink (ReLU zero, integer sample
positions) and gradients stay away from zero, where the relative measure is
meaningless.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import engine as E
from .cost_volume import auto_correlation, correlation
from .deformation import deform_flow, generate_displacement
from .engine import DTYPE, ConvParams, Tensor
from .modulation import ModulationTensors, generate_modulation, modulate

EPS = 1e-3
TOLERANCE = 1e-2


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    elements: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(1e-6, np.abs(n))))


def numeric_gradient(fn: Callable, inputs: Dict[str, np.ndarray], wrt: str, weights: np.ndarray,
                     eps: float = EPS) -> np.ndarray:
    base = {k: v.astype(DTYPE).copy() for k, v in inputs.items()}
    w64 = weights.astype(np.float64)
    target = base[wrt]
    grad = np.zeros(target.shape, dtype=np.float64)
    flat = target.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + DTYPE(eps)
        plus = (w64 * fn({k: Tensor(v) for k, v in base.items()}).data).sum()
        flat[i] = orig - DTYPE(eps)
        minus = (w64 * fn({k: Tensor(v) for k, v in base.items()}).data).sum()
        flat[i] = orig
        step = float(np.float64(orig + DTYPE(eps)) - np.float64(orig - DTYPE(eps)))
        grad.reshape(-1)[i] = (plus - minus) / step
    return grad


def analytic_gradients(fn: Callable, inputs: Dict[str, np.ndarray], weights: np.ndarray) -> dict:
    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    out = fn(leaves)
    E.backward(E.sum_all(E.mul(out, Tensor(weights))))
    return {k: (t.grad if t.grad is not None else np.zeros(t.shape, DTYPE)) for k, t in leaves.items()}


def check(name: str, fn: Callable, inputs: Dict[str, np.ndarray], seed: int = 0,
          eps: float = EPS) -> GradCheckResult:
    started = time.perf_counter()
    probe = fn({k: Tensor(v) for k, v in inputs.items()})
    weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=probe.shape).astype(DTYPE)
    analytic = analytic_gradients(fn, inputs, weights)
    worst, count = 0.0, 0
    for k in inputs:
        numeric = numeric_gradient(fn, inputs, k, weights, eps)
        worst = max(worst, relative_error(analytic[k], numeric))
        count += numeric.size
    return GradCheckResult(name, worst, count, time.perf_counter() - started)


# ---------------------------------------------------------------------------
# the shipped suite


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    mag = rng.uniform(lo, hi, size=shape)
    return (mag * rng.choice([-1.0, 1.0], size=shape)).astype(DTYPE)


def _fractional_offsets(rng, shape, reach=1):
    whole = rng.integers(-reach, reach + 1, size=shape)
    frac = rng.uniform(0.1, 0.9, size=shape)
    return (whole + frac).astype(DTYPE)


def _ramp(rng, shape):
    """Positive field with clear spatial slopes so sampling gradients are not near zero."""
    n, c, h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    base = 1.0 + 0.6 * xs + 0.35 * ys + 0.15 * xs * ys / max(h, w)
    chan = rng.uniform(0.5, 1.5, size=(n, c, 1, 1))
    return (chan * base[None, None] + rng.uniform(0, 0.05, size=shape)).astype(DTYPE)


def _positive(rng, shape, lo=0.5, hi=1.5):
    return rng.uniform(lo, hi, size=shape).astype(DTYPE)


def _stack_fn(kind: str, n_layers: int, last_k: int):
    def run(t):
        layers = [ConvParams(t[f"k{i}"], t[f"b{i}"], 1, (t[f"k{i}"].shape[2] - 1) // 2) for i in range(n_layers)]
        if kind == "modulation":
            mt = generate_modulation(t["c"], t["f1"], t["m"], layers)
            return E.concat([mt.alpha, mt.beta])
        return generate_displacement(t["ca"], t["m"], layers)
    return run


def _stack_inputs(rng, c_in: int, widths: List[int], c_out: int, last_k: int, prefix_inputs: dict):
    inputs = dict(prefix_inputs)
    chans = [c_in, *widths, c_out]
    for i in range(len(chans) - 1):
        k = last_k if i == len(chans) - 2 else 3
        fan = chans[i] * k * k
        inputs[f"k{i}"] = rng.uniform(0.5, 1.5, size=(chans[i + 1], chans[i], k, k)).astype(DTYPE) / fan
        inputs[f"b{i}"] = rng.uniform(0.0, 0.01, size=(1, chans[i + 1], 1, 1)).astype(DTYPE)
    return inputs


def suite(seed: int = 0) -> list:
    """(name, fn, inputs) cases covering every differentiable op on <= 1x4x6x6 inputs."""
    rng = np.random.default_rng(seed)
    shape = (1, 4, 6, 6)
    cases = []

    cases.append(("conv2d", lambda t: E.conv2d(t["x"], ConvParams(t["k"], t["b"], 1, 1)),
                  {"x": _positive(rng, shape), "k": _positive(rng, (3, 4, 3, 3)),
                   "b": _positive(rng, (1, 3, 1, 1))}))
    cases.append(("conv2d_stride2", lambda t: E.conv2d(t["x"], ConvParams(t["k"], t["b"], 2, 1)),
                  {"x": _positive(rng, shape), "k": _positive(rng, (2, 4, 3, 3)),
                   "b": _positive(rng, (1, 2, 1, 1))}))
    cases.append(("leaky_relu", lambda t: E.leaky_relu(t["x"], 0.1), {"x": _away_from_zero(rng, shape)}))
    cases.append(("sigmoid", lambda t: E.sigmoid(t["x"]), {"x": _away_from_zero(rng, shape, 0.0, 2.0)}))
    cases.append(("upsample2x", lambda t: E.upsample2x(t["x"]), {"x": _positive(rng, shape)}))
    cases.append(("grid_sample_zeros", lambda t: E.grid_sample(t["x"], t["o"], "zeros"),
                  {"x": _ramp(rng, shape), "o": _fractional_offsets(rng, (1, 2, 6, 6))}))
    cases.append(("grid_sample_border", lambda t: E.grid_sample(t["x"], t["o"], "border"),
                  {"x": _ramp(rng, shape), "o": _fractional_offsets(rng, (1, 2, 6, 6))}))
    cases.append(("correlation", lambda t: correlation(t["a"], t["b"], 2),
                  {"a": _positive(rng, shape), "b": _positive(rng, shape)}))
    cases.append(("auto_correlation", lambda t: auto_correlation(t["a"], 2), {"a": _positive(rng, shape)}))
    cases.append(("modulate", lambda t: modulate(t["c"], ModulationTensors(t["alpha"], t["beta"])),
                  {"c": _positive(rng, shape), "alpha": _positive(rng, shape), "beta": _positive(rng, shape)}))
    cases.append(("deform_flow", lambda t: deform_flow(t["u"], t["d"]),
                  {"u": _ramp(rng, (1, 2, 6, 6)), "d": _fractional_offsets(rng, (1, 2, 6, 6))}))

    # small positive activations keep every unit on the same ReLU side and keep
    # outputs (hence their float32 rounding) small relative to input gradients
    mod_in = {"c": _positive(rng, shape, 0.05, 0.15), "f1": _positive(rng, (1, 4, 6, 6), 0.05, 0.15),
              "m": _positive(rng, (1, 1, 6, 6), 0.05, 0.15)}
    cases.append(("generate_modulation", _stack_fn("modulation", 4, 5),
                  _stack_inputs(rng, 9, [4, 4, 4], 8, 5, mod_in)))
    disp_in = {"ca": _positive(rng, shape, 0.05, 0.15), "m": _positive(rng, (1, 1, 6, 6), 0.05, 0.15)}
    cases.append(("generate_displacement", _stack_fn("displacement", 4, 3),
                  _stack_inputs(rng, 5, [4, 4, 4], 2, 3, disp_in)))

    loss_fn, loss_inputs = _loss_case(rng)
    cases.append(("loss", loss_fn, loss_inputs))
    return cases


def _loss_case(rng):
    """Two-level loss on 2x2 / 4x4 flows with residuals of 0.6-0.8 px per component.

    The confidence labels are detached, so the difference quotient must hold
    them at their base value; they are computed once here and passed in.
    """
    from .training import confidence_target, loss

    g2 = rng.uniform(-2.0, 2.0, size=(1, 2, 4, 4))
    gt = np.repeat(np.repeat(2.0 * g2, 2, axis=2), 2, axis=3).astype(DTYPE)
    g3 = g2.reshape(1, 2, 2, 2, 2, 2).mean(axis=(3, 5)) / 2.0
    inputs = {"u3": (g3 + _away_from_zero(rng, g3.shape, 0.6, 0.8)).astype(DTYPE),
              "u2": (g2 + _away_from_zero(rng, g2.shape, 0.6, 0.8)).astype(DTYPE),
              "z3": _positive(rng, (1, 1, 2, 2), 0.4, 1.4),
              "z2": _positive(rng, (1, 1, 4, 4), 0.4, 1.4)}
    from .training import downscale_flow
    targets = [confidence_target(inputs["u3"], downscale_flow(gt, 3)),
               confidence_target(inputs["u2"], downscale_flow(gt, 2))]

    def run(t):
        preds = {"flows": [t["u3"], t["u2"]], "levels": [3, 2],
                 "confidences": [E.sigmoid(t["z3"]), E.sigmoid(t["z2"])]}
        total, _, _ = loss(preds, gt, [0.7, 1.3], conf_weight=5.0, targets=targets)
        return total

    return run, inputs


def run_suite(seed: int = 0) -> list:
    return [check(name, fn, inputs, seed=seed) for name, fn, inputs in suite(seed)]
