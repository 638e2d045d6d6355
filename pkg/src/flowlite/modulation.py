"""Cost-volume modulation: a per-pixel, per-channel affine amendment of the cost volume.

A small convolutional generator reads the cost volume, the first-image
features and the confidence map of the previous level and emits
``(alpha, beta)`` with the same shape as the volume. The generator's last
layer starts at zero and ``alpha`` is parameterised as ``1 + residual``, so
a fresh generator leaves the volume untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .engine import ConvParams, ShapeError, Tensor, add, concat, mul, split_channels
from .layers import run_stack


@dataclass
class ModulationTensors:
    alpha: Tensor
    beta: Tensor


def _check_spatial(name: str, ref: Tensor, other: Tensor) -> None:
    for ax, label in ((0, "N"), (2, "H"), (3, "W")):
        if ref.shape[ax] != other.shape[ax]:
            raise ShapeError(f"{name}: axis {label} is {other.shape[ax]}, cost volume has {ref.shape[ax]}",
                             axis=label)


def generate_modulation(c: Tensor, f1: Tensor, m: Tensor, weights: Sequence[ConvParams],
                        slope: float = 0.1) -> ModulationTensors:
    _check_spatial("features", c, f1)
    _check_spatial("confidence", c, m)
    k = c.shape[1]
    if weights[-1].out_channels != 2 * k:
        raise ShapeError(f"generator emits {weights[-1].out_channels} channels, need {2 * k}", axis="C")
    out = run_stack(concat([c, f1, m]), weights, slope)
    alpha_res, beta = split_channels(out, [k, k])
    return ModulationTensors(alpha=add(alpha_res, 1.0), beta=beta)


def modulate(c: Tensor, mt: ModulationTensors) -> Tensor:
    """``alpha * c + beta`` elementwise; output shape equals the input volume's."""
    if mt.alpha.shape != c.shape or mt.beta.shape != c.shape:
        raise ShapeError(f"modulation tensors {mt.alpha.shape}/{mt.beta.shape} do not match volume {c.shape}",
                         axis="C")
    return add(mul(mt.alpha, c), mt.beta)
