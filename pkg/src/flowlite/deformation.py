"""Flow-field deformation.

A displacement field decoded from the first image's self-similarity volume
and the confidence map tells every pixel where to borrow its flow from;
``deform_flow`` then resamples the flow at those locations.
"""

from __future__ import annotations

from typing import Sequence

from .engine import ConvParams, ShapeError, Tensor, concat, grid_sample
from .layers import run_stack


def generate_displacement(ca: Tensor, m: Tensor, weights: Sequence[ConvParams],
                          slope: float = 0.1) -> Tensor:
    for ax, label in ((0, "N"), (2, "H"), (3, "W")):
        if ca.shape[ax] != m.shape[ax]:
            raise ShapeError(f"confidence axis {label} is {m.shape[ax]}, volume has {ca.shape[ax]}", axis=label)
    if weights[-1].out_channels != 2:
        raise ShapeError(f"displacement generator must emit 2 channels, has {weights[-1].out_channels}",
                         axis="C")
    return run_stack(concat([ca, m]), weights, slope)


def deform_flow(u: Tensor, d: Tensor) -> Tensor:
    """``u_d(x) = u(x + d(x))`` with border clamping."""
    if d.shape[1] != 2:
        raise ShapeError(f"displacement field needs 2 channels, got {d.shape[1]}", axis="C")
    if u.shape != d.shape:
        raise ShapeError(f"flow {u.shape} and displacement {d.shape} differ", axis="H")
    return grid_sample(u, d, padding="border")
