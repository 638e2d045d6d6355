"""Convolution stacks and seeded weight initialisation shared by the network parts."""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

from .engine import DTYPE, ConvParams, Tensor, conv2d, leaky_relu


def param_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per blob name: variants that share a blob name share its initial value
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def init_conv(params: dict, prefix: str, c_in: int, c_out: int, k: int, *, seed: int,
              slope: float = 0.1, zero: bool = False) -> None:
    """Register ``prefix.weight`` / ``prefix.bias`` in ``params``.

    Kernels are uniform in ``[-b, b]`` with ``b = sqrt(6 / ((1 + slope^2) * fan_in))``;
    biases start at zero. ``zero=True`` zeroes the kernel as well.
    """
    shape = (c_out, c_in, k, k)
    if zero:
        kernel = np.zeros(shape, dtype=DTYPE)
    else:
        fan_in = c_in * k * k
        bound = np.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
        kernel = param_rng(seed, prefix + ".weight").uniform(-bound, bound, size=shape).astype(DTYPE)
    params[prefix + ".weight"] = Tensor(kernel, requires_grad=True, name=prefix + ".weight")
    params[prefix + ".bias"] = Tensor(np.zeros((1, c_out, 1, 1), dtype=DTYPE), requires_grad=True,
                                      name=prefix + ".bias")


def conv_layer(params: dict, prefix: str, stride: int = 1) -> ConvParams:
    kernel = params[prefix + ".weight"]
    k = kernel.shape[2]
    return ConvParams(kernel, params[prefix + ".bias"], stride=stride, padding=(k - 1) // 2)


def run_stack(x: Tensor, layers: Sequence[ConvParams], slope: float = 0.1) -> Tensor:
    """Apply ``layers`` in order with a leaky ReLU after every layer except the last."""
    for i, layer in enumerate(layers):
        x = conv2d(x, layer)
        if i < len(layers) - 1:
            x = leaky_relu(x, slope)
    return x


def init_stack(params: dict, prefix: str, c_in: int, hidden: Sequence[int], c_out: int, *,
               seed: int, slope: float = 0.1, last_kernel: int = 3, zero_last: bool = True) -> None:
    """Hidden 3x3 layers then an output layer of size ``last_kernel``, registered as ``prefix.0..``."""
    widths = [c_in, *hidden]
    for i in range(len(hidden)):
        init_conv(params, f"{prefix}.{i}", widths[i], widths[i + 1], 3, seed=seed, slope=slope)
    init_conv(params, f"{prefix}.{len(hidden)}", widths[-1], c_out, last_kernel, seed=seed,
              slope=slope, zero=zero_last)


def stack_layers(params: dict, prefix: str) -> list[ConvParams]:
    layers = []
    i = 0
    while f"{prefix}.{i}.weight" in params:
        layers.append(conv_layer(params, f"{prefix}.{i}"))
        i += 1
    if not layers:
        raise KeyError(f"no convolution stack registered under {prefix!r}")
    return layers
