"""Coarse-to-fine pyramid flow network with optional modulation / deformation modules.

Level ``k`` works at ``1 / 2**(k-1)`` of the input resolution and expresses
flow in that level's pixels. Decoding starts at the coarsest level with zero
flow; between levels the flow is upsampled and doubled, optionally deformed,
and then refined by the next decoder.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine as E
from .cost_volume import auto_correlation, correlation, num_channels
from .deformation import deform_flow, generate_displacement
from .engine import ShapeError, Tensor
from .layers import conv_layer, init_conv, init_stack, stack_layers
from .modulation import generate_modulation, modulate

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    NO = "NO"
    FF = "FF"
    CM = "CM"
    CM_MINUS = "CM_MINUS"
    CMFD = "CMFD"
    CMFD_MINUS = "CMFD_MINUS"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, Variant):
            return value
        text = str(value).strip().upper()
        if text.endswith("-"):
            text = text[:-1] + "_MINUS"
        try:
            return cls(text)
        except ValueError:
            valid = ", ".join(v.label for v in cls)
            raise ValueError(f"unknown variant {value!r}; valid variants: {valid}") from None

    @property
    def modulation(self) -> bool:
        return self in (Variant.CM, Variant.CM_MINUS, Variant.CMFD, Variant.CMFD_MINUS)

    @property
    def deformation(self) -> bool:
        return self in (Variant.CMFD, Variant.CMFD_MINUS)

    @property
    def confidence(self) -> bool:
        """Whether the modules see the predicted confidence (the "-" variants see a constant)."""
        return self in (Variant.CM, Variant.CMFD)

    @property
    def feed_forward(self) -> bool:
        return self is Variant.FF

    @property
    def label(self) -> str:
        return self.value.replace("_MINUS", "-")


@dataclass
class ModelConfig:
    num_levels: int = 5
    radius_per_level: list = field(default_factory=lambda: [3, 3, 3, 3, 3])
    variant: Variant = Variant.NO
    weight_sharing: bool = False
    encoder_widths: list = field(default_factory=lambda: [16, 24, 32, 32, 32])
    decoder_widths: list = field(default_factory=lambda: [48, 48, 32, 32])
    generator_widths: list = field(default_factory=lambda: [32, 32, 32])
    leaky_slope: float = 0.1
    finest_level: int = 2
    skip_coarsest_modules: bool = True
    skip_finest_modules: bool = True
    large_kernel_levels: list = field(default_factory=lambda: [4, 3])

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.validate()

    @classmethod
    def full_size(cls, **overrides) -> "ModelConfig":
        """Six levels at full-size widths, for parameter-count comparisons.

        The backbone widths are picked so that the decoder input added by FF
        costs about as much as the modulation generators at their fixed widths.
        """
        base = dict(
            num_levels=6,
            radius_per_level=[3, 3, 3, 3, 3, 3],
            encoder_widths=[16, 32, 96, 128, 192, 256],
            decoder_widths=[192, 128, 64, 32],
            generator_widths=[128, 96, 64],
            large_kernel_levels=[4, 3],
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        L = self.num_levels
        if L < 2:
            raise ValueError("num_levels must be at least 2")
        for name in ("radius_per_level", "encoder_widths"):
            if len(getattr(self, name)) != L:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, num_levels is {L}")
        if not 1 <= self.finest_level <= L:
            raise ValueError(f"finest_level must lie in [1, {L}]")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if any(r < 0 for r in self.radius_per_level):
            raise ValueError("radii must be non-negative")
        if self.weight_sharing:
            dec = self.decoded_levels
            if len({self.radius(k) for k in dec}) != 1:
                raise ValueError("weight sharing needs one radius across decoded levels")
            if self.variant.feed_forward and len({self.encoder_width(k) for k in dec}) != 1:
                raise ValueError("weight sharing with FF needs equal encoder widths across decoded levels")
            mods = self.module_levels
            if self.variant.modulation and len({self.encoder_width(k) for k in mods}) > 1:
                raise ValueError("weight sharing with CM needs equal encoder widths across module levels")
            if len({k in self.large_kernel_levels for k in mods}) > 1:
                raise ValueError("weight sharing needs one final kernel size across module levels")

    # level bookkeeping
    def radius(self, level: int) -> int:
        return self.radius_per_level[level - 1]

    def encoder_width(self, level: int) -> int:
        return self.encoder_widths[level - 1]

    @property
    def decoded_levels(self) -> list:
        return list(range(self.num_levels, self.finest_level - 1, -1))

    @property
    def module_levels(self) -> list:
        levels = self.decoded_levels
        if self.skip_coarsest_modules:
            levels = [k for k in levels if k != self.num_levels]
        if self.skip_finest_modules:
            levels = [k for k in levels if k != self.finest_level]
        return levels

    def uses_modules(self, level: int) -> bool:
        return level in self.module_levels

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_levels - 1)

    def tag(self, level: int) -> str:
        return "shared" if self.weight_sharing else f"l{level}"

    # canonical key=value text
    def to_text(self) -> str:
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls(**parse_pairs(cls, text.splitlines()))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _format_value(v) -> str:
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(kind: str, raw: str):
    raw = raw.strip()
    if kind == "list":
        if raw == "":
            return []
        return [int(x) if x.strip().lstrip("-").isdigit() else float(x) for x in raw.split(",")]
    if kind == "bool":
        lowered = raw.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return lowered in ("true", "1", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _field_kind(f: dataclasses.Field) -> str:
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    t = str(t).lower()
    for kind in ("list", "bool", "int", "float"):
        if t.startswith(kind):
            return kind
    return "str"


def parse_pairs(cls, lines) -> dict:
    """Parse ``key=value`` lines into constructor kwargs for dataclass ``cls``; unknown keys raise."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise KeyError(f"unknown {cls.__name__} key {key!r}; known keys: {', '.join(sorted(fields))}")
        out[key] = _coerce(_field_kind(fields[key]), raw)
    return out


# ---------------------------------------------------------------------------
# parameters


def decoder_input_channels(cfg: ModelConfig, level: int) -> int:
    c = num_channels(cfg.radius(level))
    if cfg.variant.feed_forward:
        c += cfg.encoder_width(level) + 2 + cfg.decoder_widths[-1]
    return c


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh weights for ``cfg``; every residual head (flow, alpha/beta, displacement) starts at zero."""
    p: dict = {}
    a = cfg.leaky_slope
    widths = [3] + list(cfg.encoder_widths)
    for k in range(1, cfg.num_levels + 1):
        c_in, c_out = widths[k - 1], widths[k]
        init_conv(p, f"enc.l{k}.0", c_in, c_out, 3, seed=seed, slope=a)
        if k > 1:
            init_conv(p, f"enc.l{k}.1", c_out, c_out, 3, seed=seed, slope=a)

    for k in cfg.decoded_levels:
        tag = cfg.tag(k)
        if f"dec.{tag}.trunk.0.weight" in p:
            continue
        hidden = cfg.decoder_widths
        chans = [decoder_input_channels(cfg, k), *hidden]
        for i in range(len(hidden)):
            init_conv(p, f"dec.{tag}.trunk.{i}", chans[i], chans[i + 1], 3, seed=seed, slope=a)
        init_conv(p, f"dec.{tag}.flow", hidden[-1], 2, 3, seed=seed, slope=a, zero=True)
        init_conv(p, f"dec.{tag}.conf", hidden[-1], 1, 3, seed=seed, slope=a)

    for k in cfg.module_levels:
        tag = cfg.tag(k)
        last_k = 5 if k in cfg.large_kernel_levels else 3
        channels = num_channels(cfg.radius(k))
        if cfg.variant.modulation and f"cm.{tag}.0.weight" not in p:
            init_stack(p, f"cm.{tag}", channels + cfg.encoder_width(k) + 1, cfg.generator_widths,
                       2 * channels, seed=seed, slope=a, last_kernel=last_k)
        if cfg.variant.deformation and f"fd.{tag}.0.weight" not in p:
            init_stack(p, f"fd.{tag}", channels + 1, cfg.generator_widths, 2, seed=seed, slope=a,
                       last_kernel=last_k)
    return p


def is_new_module(name: str) -> bool:
    """Blobs trained at the higher learning rate: the generators and the confidence heads."""
    return name.startswith(("cm.", "fd.")) or ".conf." in name


def param_shapes(cfg: ModelConfig) -> dict:
    return {k: t.shape for k, t in init_params(cfg).items()}


def count_params(cfg: ModelConfig, params: Optional[dict] = None) -> int:
    if params is None:
        params = init_params(cfg)
    return int(sum(t.data.size for t in params.values()))


# ---------------------------------------------------------------------------
# forward pieces


def encode(i1: Tensor, i2: Tensor, cfg: ModelConfig, params: dict):
    """Feature pyramids (level 1 first) of both images with shared weights."""
    if i1.shape != i2.shape:
        raise ShapeError(f"image shapes differ: {i1.shape} vs {i2.shape}", axis="H")
    if i1.shape[1] != 3:
        raise ShapeError(f"images need 3 channels, got {i1.shape[1]}", axis="C")
    h, w = i1.shape[2:]
    div = cfg.divisor
    if h % div or w % div:
        raise ShapeError(f"image extents {h}x{w} must be divisible by {div}; pad the images first "
                         f"(the infer command pads automatically)", axis="H" if h % div else "W")
    return _encode_one(i1, cfg, params), _encode_one(i2, cfg, params)


def _encode_one(img: Tensor, cfg: ModelConfig, params: dict) -> list:
    a = cfg.leaky_slope
    x = E.add(img, -0.5)
    pyramid = []
    for k in range(1, cfg.num_levels + 1):
        x = E.leaky_relu(E.conv2d(x, conv_layer(params, f"enc.l{k}.0", stride=1 if k == 1 else 2)), a)
        if k > 1:
            x = E.leaky_relu(E.conv2d(x, conv_layer(params, f"enc.l{k}.1")), a)
        pyramid.append(x)
    return pyramid


def decode_level(f1: Tensor, f2: Tensor, flow_init: Tensor, conf_init: Tensor, level: int,
                 cfg: ModelConfig, params: dict, prev_features: Optional[Tensor] = None,
                 warp: bool = True):
    """One pyramid level: warp, correlate, optionally modulate, decode a residual flow."""
    for ax, label in ((0, "N"), (2, "H"), (3, "W")):
        if flow_init.shape[ax] != f1.shape[ax]:
            raise ShapeError(f"level {level}: flow_init axis {label} is {flow_init.shape[ax]}, "
                             f"features have {f1.shape[ax]}", axis=label)
    a = cfg.leaky_slope
    radius = cfg.radius(level)
    tag = cfg.tag(level)
    aux: dict = {}

    f2w = E.grid_sample(f2, flow_init, padding="zeros") if warp else f2
    volume = correlation(f1, f2w, radius)
    aux["cost_volume"] = volume

    if cfg.variant.modulation and cfg.uses_modules(level):
        m = conf_init.detach() if cfg.variant.confidence else E.full(conf_init.shape, 0.5)
        mt = generate_modulation(volume, f1, m, stack_layers(params, f"cm.{tag}"), a)
        volume = modulate(volume, mt)
        aux["modulation"] = mt

    if cfg.variant.feed_forward:
        if prev_features is None:
            n, _, h, w = f1.shape
            prev_features = E.zeros((n, cfg.decoder_widths[-1], h, w))
        x = E.concat([volume, f1, flow_init, prev_features])
    else:
        x = volume

    for i in range(len(cfg.decoder_widths)):
        x = E.leaky_relu(E.conv2d(x, conv_layer(params, f"dec.{tag}.trunk.{i}")), a)
    aux["features"] = x
    residual = E.conv2d(x, conv_layer(params, f"dec.{tag}.flow"))
    confidence = E.sigmoid(E.conv2d(x, conv_layer(params, f"dec.{tag}.conf")))
    flow = E.add(flow_init, residual)
    return flow, confidence, aux


def upsample_flow(u: Tensor) -> Tensor:
    return E.scale(E.upsample2x(u), 2.0)


def forward(i1: Tensor, i2: Tensor, cfg: ModelConfig, params: dict) -> dict:
    pyr1, pyr2 = encode(i1, i2, cfg, params)
    levels = cfg.decoded_levels
    a = cfg.leaky_slope
    flows, confs, auxes = [], [], []
    flow = conf = features = None
    for level in levels:
        f1, f2 = pyr1[level - 1], pyr2[level - 1]
        n, _, h, w = f1.shape
        if flow is None:
            flow_init = E.zeros((n, 2, h, w))
            conf_init = E.full((n, 1, h, w), 0.5)
            prev = None
            warp = False
        else:
            flow_init = upsample_flow(flow)
            conf_init = E.upsample2x(conf.detach())
            prev = E.upsample2x(features) if cfg.variant.feed_forward else None
            warp = True
        step_aux = {}
        if cfg.variant.deformation and cfg.uses_modules(level):
            m = conf_init if cfg.variant.confidence else E.full(conf_init.shape, 0.5)
            ca = auto_correlation(f1, cfg.radius(level))
            d = generate_displacement(ca, m, stack_layers(params, f"fd.{cfg.tag(level)}"), a)
            step_aux["displacement"] = d
            step_aux["undeformed_flow"] = flow_init
            flow_init = deform_flow(flow_init, d)
        flow, conf, aux = decode_level(f1, f2, flow_init, conf_init, level, cfg, params,
                                       prev_features=prev, warp=warp)
        aux.update(step_aux)
        features = aux["features"]
        flows.append(flow)
        confs.append(conf)
        auxes.append(aux)

    full = flow
    for _ in range(cfg.finest_level - 1):
        full = upsample_flow(full)
    return {"flows": flows, "confidences": confs, "levels": levels, "flow": full, "aux": auxes}


def predict(i1, i2, cfg: ModelConfig, params: dict) -> np.ndarray:
    """Full-resolution flow as a numpy array, without keeping a gradient graph."""
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    out = forward(_wrap(i1), _wrap(i2), cfg, frozen)
    return out["flow"].data


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
