"""Binary checkpoint container.

Layout (little-endian)::

    b"FLWC"  uint32 version
    uint64 step  int64 seed
    uint32 n  + n bytes of UTF-8 config text (canonical key=value lines)
    uint32 blob count
    per blob: uint16 name length, name, 4 x uint32 shape, float32 payload
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import DTYPE, Tensor
from .network import ModelConfig, param_shapes

MAGIC = b"FLWC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def arrays(self) -> dict:
        return {k: (v.data if isinstance(v, Tensor) else np.asarray(v, dtype=DTYPE)) for k, v in self.params.items()}

    def tensors(self, requires_grad: bool = True) -> dict:
        return {k: Tensor(np.array(v, dtype=DTYPE), requires_grad=requires_grad, name=k)
                for k, v in self.arrays().items()}


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQq", VERSION, ckpt.step, ckpt.seed))
    text = ckpt.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    arrays = ckpt.arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = arrays[name]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<4I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def from_bytes(blob: bytes) -> Checkpoint:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, have {len(view) - pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a flowlite checkpoint (bad magic)")
    version, step, seed = struct.unpack("<IQq", take(20))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_text,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_text(bytes(take(n_text)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = bytes(take(n_name)).decode("utf-8")
        shape = struct.unpack("<4I", take(16))
        size = int(np.prod(shape))
        arr = np.frombuffer(take(4 * size), dtype="<f4").astype(DTYPE).reshape(shape)
        params[name] = arr
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last blob")
    check_params(config, params)
    return Checkpoint(config=config, params=params, step=int(step), seed=int(seed))


def check_params(config: ModelConfig, params: dict) -> None:
    """Every weight the config needs must be present with the right shape, and nothing else."""
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"weights do not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(f"{name}: shape {tuple(params[name].shape)}, config needs {tuple(shape)}")


def save(path, ckpt: Checkpoint) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
