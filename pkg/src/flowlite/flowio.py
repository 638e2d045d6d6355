"""Flow file formats (Middlebury ``.flo``, KITTI 16-bit PNG) and colour-wheel rendering."""

from __future__ import annotations

import os
import struct

import cv2
import numpy as np

from .engine import DTYPE, Tensor

FLO_MAGIC = 202021.25
UNKNOWN_FLOW = 1e9


class FlowFormatError(ValueError):
    def __init__(self, message: str, path=None):
        super().__init__(f"{path}: {message}" if path is not None else message)
        self.path = path


def _flow_array(u) -> np.ndarray:
    arr = u.data if isinstance(u, Tensor) else np.asarray(u)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single flow field, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"flow must be [1, 2, H, W] or [2, H, W], got {arr.shape}")
    return arr


# -- .flo --------------------------------------------------------------------


def flo_bytes(u) -> bytes:
    arr = _flow_array(u)
    h, w = arr.shape[1:]
    return (struct.pack("<fii", FLO_MAGIC, w, h)
            + np.ascontiguousarray(arr.transpose(1, 2, 0), dtype="<f4").tobytes())


def parse_flo(blob: bytes, path=None, with_mask: bool = False):
    if len(blob) < 12:
        raise FlowFormatError(f"truncated header ({len(blob)} bytes)", path)
    magic, w, h = struct.unpack("<fii", blob[:12])
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"bad magic {magic!r}, expected {FLO_MAGIC}", path)
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"invalid extents {w}x{h}", path)
    need = 12 + 8 * w * h
    if len(blob) < need:
        raise FlowFormatError(f"truncated payload: {len(blob)} bytes, need {need}", path)
    data = np.frombuffer(blob, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    flow = Tensor(data.transpose(2, 0, 1)[None].astype(DTYPE))
    if not with_mask:
        return flow
    valid = (np.abs(data) <= UNKNOWN_FLOW).all(axis=2) & np.isfinite(data).all(axis=2)
    return flow, Tensor(valid[None, None].astype(DTYPE))


def write_flo(path, u) -> None:
    with open(path, "wb") as fh:
        fh.write(flo_bytes(u))


def read_flo(path, with_mask: bool = False):
    """Read a ``.flo`` file as a ``[1, 2, H, W]`` tensor.

    With ``with_mask=True`` also return the validity mask; components whose
    magnitude exceeds 1e9 mark a pixel as unknown.
    """
    with open(path, "rb") as fh:
        return parse_flo(fh.read(), path=os.fspath(path), with_mask=with_mask)


# -- KITTI png ----------------------------------------------------------------


def write_kitti_png(path, u, mask=None) -> None:
    arr = _flow_array(u).astype(np.float64)
    h, w = arr.shape[1:]
    valid = np.ones((h, w)) if mask is None else np.asarray(
        mask.data if isinstance(mask, Tensor) else mask).reshape(h, w)
    enc = np.clip(np.round(arr * 64.0 + 2 ** 15), 0, 2 ** 16 - 1).astype(np.uint16)
    # KITTI stores (u, v, valid) as RGB; OpenCV writes BGR
    bgr = np.stack([valid.astype(np.uint16), enc[1], enc[0]], axis=2)
    if not cv2.imwrite(os.fspath(path), bgr):
        raise OSError(f"could not write {path}")


def read_kitti_png(path):
    img = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FlowFormatError("unreadable image", path)
    if img.dtype != np.uint16:
        raise FlowFormatError(f"KITTI flow needs 16-bit channels, got {img.dtype}", path)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FlowFormatError(f"KITTI flow needs 3 channels, got shape {img.shape}", path)
    rgb = img[:, :, ::-1].astype(np.float64)
    flow = (rgb[:, :, :2] - 2 ** 15) / 64.0
    valid = (rgb[:, :, 2] > 0).astype(DTYPE)
    return (Tensor(flow.transpose(2, 0, 1)[None].astype(DTYPE)), Tensor(valid[None, None]))


# -- colour wheel ---------------------------------------------------------------


def make_colorwheel() -> np.ndarray:
    """Middlebury colour wheel, 55 RGB entries in [0, 255]."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    ncols = ry + yg + gc + cb + bm + mr
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:ry, 0] = 255
    wheel[0:ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


COLORWHEEL = make_colorwheel()


def wheel_position(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Fractional colour-wheel index of each vector's direction, in ``[0, ncols - 1]``."""
    ncols = COLORWHEEL.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    return (angle + 1.0) / 2.0 * (ncols - 1)


def flow_to_color(u, max_mag=None) -> Tensor:
    """Render flow as colour in ``[0, 1]`` shaped ``[N, 3, H, W]``.

    Hue encodes direction, saturation the magnitude relative to ``max_mag``
    (default: 99th percentile magnitude). Zero flow is white.
    """
    arr = u.data if isinstance(u, Tensor) else np.asarray(u)
    if arr.ndim == 3:
        arr = arr[None]
    fx = arr[:, 0].astype(np.float64)
    fy = arr[:, 1].astype(np.float64)
    mag = np.sqrt(fx ** 2 + fy ** 2)
    if max_mag is None:
        max_mag = float(np.percentile(mag, 99))
    if not max_mag > 0:
        max_mag = 1.0
    fx = fx / max_mag
    fy = fy / max_mag
    rad = np.sqrt(fx ** 2 + fy ** 2)
    ncols = COLORWHEEL.shape[0]
    fk = wheel_position(fx, fy)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    frac = fk - k0
    out = np.empty(fx.shape + (3,))
    for ch in range(3):
        c0 = COLORWHEEL[k0, ch] / 255.0
        c1 = COLORWHEEL[k1, ch] / 255.0
        col = (1 - frac) * c0 + frac * c1
        inside = rad <= 1
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        out[..., ch] = col
    return Tensor(out.transpose(0, 3, 1, 2).astype(DTYPE))


def color_to_uint8(img) -> np.ndarray:
    """``[1, 3, H, W]`` float image to ``H x W x 3`` uint8 RGB."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    return np.clip(np.round(arr[0].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def write_color_png(path, img) -> None:
    rgb = color_to_uint8(img)
    if not cv2.imwrite(os.fspath(path), rgb[:, :, ::-1]):
        raise OSError(f"could not write {path}")
