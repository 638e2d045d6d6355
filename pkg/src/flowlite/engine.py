"""Dense rank-4 tensors with reverse-mode differentiation.

Every value is a float32 array shaped ``[N, C, H, W]``. Operations record a
closure that maps the output cotangent to input cotangents; :func:`backward`
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes disagree; ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: Optional[str] = None):
        super().__init__(message)
        self.axis = axis


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"expected a rank-4 [N, C, H, W] array, got shape {arr.shape}", axis="rank")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full((1, 1, 1, 1), x, dtype=DTYPE))
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result; the graph edge is only recorded when some parent needs grad."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))


def full(shape: Sequence[int], value: float) -> Tensor:
    return Tensor(np.full(shape, value, dtype=DTYPE))


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward() needs a scalar [1,1,1,1] loss, got {loss.shape}", axis="rank")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = pg.astype(DTYPE, copy=False)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, s: float) -> Tensor:
    s = DTYPE(s)
    return _make(x.data * s, (x,), lambda g: (g * s,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    s = DTYPE(slope)
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * s)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * s),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def sum_all(x: Tensor) -> Tensor:
    out = np.array(x.data.sum(dtype=np.float64), dtype=DTYPE).reshape(1, 1, 1, 1)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(sum_all(x), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax in range(4):
            if ax != axis and t.shape[ax] != ref[ax]:
                raise ShapeError(f"concat: axis {'NCHW'[ax]} differs ({t.shape[ax]} vs {ref[ax]})",
                                 axis="NCHW"[ax])
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _back(g):
        idx = [slice(None)] * 4
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tensors, _back)


def channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice ``x[:, start:stop]``."""
    out = x.data[:, start:stop].copy()

    def _back(g):
        full_g = np.zeros(x.shape, dtype=DTYPE)
        full_g[:, start:stop] = g
        return (full_g,)

    return _make(out, (x,), _back)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels", axis="C")
    out, lo = [], 0
    for s in sizes:
        out.append(channels(x, lo, lo + s))
        lo += s
    return out


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.kernel = _as_tensor(self.kernel)
        self.bias = _as_tensor(self.bias)
        co, ci, kh, kw = self.kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}", axis="kernel")
        if self.bias.shape != (1, co, 1, 1):
            raise ShapeError(f"bias must be [1, {co}, 1, 1], got {self.bias.shape}", axis="C")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be positive and padding non-negative")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        return 0
    return span // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with zero padding via im2col + one matmul."""
    n, c, h, w = x.shape
    co, ci, kh, kw = p.kernel.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}", axis="C")
    s, pad = p.stride, p.padding
    ho, wo = conv_output_size(h, kh, s, pad), conv_output_size(w, kw, s, pad)
    if ho < 1:
        raise ShapeError(f"conv2d: output height {ho} < 1", axis="H")
    if wo < 1:
        raise ShapeError(f"conv2d: output width {wo} < 1", axis="W")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # channel-major columns [C*kh*kw, N*ho*wo]: every tap copy is a contiguous block
    xc = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + s * ho:s, j:j + s * wo:s]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = p.kernel.data.reshape(co, -1)
    out = wmat @ cols
    out += p.bias.data.reshape(co, 1)
    out = np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))

    def _back(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
        gk = (gc @ cols.T).reshape(p.kernel.shape) if p.kernel.requires_grad else None
        gb = gc.sum(axis=1).reshape(1, co, 1, 1) if p.bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gc).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
            gxp = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        return gx, gk, gb

    return _make(out, (x, p.kernel, p.bias), _back)


# ---------------------------------------------------------------------------
# resampling


def _upsample_matrix(n: int) -> np.ndarray:
    """Linear map from length ``n`` to ``2n`` using half-pixel (align-corners-false) centres."""
    m = np.zeros((2 * n, n), dtype=np.float64)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m.astype(DTYPE)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of the spatial axes; values are not rescaled."""
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("upsample2x needs non-empty spatial extents", axis="H" if h < 1 else "W")
    mh, mw = _upsample_matrix(h), _upsample_matrix(w)
    out = mh @ x.data @ mw.T
    return _make(out, (x,), lambda g: (mh.T @ g @ mw,))


def avg_pool2x(x: np.ndarray) -> np.ndarray:
    """Non-differentiable 2x2 area average, the adjoint-consistent partner of upsample2x."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)).astype(DTYPE)


PADDING_MODES = ("zeros", "border")


def grid_sample(x: Tensor, offsets: Tensor, padding: str = "zeros") -> Tensor:
    """Bilinearly sample ``x`` at ``(j + dx, i + dy)`` for every output pixel ``(i, j)``.

    ``offsets`` holds per-pixel displacements in pixels at ``x``'s resolution,
    channel 0 horizontal, channel 1 vertical. With ``padding="zeros"`` taps that
    fall outside the image read 0; with ``"border"`` the sample location is
    clamped into the image first, so the offset gradient vanishes where clamped.
    """
    if padding not in PADDING_MODES:
        raise ValueError(f"padding must be one of {PADDING_MODES}, got {padding!r}")
    n, c, h, w = x.shape
    if offsets.shape[1] != 2:
        raise ShapeError(f"grid_sample: offsets need 2 channels, got {offsets.shape[1]}", axis="C")
    for ax, name in ((0, "N"), (2, "H"), (3, "W")):
        if offsets.shape[ax] != x.shape[ax]:
            raise ShapeError(f"grid_sample: offsets axis {name} is {offsets.shape[ax]}, input has {x.shape[ax]}",
                             axis=name)

    jj = np.arange(w, dtype=DTYPE)[None, None, :]
    ii = np.arange(h, dtype=DTYPE)[None, :, None]
    px = jj + offsets.data[:, 0]
    py = ii + offsets.data[:, 1]
    if padding == "border":
        inside_x = (px >= 0) & (px <= w - 1)
        inside_y = (py >= 0) & (py <= h - 1)
        px = np.clip(px, 0, w - 1)
        py = np.clip(py, 0, h - 1)

    x0f = np.floor(px)
    y0f = np.floor(py)
    tx = (px - x0f).astype(DTYPE)
    ty = (py - y0f).astype(DTYPE)
    with np.errstate(invalid="ignore"):  # non-finite offsets still yield non-finite taps below
        x0 = x0f.astype(np.int64)
        y0 = y0f.astype(np.int64)

    flat = x.data.reshape(n, c, h * w)
    taps = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)).reshape(n, 1, h * w)
        wx = tx if dx else 1.0 - tx
        wy = ty if dy else 1.0 - ty
        vals = np.take_along_axis(flat, np.broadcast_to(idx, (n, c, h * w)), axis=2).reshape(n, c, h, w)
        vals = vals * valid[:, None].astype(DTYPE)
        taps.append((idx, valid, wx, wy, vals, dx, dy))

    out = np.zeros((n, c, h, w), dtype=DTYPE)
    for _, _, wx, wy, vals, _, _ in taps:
        out += (wx * wy)[:, None] * vals

    def _back(g):
        gx = goff = None
        if x.requires_grad:
            base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1)
            acc = np.zeros(n * c * h * w, dtype=np.float64)
            for idx, valid, wx, wy, _, _, _ in taps:
                wgt = (wx * wy * valid)[:, None].reshape(n, 1, h * w)
                contrib = (g.reshape(n, c, h * w) * wgt).reshape(-1)
                acc += np.bincount((idx + base).reshape(-1), weights=contrib, minlength=acc.size)
            gx = acc.astype(DTYPE).reshape(n, c, h, w)
        if offsets.requires_grad:
            gpx = np.zeros((n, h, w), dtype=DTYPE)
            gpy = np.zeros((n, h, w), dtype=DTYPE)
            for _, _, wx, wy, vals, dx, dy in taps:
                s = (g * vals).sum(axis=1)
                gpx += s * wy * (1.0 if dx else -1.0)
                gpy += s * wx * (1.0 if dy else -1.0)
            if padding == "border":
                gpx *= inside_x
                gpy *= inside_y
            goff = np.stack([gpx, gpy], axis=1)
        return gx, goff

    return _make(out, (x, offsets), _back)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf]
