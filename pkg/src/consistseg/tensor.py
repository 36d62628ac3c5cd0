"""Minimal reverse-mode autodiff over dense rank-4 float64 tensors.

All values live in (batch, channel, height, width) arrays of 64-bit
floats.  The graph is an implicit tape rebuilt on every forward pass:
each op records its parents and a closure that scatters the incoming
gradient to them.  Gradients accumulate by summation over all uses, so
parameters consumed by several subgraphs (e.g. two Siamese branches)
receive the sum of their per-use gradients with no extra bookkeeping.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """An op was given tensors whose dimensions do not fit."""


def _as4d(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 array, got shape {arr.shape}")
    return arr


class Tensor:
    """A rank-4 float64 value with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as4d(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # own=True: the caller hands over a freshly allocated array, so the
        # defensive copy on first accumulation can be skipped.
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_scalar(other, -1.0))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / float(other))

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))


def _make(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ops -------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data, own=True)
        if b.requires_grad:
            b._accumulate(g * a.data, own=True)

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / b.data, own=True)
        if b.requires_grad:
            b._accumulate(-g * out_data / b.data, own=True)

    return _make(out_data, (a, b), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g)

    return _make(a.data + s, (a,), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s, own=True)

    return _make(a.data * s, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask, own=True)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out_data[~pos] = e / (1.0 + e)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data), own=True)

    return _make(out_data, (a,), backward)


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax across the channel axis, per pixel."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=1, keepdims=True)
            a._accumulate(out_data * (g - dot), own=True)

    return _make(out_data, (a,), backward)


# -- structural ops --------------------------------------------------------

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: empty input list")
    ref = parts[0]
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref.shape[0], ref.shape[2], ref.shape[3]):
            raise ShapeError(
                f"concat_channels: shapes {ref.shape} and {p.shape} differ outside channel axis"
            )
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def slice_batch(a: Tensor, start: int, stop: int) -> Tensor:
    """Select a contiguous batch range [start, stop)."""
    b = a.shape[0]
    if not (0 <= start < stop <= b):
        raise ShapeError(f"slice_batch: range [{start}, {stop}) invalid for batch size {b}")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a._accumulate(full, own=True)

    return _make(a.data[start:stop].copy(), (a,), backward)


def upsample2(a: Tensor) -> Tensor:
    """2x nearest-neighbour upsampling."""
    out_data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def backward(g):
        if a.requires_grad:
            b, c, h2, w2 = g.shape
            a._accumulate(g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)), own=True)

    return _make(out_data, (a,), backward)


def maxpool2(a: Tensor) -> Tensor:
    """2x max-pooling; spatial dims must be even. Ties break to the first
    window position so backward is deterministic."""
    b, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims ({h}, {w}) must be even")
    windows = a.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if a.requires_grad:
            gw = np.zeros((b, c, h // 2, w // 2, 4))
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            gw = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            a._accumulate(gw.reshape(b, c, h, w), own=True)

    return _make(out_data, (a,), backward)


# -- convolution -----------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Extract k x k patches ('same' zero padding) as (c*k*k, b*h*w)."""
    b, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    xp[:, :, p : p + h, p : p + w] = x
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (c, k, k, b, h, w), (s[1], s[2], s[3], s[0], s[2], s[3])
    )
    return view.reshape(c * k * k, b * h * w)


def _col2im(cols: np.ndarray, xshape, k: int) -> np.ndarray:
    b, c, h, w = xshape
    p = k // 2
    gxp = np.zeros((c, b, h + 2 * p, w + 2 * p))
    cols = cols.reshape(c, k, k, b, h, w)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + h, j : j + w] += cols[:, i, j]
    return gxp[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution with zero padding; odd square kernels.

    weight: (out_c, in_c, k, k); bias: (1, out_c, 1, 1).
    """
    out_c, in_c, kh, kw = weight.shape
    b, c, h, w = x.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd and square, got ({kh}, {kw})")
    if c != in_c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {in_c}")
    if bias is not None and bias.shape != (1, out_c, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (1, {out_c}, 1, 1)")
    k = kh
    cols = _im2col(x.data, k)  # (ckk, b*hw)
    wm = weight.data.reshape(out_c, in_c * k * k)
    out_data = np.ascontiguousarray((wm @ cols).reshape(out_c, b, h, w).transpose(1, 0, 2, 3))
    if bias is not None:
        out_data += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(out_c, b * h * w)
        if weight.requires_grad:
            weight._accumulate((gm @ cols.T).reshape(weight.shape), own=True)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=1).reshape(1, out_c, 1, 1), own=True)
        if x.requires_grad:
            gcols = wm.T @ gm  # (ckk, b*hw)
            x._accumulate(_col2im(gcols, x.data.shape, k), own=True)

    return _make(out_data, parents, backward)


# -- reductions ------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g.reshape(())), own=True)

    return _make(a.data.sum().reshape(1, 1, 1, 1), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g.reshape(()) / n), own=True)

    return _make(a.data.mean().reshape(1, 1, 1, 1), (a,), backward)


def sum_spatial(a: Tensor) -> Tensor:
    """Reduce over (h, w) to shape (b, c, 1, 1)."""

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=(2, 3), keepdims=True), (a,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward, blocks the gradient (ablation tool)."""
    return Tensor(a.data.copy(), requires_grad=False)


# -- backward pass ---------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if id(node) in seen:
            continue
        if i < len(node._parents):
            stack.append((node, i + 1))
            stack.append((node._parents[i], 0))
        else:
            seen.add(id(node))
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad for every tensor on a path from `loss` to a leaf
    with requires_grad. `loss` must be scalar."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    for t in order:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- finite-difference oracle ----------------------------------------------

def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries_per_param: int | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_fn` rebuilds the loss from the current .data of `params`.
    Relative error per entry: |analytic - fd| / max(1, |analytic|).
    Optionally checks only the first `max_entries_per_param` entries of
    each parameter (entries are exhaustive by default).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = loss_fn()
    backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        n = flat.size if max_entries_per_param is None else min(flat.size, max_entries_per_param)
        for i in range(n):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            a = g.reshape(-1)[i]
            err = abs(a - fd) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst


# -- checkpoint format -----------------------------------------------------

CHECKPOINT_MAGIC = b"WCT1"


def save_params(path, params: Sequence[Tensor]) -> None:
    """Flat binary checkpoint: magic, u32 tensor count, then per tensor
    4 little-endian u32 shape dims followed by little-endian float64 data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            fh.write(struct.pack("<4I", *p.shape))
            fh.write(p.data.astype("<f8").tobytes())


def load_params(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        out = []
        for _ in range(count):
            shape = struct.unpack("<4I", fh.read(16))
            n = int(np.prod(shape))
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            out.append(data.astype(np.float64))
        return out


def load_into(path, params: Sequence[Tensor]) -> None:
    arrays = load_params(path)
    if len(arrays) != len(params):
        raise ValueError(f"{path}: checkpoint has {len(arrays)} tensors, expected {len(params)}")
    for p, arr in zip(params, arrays):
        if arr.shape != p.shape:
            raise ValueError(f"{path}: shape {arr.shape} != parameter shape {p.shape}")
        p.data = arr.copy()
