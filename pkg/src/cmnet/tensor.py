"""Dense rank-4 tensors and a reverse-mode tape.

Only the operations the matting network needs are provided. Values live in a
numpy array of shape ``(n, c, h, w)``; scalars are ``(1, 1, 1, 1)``. Any op
whose inputs require gradients appends a node to the tape that is active on
the calling thread, and :func:`backward` walks that tape in reverse.

Conventions worth knowing before reading the kernels:

* ``conv2d`` is a cross-correlation (kernels are not flipped), zero padded.
* ``bilinear_resize`` and ``backwarp`` both sample with the half-pixel
  (align-corners=false) convention and clamp to the border.
* ``backwarp`` samples output pixel ``(i, j)`` at ``(x, y) = (j + u, i + v)``.
  Its derivative with respect to the flow at integer sample positions is the
  right-hand one, i.e. the slope of the cell ``[floor(x), floor(x) + 1]``.
"""
from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, NumericError, ShapeError, UsageError

PRECISIONS = {"single": np.float32, "double": np.float64}


def _precision_of(dtype) -> str:
    if dtype == np.float32:
        return "single"
    if dtype == np.float64:
        return "double"
    raise UsageError(f"unsupported dtype {dtype}")


class Tensor:
    """A rank-4 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None):
        arr = np.asarray(data)
        if precision is not None:
            arr = arr.astype(PRECISIONS[precision], copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank 4, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def precision(self) -> str:
        return _precision_of(self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() needs a scalar tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"

    # operator sugar used by the layers
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def zeros(shape, precision: str = "single", requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=PRECISIONS[precision]), requires_grad)


def ones(shape, precision: str = "single", requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=PRECISIONS[precision]), requires_grad)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("inputs", "backward_fn", "shape")

    def __init__(self, inputs, backward_fn, shape):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.shape = shape


class Tape:
    """Append-only record of differentiable ops.

    A tape may be used as a context manager to make it the active tape for
    the current thread. After :meth:`backward` it refuses new nodes until
    :meth:`reset` is called.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def reset(self) -> None:
        self.nodes.clear()
        self.grads.clear()
        self.consumed = False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
        if self.consumed:
            raise UsageError("tape already consumed by backward(); call reset() first")
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(tuple(inputs), backward_fn, out.shape))
        return out

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise UsageError("loss was not recorded on this tape")
        if self.consumed:
            raise UsageError("tape already consumed by backward(); call reset() first")
        grads = self.grads
        grads.clear()
        grads[loss.node_id] = np.ones(loss.shape, dtype=loss.data.dtype)
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            # drop the node as soon as it is used; this frees its saved arrays
            # and breaks the tensor -> tape -> closure reference cycles
            self.nodes[nid] = None
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self and inp.node_id is not None:
                    prev = grads.get(inp.node_id)
                    grads[inp.node_id] = ig if prev is None else prev + ig
                else:
                    key = id(inp)
                    prev = leaves.get(key)
                    leaves[key] = (inp, ig if prev is None else prev[1] + ig)
        self.consumed = True
        self.nodes.clear()
        out = {}
        for leaf, g in leaves.values():
            leaf.grad = g
            out[leaf] = g
        return out


_local = threading.local()


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def current_tape() -> Tape:
    return _stack()[-1]


class no_grad:
    """Context manager that suspends recording on this thread."""

    def __enter__(self):
        self._prev = getattr(_local, "disabled", False)
        _local.disabled = True
        return self

    def __exit__(self, *exc):
        _local.disabled = self._prev


def grad_enabled() -> bool:
    return not getattr(_local, "disabled", False)


class branch_log:
    """Digest of the branch decisions (relu masks, L1 signs, warp cells) made
    by ops on this thread while active. Two evaluations with equal digests lie
    in the same smooth piece of the function."""

    def __enter__(self) -> "branch_log":
        self._prev = getattr(_local, "branches", None)
        self.hash = hashlib.blake2b(digest_size=16)
        _local.branches = self.hash
        return self

    def __exit__(self, *exc) -> None:
        _local.branches = self._prev

    def digest(self) -> bytes:
        return self.hash.digest()


def _note_branches(*arrays: np.ndarray) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        for a in arrays:
            log.update(np.ascontiguousarray(a).tobytes())


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of ``loss`` into every reachable leaf.

    Returns a map from leaf tensor to its gradient array; the same arrays are
    stored on ``leaf.grad``.
    """
    if loss.data.size != 1 or loss.data.ndim != 4:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        return {}
    return loss._tape.backward(loss)


def _result(arr: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor._wrap(arr, False)
    if any(t.requires_grad for t in inputs) and not getattr(_local, "disabled", False):
        current_tape().record(out, inputs, backward_fn)
    return out


def _same_precision(*ts: Tensor) -> None:
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise UsageError("mixed precision inside one computation graph")


# ---------------------------------------------------------------------------
# elementwise


def pointwise(x: Tensor, kind: str, a: float = 1.0, b: float = 0.0) -> Tensor:
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericError(f"non-finite input to {kind}")
    if kind == "sigmoid":
        y = 0.5 * (1.0 + np.tanh(0.5 * xd))
        y = y.astype(xd.dtype, copy=False)
        return _result(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(xd)
        return _result(y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "relu":
        mask = xd > 0
        _note_branches(mask)
        y = np.where(mask, xd, 0).astype(xd.dtype, copy=False)
        return _result(y, (x,), lambda g: (g * mask,))
    if kind == "affine":
        y = (xd * a + b).astype(xd.dtype, copy=False)
        return _result(y, (x,), lambda g: ((g * a).astype(g.dtype, copy=False),))
    raise UsageError(f"unknown pointwise op {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    return pointwise(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return pointwise(x, "tanh")


def relu(x: Tensor) -> Tensor:
    return pointwise(x, "relu")


def affine(x: Tensor, a: float, b: float = 0.0) -> Tensor:
    return pointwise(x, "affine", a, b)


def binary(x: Tensor, y: Tensor, kind: str) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"{kind}: shapes {x.shape} and {y.shape} differ")
    _same_precision(x, y)
    xd, yd = x.data, y.data
    if kind == "add":
        return _result(xd + yd, (x, y), lambda g: (g, g))
    if kind == "sub":
        return _result(xd - yd, (x, y), lambda g: (g, -g))
    if kind == "mul":
        return _result(xd * yd, (x, y), lambda g: (g * yd, g * xd))
    raise UsageError(f"unknown binary op {kind!r}")


def add(x: Tensor, y: Tensor) -> Tensor:
    return binary(x, y, "add")


def sub(x: Tensor, y: Tensor) -> Tensor:
    return binary(x, y, "sub")


def mul(x: Tensor, y: Tensor) -> Tensor:
    return binary(x, y, "mul")


# ---------------------------------------------------------------------------
# channel plumbing


def _concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    for t in xs:
        if any(t.shape[d] != ref[d] for d in range(4) if d != axis):
            raise ShapeError(f"concat along axis {axis}: {t.shape} does not match {ref}")
    _same_precision(*xs)
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=axis)

    def back(g):
        idx = [slice(None)] * 4
        parts = []
        for i in range(len(xs)):
            idx[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _result(out, xs, back)


def _slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    size = x.shape[axis]
    if not 0 <= start < stop <= size:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of size {size}")
    if start == 0 and stop == size:
        return x
    idx = [slice(None)] * 4
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _result(out, (x,), back)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack along the channel axis; all inputs share (n, h, w)."""
    return _concat(xs, 1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return _slice(x, 1, start, stop)


def concat_batch(xs: Sequence[Tensor]) -> Tensor:
    return _concat(xs, 0)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    return _slice(x, 0, start, stop)


# ---------------------------------------------------------------------------
# convolution


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(x: np.ndarray, kh: int, kw: int, s: int, ph: int, pw: int, oh: int, ow: int):
    """Columns shaped (n, ci*kh*kw, oh*ow) and the padded input."""
    n, ci, h, w = x.shape
    if ph or pw:
        xp = np.zeros((n, ci, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    cols = np.empty((n, ci, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]
    return cols.reshape(n, ci * kh * kw, oh * ow), xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad=0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``weight`` is stored as a tensor of shape ``(co, ci, kh, kw)`` and
    ``bias`` as ``(1, co, 1, 1)``. ``pad`` may be an int or ``(ph, pw)``.
    """
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if wci != ci:
        raise ShapeError(f"conv2d: input has {ci} channels, kernel expects {wci}")
    ph, pw = _pair(pad)
    s = int(stride)
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    oh = (h + 2 * ph - kh) // s + 1
    ow = (w + 2 * pw - kw) // s + 1
    inputs = (x, weight) if bias is None else (x, weight, bias)
    _same_precision(*inputs)

    dt = x.data.dtype
    cols, xp = _im2col(x.data, kh, kw, s, ph, pw, oh, ow)
    wmat = weight.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data.reshape(1, co, 1)
    out = out.reshape(n, co, oh, ow)

    def back(g):
        g2 = g.reshape(n, co, oh * ow)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2)).reshape(bias.shape)
        if x.requires_grad:
            if s == 1 and ph < kh and pw < kw:
                # correlate the padded output gradient with the flipped, transposed kernel
                wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, co * kh * kw)
                gcols, _ = _im2col(np.ascontiguousarray(g), kh, kw, 1, kh - 1 - ph, kw - 1 - pw, h, w)
                gx = np.matmul(wf, gcols).reshape(n, ci, h, w)
            else:
                gcols = np.matmul(wmat.T, g2).reshape(n, ci, kh, kw, oh, ow)
                gxp = np.zeros(xp.shape, dtype=dt)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += gcols[:, :, i, j]
                gx = gxp[:, :, ph:ph + h, pw:pw + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out, inputs, back)


# ---------------------------------------------------------------------------
# resampling


def _linear_spatial(x: Tensor, ry: np.ndarray, rx: np.ndarray, scale: float = 1.0) -> Tensor:
    """``out = scale * Ry @ x @ Rx^T`` over the spatial axes."""
    dt = x.data.dtype
    ry = ry.astype(dt, copy=False)
    rx = rx.astype(dt, copy=False)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    if scale != 1.0:
        out = out * dt.type(scale)

    def back(g):
        gx = np.matmul(np.matmul(ry.T, g), rx)
        if scale != 1.0:
            gx = gx * dt.type(scale)
        return (gx,)

    return _result(out, (x,), back)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear interpolation weights with half-pixel centres, border clamped."""
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int, scale_values: float = 1.0) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target {out_h}x{out_w} must be positive")
    _, _, h, w = x.shape
    return _linear_spatial(x, resize_matrix(h, out_h), resize_matrix(w, out_w), scale_values)


def _reflect_matrix(n: int, p: int) -> np.ndarray:
    idx = np.pad(np.arange(n), p, mode="reflect")
    m = np.zeros((n + 2 * p, n))
    m[np.arange(n + 2 * p), idx] = 1.0
    return m


def pad_reflect(x: Tensor, p: int) -> Tensor:
    """Mirror padding without edge repetition (``dcb|abcd|cba``)."""
    _, _, h, w = x.shape
    return _linear_spatial(x, _reflect_matrix(h, p), _reflect_matrix(w, p))


def backwarp(x: Tensor, flow: Tensor) -> Tensor:
    """Sample ``x`` at flow-displaced positions with bilinear weights."""
    n, c, h, w = x.shape
    if flow.shape[1] != 2:
        raise ShapeError(f"flow must have 2 channels, got {flow.shape[1]}")
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"flow shape {flow.shape} does not match input {x.shape}")
    _same_precision(x, flow)
    dt = x.data.dtype
    fx = np.arange(w, dtype=dt)[None, None, :] + flow.data[:, 0]
    fy = np.arange(h, dtype=dt)[None, :, None] + flow.data[:, 1]
    in_x = (fx >= 0) & (fx <= w - 1)
    in_y = (fy >= 0) & (fy <= h - 1)
    cx = np.clip(fx, 0, w - 1)
    cy = np.clip(fy, 0, h - 1)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    _note_branches(x0, y0, in_x, in_y)
    ax = (cx - x0).astype(dt)
    ay = (cy - y0).astype(dt)
    # slope is zero where the upper neighbour is the clamped edge
    sx = (in_x & (x1 > x0)).astype(dt)
    sy = (in_y & (y1 > y0)).astype(dt)

    xf = x.data.reshape(n, c, h * w)
    i00 = (y0 * w + x0).reshape(n, 1, h * w)
    i01 = (y0 * w + x1).reshape(n, 1, h * w)
    i10 = (y1 * w + x0).reshape(n, 1, h * w)
    i11 = (y1 * w + x1).reshape(n, 1, h * w)
    v00 = np.take_along_axis(xf, i00, axis=2).reshape(n, c, h, w)
    v01 = np.take_along_axis(xf, i01, axis=2).reshape(n, c, h, w)
    v10 = np.take_along_axis(xf, i10, axis=2).reshape(n, c, h, w)
    v11 = np.take_along_axis(xf, i11, axis=2).reshape(n, c, h, w)
    w00 = ((1 - ay) * (1 - ax))[:, None]
    w01 = ((1 - ay) * ax)[:, None]
    w10 = (ay * (1 - ax))[:, None]
    w11 = (ay * ax)[:, None]
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def back(g):
        gx = gflow = None
        if x.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            size = n * c * h * w
            acc = np.zeros(size, dtype=np.float64)
            for idx, wt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                flat = (base + idx).ravel()
                acc += np.bincount(flat, weights=(g * wt).ravel(), minlength=size)
            gx = acc.astype(dt).reshape(n, c, h, w)
        if flow.requires_grad:
            ay_ = ay[:, None]
            ax_ = ax[:, None]
            dx = ((1 - ay_) * (v01 - v00) + ay_ * (v11 - v10)) * sx[:, None]
            dy = ((1 - ax_) * (v10 - v00) + ax_ * (v11 - v01)) * sy[:, None]
            gflow = np.stack([(g * dx).sum(axis=1), (g * dy).sum(axis=1)], axis=1)
        return gx, gflow

    return _result(out, (x, flow), back)


# ---------------------------------------------------------------------------
# reductions


def reduce(x: Tensor, kind: str, y: Tensor | None = None) -> Tensor:
    if x.data.size == 0:
        raise ShapeError("reduction over an empty tensor")
    dt = x.data.dtype
    count = x.data.size
    if kind == "sum":
        out = np.sum(x.data, dtype=dt).reshape(1, 1, 1, 1)
        return _result(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).astype(dt),))
    if kind == "mean":
        out = (np.sum(x.data, dtype=dt) / count).reshape(1, 1, 1, 1).astype(dt)
        return _result(out, (x,), lambda g: (np.full(x.shape, g.reshape(()) / count, dtype=dt),))
    if kind == "l1_against":
        if y is None or y.shape != x.shape:
            raise ShapeError("l1_against needs a second tensor of the same shape")
        _same_precision(x, y)
        diff = x.data - y.data
        _note_branches(np.sign(diff))
        out = (np.sum(np.abs(diff), dtype=dt) / count).reshape(1, 1, 1, 1).astype(dt)

        def back(g):
            gx = (np.sign(diff) * (g.reshape(()) / count)).astype(dt)
            return gx, -gx

        return _result(out, (x, y), back)
    raise UsageError(f"unknown reduction {kind!r}")


def sum_(x: Tensor) -> Tensor:
    return reduce(x, "sum")


def mean(x: Tensor) -> Tensor:
    return reduce(x, "mean")


def l1_against(x: Tensor, y: Tensor) -> Tensor:
    return reduce(x, "l1_against", y)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradReport:
    worst: float
    checked: int
    skipped: int


def gradient_report(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``tensors`` are perturbed in place. When ``samples`` is given, that many
    coordinates are checked, drawn at random across all tensors; otherwise
    every coordinate is. A coordinate whose +-eps evaluations take a different
    branch of a non-smooth op than the base point is skipped (and replaced by
    another draw when sampling), since the difference quotient straddles a
    kink there. The error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    for t in tensors:
        if t.precision != "double":
            raise UsageError("gradient checking requires double precision")
        t.requires_grad = True
        t.grad = None
    with Tape(), branch_log() as base_log:
        loss = loss_fn()
        grads = backward(loss)
    base_sig = base_log.digest()
    analytic = [grads.get(t, np.zeros_like(t.data)) for t in tensors]

    sizes = [t.data.size for t in tensors]
    total = int(sum(sizes))
    if samples is None or samples >= total:
        order = np.arange(total)
        want = total
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        order = rng.permutation(total)
        want = samples
    offsets = np.cumsum([0] + sizes)

    def value() -> tuple[float, bytes]:
        with Tape(), branch_log() as lg:
            return loss_fn().item(), lg.digest()

    worst, checked, skipped = 0.0, 0, 0
    for p in order:
        if checked >= want:
            break
        k = int(np.searchsorted(offsets, p, side="right") - 1)
        flat = tensors[k].data.reshape(-1)
        j = int(p - offsets[k])
        orig = flat[j]
        flat[j] = orig + eps
        fp, sig_p = value()
        flat[j] = orig - eps
        fm, sig_m = value()
        flat[j] = orig
        if sig_p != base_sig or sig_m != base_sig:
            skipped += 1
            continue
        num = (fp - fm) / (2 * eps)
        ana = float(analytic[k].reshape(-1)[j])
        worst = max(worst, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
        checked += 1
    return GradReport(worst, checked, skipped)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                    samples: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative gradient error; see :func:`gradient_report`."""
    return gradient_report(loss_fn, tensors, eps, samples, rng).worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               samples: int | None = None, seed: int = 0) -> float:
    """Max relative gradient error of scalar function ``f`` at ``x``."""
    xx = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    return check_gradients(lambda: f(xx), [xx], eps, samples, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# binary dump

TENSOR_MAGIC = b"CMNT"
TENSOR_VERSION = 1
_HEADER = struct.Struct("<4sIB4Q")


def dump_tensor(t, fp) -> None:
    """Write ``t`` (Tensor or 4-d array) to a binary stream."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = 0 if arr.dtype == np.float32 else 1
    dt = "<f4" if code == 0 else "<f8"
    fp.write(_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, code, *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_tensor(fp) -> Tensor:
    head = fp.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, version, code, *shape = _HEADER.unpack(head)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if code not in (0, 1):
        raise FormatError(f"bad precision code {code}")
    dt = np.dtype("<f4" if code == 0 else "<f8")
    count = int(np.prod(shape))
    raw = fp.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))
    return Tensor(arr.reshape(shape))
