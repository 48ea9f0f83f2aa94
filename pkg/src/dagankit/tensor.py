"""Immutable float64 tensors with reverse-mode automatic differentiation.

Every operation in this module builds a new :class:`Tensor` and, when any
input requires a gradient, records a closure that maps the output gradient
to input gradients. :func:`backward` walks the recorded graph once in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
import builtins
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "parameter",
    "no_grad",
    "grad_enabled",
    "ShapeError",
    "backward",
    "grad",
    "graph_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs",
    "sigmoid",
    "relu",
    "leaky_relu",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "scale",
    "apply_elementwise",
    "broadcast_to",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "index",
    "matmul",
    "conv2d",
    "softmax",
    "grid_sample_bilinear",
    "avg_pool",
    "upsample_bilinear",
    "resample",
    "pad_reflect",
    "box_filter",
    "where_const",
    "detach",
]

MAX_RANK = 4

_ids = itertools.count(1)
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the graph."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array plus its place in the differentiation graph.

    ``node_id`` is ``None`` for constants. Values are read-only.
    """

    __slots__ = ("data", "requires_grad", "node_id", "op", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor values must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        if data.ndim > MAX_RANK:
            raise ShapeError(f"{op}: result rank {data.ndim} exceeds maximum rank {MAX_RANK}")
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"{op} produced non-finite values")
        if data.flags.writeable:
            data.flags.writeable = False
        out.data = data
        out.op = op
        out.name = None
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out.node_id = next(_ids)
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.node_id = None
            out._parents = ()
            out._backward = None
        return out

    # -- conveniences -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def expand(self, shape):
        return broadcast_to(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def detach(x: Tensor) -> Tensor:
    return Tensor._result(x.data, (), None, "detach")


# ---------------------------------------------------------------------------
# elementwise


def _is_scalar(x: Tensor) -> bool:
    return x.data.size == 1


def _reduce_to(g: np.ndarray, x: Tensor) -> np.ndarray:
    if g.shape == x.shape:
        return g
    return np.reshape(np.sum(g), x.shape)


def _operands(a: Tensor, b: Tensor, op: str) -> tuple[np.ndarray, np.ndarray]:
    if a.shape == b.shape:
        return a.data, b.data
    if _is_scalar(b):
        return a.data, b.data.reshape(())
    if _is_scalar(a):
        return a.data.reshape(()), b.data
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only equal shapes or scalar operands)")


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    x, y = _operands(a, b, "add")
    return Tensor._result(x + y, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    x, y = _operands(a, b, "sub")
    return Tensor._result(x - y, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    x, y = _operands(a, b, "mul")
    return Tensor._result(
        x * y, (a, b), lambda g: (_reduce_to(g * y, a), _reduce_to(g * x, b)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    x, y = _operands(a, b, "div")
    out = x / y

    def bw(g):
        gb = g / y
        return _reduce_to(gb, a), _reduce_to(-gb * out, b)

    return Tensor._result(out, (a, b), bw, "div")


def neg(x) -> Tensor:
    x = constant(x)
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c: float) -> Tensor:
    x = constant(x)
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,), "scale")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = constant(x)
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sigmoid(x) -> Tensor:
    x = constant(x)
    out = _stable_sigmoid(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x) -> Tensor:
    x = constant(x)
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = constant(x)
    k = np.where(x.data > 0, 1.0, slope)
    return Tensor._result(x.data * k, (x,), lambda g: (g * k,), "leaky_relu")


def softplus(x) -> Tensor:
    x = constant(x)
    out = np.logaddexp(0.0, x.data)
    return Tensor._result(out, (x,), lambda g: (g * _stable_sigmoid(x.data),), "softplus")


def exp(x) -> Tensor:
    x = constant(x)
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = constant(x)
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = constant(x)
    if np.any(x.data < 0):
        raise FloatingPointError("sqrt of negative value")
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(x) -> Tensor:
    x = constant(x)
    return Tensor._result(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x) -> Tensor:
    x = constant(x)
    return Tensor._result(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


_UNARY: dict[str, Callable[[Tensor], Tensor]] = {
    "neg": neg,
    "abs": abs,
    "sigmoid": sigmoid,
    "relu": relu,
    "softplus": softplus,
    "exp": exp,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def apply_elementwise(op: str, inputs: Sequence, const: float | None = None) -> Tensor:
    """Dispatch one of the named elementwise primitives.

    ``scale`` takes a single input and the constant ``const``.
    """
    if op in _BINARY:
        if len(inputs) != 2:
            raise ValueError(f"{op} takes two inputs")
        return _BINARY[op](*inputs)
    if op in _UNARY:
        if len(inputs) != 1:
            raise ValueError(f"{op} takes one input")
        return _UNARY[op](inputs[0])
    if op == "scale":
        if const is None:
            raise ValueError("scale requires a constant")
        return scale(inputs[0], const)
    raise ValueError(f"unknown elementwise op {op!r}")


def where_const(mask: np.ndarray, x, fill: float) -> Tensor:
    """``x`` where ``mask`` is true, ``fill`` elsewhere; mask is not differentiated."""
    x = constant(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return Tensor._result(np.where(mask, x.data, fill), (x,), lambda g: (np.where(mask, g, 0.0),), "where")


# ---------------------------------------------------------------------------
# shape and reductions


def broadcast_to(x, shape) -> Tensor:
    x = constant(x)
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(x.shape) if s == 1 and shape[i + lead] != 1
    )

    def bw(g):
        return (np.sum(g, axis=axes, keepdims=True).reshape(x.shape),)

    return Tensor._result(np.array(out), (x,), bw, "broadcast")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = constant(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._result(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = constant(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = constant(x)
    out = x.data.reshape(shape)
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = constant(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return Tensor._result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [constant(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return Tensor._result(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [constant(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)
    n = len(xs)
    return Tensor._result(
        out, xs, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack"
    )


def index(x, key) -> Tensor:
    """Basic (slice / integer) indexing."""
    x = constant(x)
    out = x.data[key]

    def bw(g):
        full = np.zeros(x.shape)
        full[key] = g
        return (full,)

    return Tensor._result(np.array(out), (x,), bw, "index")


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: tuple[int, int, int, int],
            dilate: int = 1) -> tuple[np.ndarray, int, int]:
    """Rows of (kh, kw, c) patches from ``x`` (N, C, H, W), channels last.

    ``x`` is first spread out by ``dilate`` (zeros between samples) and padded
    with zeros by ``pad`` = (top, bottom, left, right).
    """
    n, c, h, w = x.shape
    top, bottom, left, right = pad
    hd, wd = (h - 1) * dilate + 1, (w - 1) * dilate + 1
    buf = np.zeros((n, top + hd + bottom, left + wd + right, c))
    buf[:, top : top + hd : dilate, left : left + wd : dilate, :] = x.transpose(0, 2, 3, 1)
    ho = (buf.shape[1] - kh) // stride + 1
    wo = (buf.shape[2] - kw) // stride + 1
    s = buf.strides
    win = as_strided(buf, shape=(n, ho, wo, kh, kw, c),
                     strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]), writeable=False)
    return win.reshape(n * ho * wo, kh * kw * c), ho, wo


def _conv_input_grad(g: np.ndarray, kernel: np.ndarray, padded_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Gradient w.r.t. the padded conv input: full correlation of the dilated
    output gradient with the spatially flipped, channel-swapped kernel."""
    n, o, ho, wo = g.shape
    _, c, kh, kw = kernel.shape
    hp, wp = padded_hw
    # trailing rows/cols that no window reached get zero gradient
    extra_h = hp - ((ho - 1) * stride + kh)
    extra_w = wp - ((wo - 1) * stride + kw)
    cols, _, _ = _im2col(g, kh, kw, 1, (kh - 1, kh - 1 + extra_h, kw - 1, kw - 1 + extra_w), dilate=stride)
    flipped = kernel[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, kh * kw * o)
    return (cols @ flipped.T).reshape(n, hp, wp, c).transpose(0, 3, 1, 2)


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``kernel`` (O, C, kH, kW).

    Zero padding. ``bias`` has shape (O,).
    """
    x, kernel = constant(x), constant(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {ck}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d output has zero extent")
    cols2, _, _ = _im2col(x.data, kh, kw, stride, (padding,) * 4)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = (cols2 @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, kernel]
    if bias is not None:
        bias = constant(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (g2.T @ cols2).reshape(o, kh, kw, c).transpose(0, 3, 1, 2) if kernel.requires_grad else None
        gx = _conv_input_grad(g, kernel.data, (hp, wp), stride) if x.requires_grad else None
        if gx is not None and padding:
            gx = gx[:, :, padding : padding + h, padding : padding + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._result(np.ascontiguousarray(out), parents, bw, "conv2d")


def softmax(x, axis: int = -1) -> Tensor:
    x = constant(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for rank {x.ndim}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# sampling


def _axis_weights(coord: np.ndarray, extent: int):
    """Pixel position, lower index and fraction along one axis (border clamped)."""
    if extent == 1:
        zeros = np.zeros_like(coord)
        return zeros.astype(np.intp), zeros, np.zeros(coord.shape, dtype=bool)
    pos = (coord + 1.0) * 0.5 * (extent - 1)
    # land exactly on pixel centres that rounding missed by a few ulps
    near = np.round(pos)
    pos = np.where(np.abs(pos - near) < 1e-9, near, pos)
    inside = (pos >= 0.0) & (pos <= extent - 1)
    pos = np.clip(pos, 0.0, extent - 1)
    i0 = np.minimum(np.floor(pos), extent - 2).astype(np.intp)
    return i0, pos - i0, inside


def grid_sample_bilinear(image, coords) -> Tensor:
    """Bilinear sampling of ``image`` (N, C, H, W) at ``coords`` (N, H', W', 2).

    ``coords[..., 0]`` is the horizontal (column) coordinate and
    ``coords[..., 1]`` the vertical one, both normalized so that -1 and +1
    are the centers of the first and last pixel. Out-of-range coordinates
    clamp to the border. At exact pixel centers the coordinate gradient is
    the mean of the two one-sided slopes.
    """
    image, coords = constant(image), constant(coords)
    if image.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2:
        raise ShapeError(f"grid_sample expects (N,C,H,W) and (N,H',W',2), got {image.shape}, {coords.shape}")
    n, c, h, w = image.shape
    if coords.shape[0] != n:
        raise ShapeError(f"batch mismatch {image.shape[0]} vs {coords.shape[0]}")
    ho, wo = coords.shape[1:3]
    x0, fx, in_x = _axis_weights(coords.data[..., 0], w)
    y0, fy, in_y = _axis_weights(coords.data[..., 1], h)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    img = image.data.reshape(n, c, h * w)

    def gather(yi, xi):
        flat = (yi * w + xi).reshape(n, 1, ho * wo)
        return np.take_along_axis(img, np.broadcast_to(flat, (n, c, ho * wo)), axis=2).reshape(n, c, ho, wo)

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    wx, wy = fx[:, None], fy[:, None]
    # weighted form is exact at fractions 0 and 1
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    out = top * (1 - wy) + bot * wy

    def bw(g):
        gimg = np.zeros((n, c, h * w))
        wts = (
            ((1 - fx) * (1 - fy), y0, x0),
            (fx * (1 - fy), y0, x1),
            ((1 - fx) * fy, y1, x0),
            (fx * fy, y1, x1),
        )
        plane = ((np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w))[:, :, None, None]
        flat_g = gimg.reshape(-1)
        for wt, yi, xi in wts:
            flat = (plane + (yi * w + xi)[:, None]).reshape(-1)
            flat_g += np.bincount(flat, weights=(g * wt[:, None]).reshape(-1), minlength=flat_g.size)
        # coordinate gradients
        dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        if w > 1:
            dx = _center_slope(dx, fx, x0, y0, y1, wy, img, n, c, h, w, axis="x")
        if h > 1:
            dy = _center_slope(dy, fy, y0, x0, x1, wx, img, n, c, h, w, axis="y")
        gcx = np.sum(g * dx, axis=1) * (0.5 * (w - 1)) * in_x
        gcy = np.sum(g * dy, axis=1) * (0.5 * (h - 1)) * in_y
        return gimg.reshape(image.shape), np.stack([gcx, gcy], axis=-1)

    return Tensor._result(out, (image, coords), bw, "grid_sample")


def _center_slope(d, frac, i0, j0, j1, wj, img, n, c, h, w, axis):
    """Replace one-sided slopes by central slopes where the sample sits on a pixel center."""
    exact = (frac == 0.0) & (i0 > 0)
    if not np.any(exact):
        return d
    im = np.maximum(i0 - 1, 0)
    ho, wo = frac.shape[1:]

    def at(row, col):
        flat = (row * w + col).reshape(n, 1, ho * wo)
        return np.take_along_axis(img, np.broadcast_to(flat, (n, c, ho * wo)), axis=2).reshape(n, c, ho, wo)

    if axis == "x":
        left = (1 - wj) * (at(j0, i0) - at(j0, im)) + wj * (at(j1, i0) - at(j1, im))
    else:
        left = (1 - wj) * (at(i0, j0) - at(im, j0)) + wj * (at(i0, j1) - at(im, j1))
    return np.where(exact[:, None], 0.5 * (d + left), d)


def avg_pool(x, factor: int) -> Tensor:
    x = constant(x)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"average pooling by {factor} needs extents divisible by it, got {h}x{w}")
    k = factor
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return Tensor._result(out, (x,), bw, "avg_pool")


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    m = np.zeros((dst, src))
    if src == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, src - 1, dst)
    i0 = np.minimum(np.floor(pos).astype(int), src - 2)
    f = pos - i0
    m[np.arange(dst), i0] = 1 - f
    m[np.arange(dst), i0 + 1] += f
    return m


def upsample_bilinear(x, factor: int) -> Tensor:
    """Bilinear upsampling with corner-aligned sample positions."""
    x = constant(x)
    n, c, h, w = x.shape
    mh = _interp_matrix(h, h * factor)
    mw = _interp_matrix(w, w * factor)
    out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)

    def bw(g):
        return (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),)

    return Tensor._result(out, (x,), bw, "upsample")


def _reflect_matrix(extent: int, pad: int) -> np.ndarray:
    idx = np.pad(np.arange(extent), pad, mode="reflect")
    m = np.zeros((extent + 2 * pad, extent))
    m[np.arange(idx.size), idx] = 1.0
    return m


def pad_reflect(x, pad: int) -> Tensor:
    """Mirror-pad the two spatial axes of (N, C, H, W) by ``pad`` pixels."""
    x = constant(x)
    n, c, h, w = x.shape
    if pad >= h or pad >= w:
        raise ShapeError(f"reflection pad {pad} too large for {h}x{w}")
    mh, mw = _reflect_matrix(h, pad), _reflect_matrix(w, pad)
    out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)

    def bw(g):
        return (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),)

    return Tensor._result(out, (x,), bw, "pad_reflect")


def box_filter(x, window: int) -> Tensor:
    """Per-channel local mean over ``window`` x ``window`` with mirrored borders."""
    x = constant(x)
    n, c, h, w = x.shape
    kernel = np.full((1, 1, window, window), 1.0 / (window * window))
    flat = reshape(pad_reflect(x, window // 2), (n * c, 1, h + 2 * (window // 2), w + 2 * (window // 2)))
    return reshape(conv2d(flat, kernel), (n, c, h, w))


def resample(x, factor: float, mode: str) -> Tensor:
    """Downsample by average pooling or upsample bilinearly by a rational ``factor``."""
    if mode == "average-pool-down":
        k = 1.0 / factor
        if builtins.abs(k - round(k)) > 1e-9 or round(k) < 1:
            raise ShapeError(f"pooling factor {factor} is not 1/integer")
        return avg_pool(x, int(round(k)))
    if mode == "bilinear-up":
        if builtins.abs(factor - round(factor)) > 1e-9 or round(factor) < 1:
            raise ShapeError(f"upsampling factor {factor} is not an integer")
        return upsample_bilinear(x, int(round(factor)))
    raise ValueError(f"unknown resample mode {mode!r}")


# ---------------------------------------------------------------------------
# graph traversal


def graph_of(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradients, in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss``, keyed by node id.

    When ``params`` is given, every listed tensor appears in the result,
    with zeros for those the loss does not depend on.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        order = graph_of(loss)
        acc: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for node in reversed(order):
            g = acc.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                grads[node.node_id] = grads.get(node.node_id, 0) + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in acc:
                    acc[key] = acc[key] + pg
                else:
                    acc[key] = np.array(pg, dtype=np.float64)
    if params is not None:
        return {p.node_id: grads.get(p.node_id, np.zeros(p.shape)) for p in params}
    return grads


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    g = backward(loss, params)
    return [g[p.node_id] for p in params]

