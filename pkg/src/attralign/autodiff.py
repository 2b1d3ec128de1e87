"""Reverse-mode automatic differentiation over dense float64 tensors.

Every backward rule is itself written in terms of the public tensor ops, so a
backward pass can be recorded into the graph (``create_graph=True``) and
differentiated again. This is what lets a loss defined on input gradients be
optimized with respect to model parameters (double backpropagation).

Conventions:
  - 64-bit floats everywhere; inputs are coerced to C-contiguous float64.
  - relu / clamp-min use subgradient 0 at the kink; their masks are constants,
    so gradients-of-gradients through them are zero almost everywhere.
  - max reductions route gradient to the first maximal element in scan order.
  - Graphs are freed after a ``create_graph=False`` backward; a repeated
    backward over a freed graph raises ``GraphFreedError``.
"""

from __future__ import annotations

import threading
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _np_erf


class ShapeError(ValueError):
    """Operand shapes incompatible with an op's shape rule."""


class GraphFreedError(RuntimeError):
    """Backward was called over a graph already freed by a previous backward."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class _Node:
    """Graph record: producing op, parent tensors, and the vjp closure."""

    __slots__ = ("op", "parents", "vjp", "freed")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.freed = False


class Tensor:
    """Dense float64 array participating in the computation graph.

    ``node`` is None for leaves (parameters, inputs, constants). Hashing and
    equality are by identity so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, node: Optional[_Node] = None,
                 name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; all dispatch to module-level ops
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

    def __pow__(self, p):
        return power(self, p)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return tmin(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Create the output tensor, recording a node when recording applies."""
    parents = tuple(parents)
    req = _grad_enabled() and any(p.requires_grad for p in parents)
    node = _Node(op, parents, vjp) if req else None
    return Tensor(data, requires_grad=req, node=node)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _keepdims_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcasted gradient back to ``shape`` (inverse of broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting, unbroadcast in backward)
# ---------------------------------------------------------------------------

def _binary_check(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_check("add", a, b)
    out = a.data + b.data
    return _make("add", out, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_check("sub", a, b)
    out = a.data - b.data
    return _make("sub", out, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_check("mul", a, b)
    out = a.data * b.data
    return _make("mul", out, (a, b),
                 lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_check("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_sum_to(div(g, b), a.shape),
                            _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)))


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def neg(a) -> Tensor:
    a = _wrap(a)
    return _make("neg", -a.data, (a,), lambda g: (neg(g),))


def texp(a) -> Tensor:
    a = _wrap(a)
    out_arr = np.exp(a.data)
    out_const = Tensor(out_arr)
    return _make("exp", out_arr, (a,), lambda g: (mul(g, out_const),))


def tlog(a) -> Tensor:
    a = _wrap(a)
    return _make("log", np.log(a.data), (a,), lambda g: (div(g, a),))


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    out = a.data ** p
    return _make("power", out, (a,),
                 lambda g: (mul(g, mul(Tensor(p), power(a, p - 1.0))),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def clamp_min(a, threshold: float = 0.0) -> Tensor:
    a = _wrap(a)
    t = float(threshold)
    mask = Tensor((a.data > t).astype(np.float64))
    return _make("clamp-min", np.maximum(a.data, t), (a,),
                 lambda g: (mul(g, mask),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make("relu", np.maximum(a.data, 0.0), (a,),
                 lambda g: (mul(g, mask),))


def tabs(a) -> Tensor:
    a = _wrap(a)
    sign = Tensor(np.sign(a.data))
    return _make("abs", np.abs(a.data), (a,), lambda g: (mul(g, sign),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out_arr = np.empty_like(x)
    pos = x >= 0
    out_arr[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_arr[~pos] = ex / (1.0 + ex)
    out_const = Tensor(out_arr)
    return _make("sigmoid", out_arr, (a,),
                 lambda g: (mul(g, mul(out_const, sub(1.0, out_const))),))


def terf(a) -> Tensor:
    a = _wrap(a)
    coeff = 2.0 / np.sqrt(np.pi)
    return _make("erf", _np_erf(a.data), (a,),
                 lambda g: (mul(g, mul(Tensor(coeff), texp(neg(mul(a, a))))),))


def gelu(a) -> Tensor:
    a = _wrap(a)
    return mul(mul(a, 0.5), add(1.0, terf(div(a, np.sqrt(2.0)))))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    kd_shape = _keepdims_shape(a.shape, axis)
    in_shape = a.shape

    def vjp(g):
        return (broadcast_to(reshape(g, kd_shape), in_shape),)

    return _make("sum", out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return div(tsum(a, axis=axis, keepdims=keepdims), float(count))


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction over all elements or one axis, gradient to first maximum."""
    a = _wrap(a)
    if axis is not None and not isinstance(axis, int):
        raise ShapeError(f"max: axis must be None or int, got {axis!r}")
    out = np.max(a.data, axis=axis, keepdims=keepdims)
    mask_arr = np.zeros_like(a.data)
    if axis is None:
        mask_arr.reshape(-1)[np.argmax(a.data.reshape(-1))] = 1.0
    else:
        am = np.argmax(a.data, axis=axis)
        np.put_along_axis(mask_arr, np.expand_dims(am, axis), 1.0, axis=axis)
    mask = Tensor(mask_arr)
    kd_shape = _keepdims_shape(a.shape, axis)

    def vjp(g):
        return (mul(reshape(g, kd_shape), mask),)

    return _make("max", out, (a,), vjp)


def tmin(a, axis=None, keepdims: bool = False) -> Tensor:
    return neg(tmax(neg(a), axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}")
    in_shape = a.shape
    return _make("reshape", out, (a,), lambda g: (reshape(g, in_shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}")
    in_shape = a.shape
    return _make("broadcast", out, (a,), lambda g: (_sum_to(g, in_shape),))


def take_flat(a, flat_index: np.ndarray, out_shape: tuple) -> Tensor:
    """Gather: out.flat[k] = a.flat[flat_index.flat[k]]; adjoint of put_flat."""
    a = _wrap(a)
    idx = flat_index
    out = a.data.reshape(-1)[idx.reshape(-1)].reshape(out_shape)
    in_shape = a.shape
    return _make("take", out, (a,), lambda g: (put_flat(g, idx, in_shape),))


def put_flat(v, flat_index: np.ndarray, out_shape: tuple) -> Tensor:
    """Scatter-add v into a zero tensor of out_shape; adjoint of take_flat."""
    v = _wrap(v)
    idx = flat_index
    out = np.zeros(int(np.prod(out_shape)), dtype=np.float64)
    np.add.at(out, idx.reshape(-1), v.data.reshape(-1))
    out = out.reshape(out_shape)
    in_shape = v.shape
    return _make("put", out, (v,), lambda g: (take_flat(g, idx, in_shape),))


def slice_(a, key) -> Tensor:
    """Basic slicing (ints, slices, tuples) as a gather."""
    a = _wrap(a)
    try:
        view = np.arange(a.size).reshape(a.shape)[key]
    except IndexError as e:
        raise ShapeError(f"slice: invalid index {key!r} for shape {a.shape}: {e}")
    return take_flat(a, np.ascontiguousarray(view), view.shape)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis, built from scatter embeddings."""
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    shapes = [t.shape for t in tensors]
    nd = tensors[0].ndim
    axis = axis % nd
    for s in shapes[1:]:
        if len(s) != nd or any(s[i] != shapes[0][i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    out_shape = list(shapes[0])
    out_shape[axis] = sum(s[axis] for s in shapes)
    out_shape = tuple(out_shape)
    positions = np.arange(int(np.prod(out_shape))).reshape(out_shape)
    out = None
    offset = 0
    for t in tensors:
        sl = [slice(None)] * nd
        sl[axis] = slice(offset, offset + t.shape[axis])
        idx = np.ascontiguousarray(positions[tuple(sl)])
        part = put_flat(t, idx, out_shape)
        out = part if out is None else add(out, part)
        offset += t.shape[axis]
    return out


@lru_cache(maxsize=256)
def _pad2d_indices(shape: tuple, pad: int) -> tuple:
    b, c, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    out_shape = (b, c, hp, wp)
    positions = np.arange(int(np.prod(out_shape))).reshape(out_shape)
    idx = np.ascontiguousarray(positions[:, :, pad:pad + h, pad:pad + w])
    return idx, out_shape


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes of a (B, C, H, W) tensor."""
    a = _wrap(a)
    if a.ndim != 4:
        raise ShapeError(f"pad2d: expected 4-d input, got shape {a.shape}")
    if pad == 0:
        return a
    idx, out_shape = _pad2d_indices(a.shape, pad)
    return put_flat(a, idx, out_shape)


# ---------------------------------------------------------------------------
# matmul / conv / pooling
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """2-d matrix product or 3-d batch matrix product (no batch broadcasting)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape} inner dims differ")
        out = a.data @ b.data
        return _make("matmul", out, (a, b),
                     lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batch shapes {a.shape} @ {b.shape} incompatible")
        out = a.data @ b.data
        return _make("matmul", out, (a, b),
                     lambda g: (matmul(g, transpose(b, (0, 2, 1))),
                                matmul(transpose(a, (0, 2, 1)), g)))
    raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")


@lru_cache(maxsize=256)
def _window_indices(c: int, h: int, w: int, kh: int, kw: int, stride: int) -> tuple:
    """Flat gather indices turning one (c,h,w) sample into (ho*wo, c*kh*kw) windows."""
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    base = np.arange(c * h * w).reshape(c, h, w)
    # (c, kh, kw) offsets within one window, then window top-left corners
    patch = base[:, :kh, :kw].reshape(-1)
    rows = stride * np.repeat(np.arange(ho), wo)
    cols = stride * np.tile(np.arange(wo), ho)
    corners = rows * w + cols
    idx = corners[:, None] + patch[None, :]
    return np.ascontiguousarray(idx), ho, wo


@lru_cache(maxsize=64)
def _full_window_indices(b: int, c: int, h: int, w: int, kh: int, kw: int, stride: int):
    idx, ho, wo = _window_indices(c, h, w, kh, kw, stride)
    full = idx[None, :, :] + (np.arange(b) * c * h * w)[:, None, None]
    return np.ascontiguousarray(full), ho, wo


def _batched_windows(x: Tensor, kh: int, kw: int, stride: int):
    b, c, h, w = x.shape
    full, ho, wo = _full_window_indices(b, c, h, w, kh, kw, stride)
    cols = take_flat(x, full, (b, ho * wo, c * kh * kw))
    return cols, ho, wo


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation: (B,Cin,H,W) * (Cout,Cin,kh,kw) -> (B,Cout,Ho,Wo)."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape} vs weight {weight.shape}")
    cout, cin, kh, kw = weight.shape
    xp = pad2d(x, padding)
    b = x.shape[0]
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {xp.shape}")
    cols, ho, wo = _batched_windows(xp, kh, kw, stride)
    flat = reshape(cols, (b * ho * wo, cin * kh * kw))
    wmat = transpose(reshape(weight, (cout, cin * kh * kw)))
    out = matmul(flat, wmat)
    if bias is not None:
        out = add(out, reshape(_wrap(bias), (1, cout)))
    out = reshape(out, (b, ho, wo, cout))
    return transpose(out, (0, 3, 1, 2))


def max_pool2d(x, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling; ties go to the first element of the window in scan order."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"max-pool: expected 4-d input, got {x.shape}")
    stride = stride or kernel
    b, c, h, w = x.shape
    xr = reshape(x, (b * c, 1, h, w))
    cols, ho, wo = _batched_windows(xr, kernel, kernel, stride)
    m = tmax(cols, axis=2)
    return reshape(m, (b, c, ho, wo))


def mean_pool2d(x, kernel: int, stride: Optional[int] = None) -> Tensor:
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"mean-pool: expected 4-d input, got {x.shape}")
    stride = stride or kernel
    b, c, h, w = x.shape
    xr = reshape(x, (b * c, 1, h, w))
    cols, ho, wo = _batched_windows(xr, kernel, kernel, stride)
    m = tmean(cols, axis=2)
    return reshape(m, (b, c, ho, wo))


# ---------------------------------------------------------------------------
# composite activations / normalization
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is treated as a constant."""
    a = _wrap(a)
    shift = tmax(a, axis=axis % a.ndim, keepdims=True).detach()
    e = texp(sub(a, shift))
    return div(e, tsum(e, axis=axis % a.ndim, keepdims=True))


def layernorm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    a = _wrap(a)
    mu = tmean(a, axis=-1, keepdims=True)
    xc = sub(a, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    normed = div(xc, sqrt(add(var, eps)))
    return add(mul(normed, _wrap(gamma)), _wrap(beta))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) via the stable log-sum-exp form: -softplus(-a)."""
    a = _wrap(a)
    # softplus(x) = max(x, 0) + log(1 + exp(-|x|))
    x = neg(a)
    return neg(add(clamp_min(x, 0.0), tlog(add(1.0, texp(neg(tabs(x)))))))


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy over all elements, from raw logits."""
    logits, targets = _wrap(logits), _wrap(targets)
    if logits.shape != targets.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {targets.shape}")
    # max(z,0) - z*y + log(1 + exp(-|z|))
    per = add(sub(clamp_min(logits, 0.0), mul(logits, targets)),
              tlog(add(1.0, texp(neg(tabs(logits))))))
    return tmean(per)


# ---------------------------------------------------------------------------
# spec-facing dispatch
# ---------------------------------------------------------------------------

_OP_TABLE = {
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "div": lambda inputs, attrs: div(*inputs),
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "conv2d": lambda inputs, attrs: conv2d(*inputs, **attrs),
    "max-pool": lambda inputs, attrs: max_pool2d(inputs[0], **attrs),
    "mean-pool": lambda inputs, attrs: mean_pool2d(inputs[0], **attrs),
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "gelu": lambda inputs, attrs: gelu(inputs[0]),
    "sigmoid": lambda inputs, attrs: sigmoid(inputs[0]),
    "softmax": lambda inputs, attrs: softmax(inputs[0], **attrs),
    "layernorm": lambda inputs, attrs: layernorm(*inputs, **attrs),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "transpose": lambda inputs, attrs: transpose(inputs[0], attrs.get("axes")),
    "slice": lambda inputs, attrs: slice_(inputs[0], attrs["key"]),
    "concat": lambda inputs, attrs: concat(inputs, **attrs),
    "sum": lambda inputs, attrs: tsum(inputs[0], **attrs),
    "mean": lambda inputs, attrs: tmean(inputs[0], **attrs),
    "max": lambda inputs, attrs: tmax(inputs[0], **attrs),
    "min": lambda inputs, attrs: tmin(inputs[0], **attrs),
    "abs": lambda inputs, attrs: tabs(inputs[0]),
    "clamp-min": lambda inputs, attrs: clamp_min(inputs[0], **attrs),
    "power": lambda inputs, attrs: power(inputs[0], attrs["exponent"]),
    "exp": lambda inputs, attrs: texp(inputs[0]),
    "log": lambda inputs, attrs: tlog(inputs[0]),
}

OP_KINDS = tuple(sorted(_OP_TABLE))


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Apply an op by kind name. Raises ShapeError on incompatible shapes."""
    if kind not in _OP_TABLE:
        raise ValueError(f"unknown op kind {kind!r}; known: {OP_KINDS}")
    return _OP_TABLE[kind](list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _toposort(output: Tensor) -> list:
    """Parents-before-children order over grad-requiring tensors; iterative."""
    order: list = []
    seen = set()
    stack = [(output, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(output: Tensor, targets: Sequence[Tensor], create_graph: bool = False) -> dict:
    """Reverse-mode gradients of a scalar output with respect to targets.

    Returns a dict keyed by target tensor (identity); targets that are not
    ancestors of the output map to zero tensors. With ``create_graph=True``
    the returned gradients are themselves graph-recorded, so a second
    backward over them is valid; otherwise the traversed graph is freed.
    """
    if output.size != 1:
        raise ValueError(
            f"backward: output has shape {output.shape}; reduce to a scalar first")
    targets = list(targets)
    for t in targets:
        if not t.requires_grad:
            raise ValueError("backward: every target must require grad")
    if not output.requires_grad or output.node is None:
        return {t: zeros(t.shape) for t in targets}

    order = _toposort(output)
    for t in order:
        if t.node is not None and t.node.freed:
            raise GraphFreedError(
                "backward over a freed graph; re-run the forward pass "
                "or use create_graph=True on the inner backward")

    grads: dict = {id(output): ones(output.shape)}
    ctx = no_grad() if not create_graph else _NullCtx()
    with ctx:
        for t in reversed(order):
            g = grads.get(id(t))
            if g is None or t.node is None:
                continue
            parent_grads = t.node.vjp(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    if not create_graph:
        for t in order:
            if t.node is not None:
                t.node.freed = True
                t.node.vjp = None

    result = {}
    for t in targets:
        g = grads.get(id(t))
        result[t] = g if g is not None else zeros(t.shape)
    return result


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     step: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, the testing oracle.

    f is evaluated as given (recording is not suppressed), so it may itself
    run inner backward passes.
    """
    if step <= 0:
        raise ValueError("finite_diff_grad: step must be positive")

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr.copy()))
        return out.item() if isinstance(out, Tensor) else float(out)

    base = x.data.copy()
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = evaluate(base)
        flat[i] = orig - step
        fm = evaluate(base)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return Tensor(grad.reshape(x.shape))
