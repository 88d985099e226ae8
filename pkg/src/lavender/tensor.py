"""Dense numpy tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node that holds references to its
inputs and a closure that pushes the output gradient back to them. Calling
``backward`` on a scalar visits all ancestors in reverse creation order, which
is a valid topological order and keeps gradient accumulation deterministic.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "as_tensor",
    "parameter",
    "no_grad_value",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "transpose",
    "swapaxes",
    "softmax",
    "log",
    "exp",
    "sqrt",
    "mean",
    "sum",
    "amax",
    "reshape",
    "getitem",
    "take_rows",
    "concat",
    "stack",
    "conv2d",
    "bilinear_matrix",
    "bilinear_resize",
    "squared_error",
    "nll_loss",
    "normalize",
    "instance_norm",
    "batch_norm",
    "layer_norm",
    "silu",
    "gelu",
    "relu",
    "sigmoid",
    "tanh",
    "grad_check",
]

MASK_VALUE = -1e9

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinite values."""


class Tensor:
    """An n-dimensional array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph -------------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every ancestor that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        nodes = _ancestors(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate gradients are not needed once propagated
                if node._parents:
                    node.grad = None

    # -- operator sugar ----------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _ancestors(root: Tensor) -> list[Tensor]:
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    # parents are always created before children
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], Iterable]) -> Tensor:
    """Wrap ``data`` as the output of ``op``; ``backward`` yields one gradient per parent."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values (output shape {np.shape(data)})")
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def _bw(g: np.ndarray) -> None:
            for p, pg in zip(parents, backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                p.grad = pg if p.grad is None else p.grad + pg

        out._backward = _bw
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    ref = a_t if a_t is not None else b_t
    dtype = None if ref is None else ref.dtype
    if a_t is None:
        a_t = Tensor(np.asarray(a, dtype=dtype))
    if b_t is None:
        b_t = Tensor(np.asarray(b, dtype=dtype))
    return a_t, b_t


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _result(out, "div", (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = a.dtype.type(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the self-gated linear unit."""
    with np.errstate(over="ignore"):  # exp overflow gives s = 0, the right limit
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    return _result(out, "silu", (a,), lambda g: (g * (s + out * (1.0 - s)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, "gelu", (a,), bw)


# -- linear algebra & shape ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, "matmul", (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: needs at least 2 dims, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not match shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing with scatter-add gradient."""
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}: {exc}") from None

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), "slice", (a,), bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: ids out of range for table shape {table.shape}")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return _result(out, "take_rows", (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, "concat", tensors, lambda g: np.split(g, splits, axis=axis))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(out, "stack", tensors,
                   lambda g: [np.take(g, i, axis=axis) for i in range(n)])


# -- reductions ------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out, "mean", (a,), bw)


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        return (full,)

    return _result(out, "max", (a,), bw)


# -- softmax & losses --------------------------------------------------------------

def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is added to the logits first.

    Use ``MASK_VALUE`` (-1e9) entries for disallowed positions so that
    gradients stay finite.
    """
    z = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=z.dtype)
        try:
            z = z + mask
        except ValueError:
            raise ShapeError(f"softmax: mask shape {mask.shape} incompatible with {a.shape}") from None
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, "softmax", (a,), bw)


def squared_error(a, b) -> Tensor:
    """Sum of squared element-wise differences."""
    a, b = _coerce(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: shapes differ {a.shape} and {b.shape}")
    diff = a.data - b.data
    return _result(np.sum(diff * diff), "squared_error", (a, b),
                   lambda g: (2.0 * g * diff, -2.0 * g * diff))


def nll_loss(logits: Tensor, targets) -> Tensor:
    """Summed negative log-likelihood of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.intp)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"nll_loss: logits {logits.shape} vs targets {targets.shape}")
    n_cls = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_cls):
        raise ValueError(f"nll_loss: target id out of range [0, {n_cls})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    out = -picked.sum()

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p,)

    return _result(np.asarray(out, dtype=logits.dtype), "nll_loss", (logits,), bw)


# -- normalization -------------------------------------------------------------------

def normalize(a: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalization over ``axes`` (biased variance)."""
    axes = _norm_axis(axes, a.ndim)
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * out).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - out * gym),)

    return _result(out, "normalize", (a,), bw)


def instance_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization of an ``[N, C, H, W]`` tensor."""
    if a.ndim != 4:
        raise ShapeError(f"instance_norm: expected [N, C, H, W], got {a.shape}")
    return normalize(a, (2, 3), eps)


def batch_norm(a: Tensor, eps: float = 1e-5, running: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Per-channel normalization of ``[N, C, H, W]`` over N, H, W.

    With ``running=(mean, var)`` the stored statistics are used instead
    (inference mode) and the op is affine in its input.
    """
    if a.ndim != 4:
        raise ShapeError(f"batch_norm: expected [N, C, H, W], got {a.shape}")
    if running is None:
        return normalize(a, (0, 2, 3), eps)
    rm, rv = (np.asarray(r, dtype=a.dtype).reshape(1, -1, 1, 1) for r in running)
    inv = 1.0 / np.sqrt(rv + eps)
    return _result((a.data - rm) * inv, "batch_norm", (a,), lambda g: (g * inv,))


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    return normalize(a, (-1,), eps)


# -- convolution & resizing ---------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, same-padded 2-D convolution (cross-correlation).

    ``x`` is ``[N, Cin, H, W]``, ``w`` is ``[Cout, Cin, k, k]`` with odd ``k``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] \
            or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # [N, Cin, H, W, k, k]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(n, h, wd, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * wd, cout)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, h, wd, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, "conv2d", parents, bw)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``[n_out, n_in]`` 1-D bilinear interpolation weights, half-pixel centers, edge clamp."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"bilinear_resize: sizes must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(a: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinearly resample the last two axes of ``a`` to ``size``."""
    if a.ndim < 2:
        raise ShapeError(f"bilinear_resize: needs at least 2 dims, got {a.shape}")
    rh = bilinear_matrix(a.shape[-2], size[0], a.dtype)
    rw = bilinear_matrix(a.shape[-1], size[1], a.dtype)
    out = rh @ a.data @ rw.T
    return _result(out, "bilinear_resize", (a,), lambda g: (rh.T @ g @ rw,))


# -- gradient checking ------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6,
               indices: Iterable[tuple[int, ...]] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. ``indices`` restricts the check to
    a subset of elements (all by default). The error per element is
    ``|analytic - numeric| / (|numeric| + 1e-12)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, copy=True)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad

    def evaluate(arr):
        val = f(Tensor(arr, requires_grad=False)).item()
        if not np.isfinite(val):
            raise NonFiniteError("grad_check: f is non-finite at a perturbed point")
        return val

    if indices is None:
        indices = list(np.ndindex(base.shape))
    worst = 0.0
    for idx in indices:
        plus = base.copy()
        plus[idx] += eps
        minus = base.copy()
        minus[idx] -= eps
        numeric = (evaluate(plus) - evaluate(minus)) / (2 * eps)
        err = abs(analytic[idx] - numeric) / (abs(numeric) + 1e-12)
        worst = max(worst, err)
    return float(worst)
