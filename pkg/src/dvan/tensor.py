"""Dense tensors with a reverse-mode tape.

Only the operations the attention network needs are provided. Each op is a
:class:`Function` subclass whose ``forward`` works on plain numpy arrays and
whose ``backward`` maps the output gradient to one gradient per input.
Because the rules are looked up on the class at backward time, a test can
swap out a single rule and watch the gradient checker catch it.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

_GRAD_ENABLED = True
_DEBUG_FINITE = False


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(enabled: bool) -> None:
    """Check every op output for NaN/Inf and raise NumericalError."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class Context:
    """Scratch space an op uses to pass values from forward to backward."""

    __slots__ = ("saved", "attrs")

    def __init__(self):
        self.saved = ()
        self.attrs = {}

    def save(self, *arrays):
        self.saved = arrays


@dataclass(eq=False)
class Node:
    op: type
    ctx: Context
    inputs: tuple


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- autograd -----------------------------------------------------------
    def backward(self):
        backward(self)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return Mul.apply(self, _lift(-1.0, self))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported")
        return Mul.apply(self, _lift(1.0 / other, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis, keepdims=False):
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def tanh(self):
        return Tanh.apply(self)

    def relu(self):
        return ReLU.apply(self)

    def softmax(self, axis=-1):
        return Softmax.apply(self, axis=axis)

    def log(self, floor=1e-12):
        return LogClamped.apply(self, floor=floor)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Function machinery
# ---------------------------------------------------------------------------
class Function:
    """A differentiable op.

    Subclasses implement ``forward(ctx, *arrays, **kw) -> array`` and
    ``backward(ctx, grad) -> tuple`` with one entry (or ``None``) per input.
    """

    @staticmethod
    def forward(ctx, *arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        tensors = tuple(as_tensor(t) for t in inputs)
        ctx = Context()
        out = Tensor(cls.forward(ctx, *(t.data for t in tensors), **kwargs))
        if _DEBUG_FINITE and not np.all(np.isfinite(out.data)):
            raise NumericalError(f"non-finite output from {cls.__name__}")
        if _GRAD_ENABLED and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out.node = Node(cls, ctx, tensors)
        return out


@dataclass
class Graph:
    """Recorded op nodes reachable from one output, in topological order."""

    tensors: list = field(default_factory=list)

    @property
    def nodes(self):
        return [t.node for t in self.tensors if t.node is not None]

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            if tensor.node is not None:
                for parent in tensor.node.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(graph.tensors):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        node = tensor.node
        if node is None:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            continue
        in_grads = node.op.backward(node.ctx, g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"{node.op.__name__}.backward produced {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------
def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not match") from None


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "add")
        ctx.attrs["shapes"] = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.attrs["shapes"]
        return unbroadcast(g, sa), unbroadcast(g, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "sub")
        ctx.attrs["shapes"] = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.attrs["shapes"]
        return unbroadcast(g, sa), unbroadcast(-g, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "mul")
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (s,) = ctx.saved
        return (g * s * (1.0 - s),)


class Tanh(Function):
    @staticmethod
    def forward(ctx, x):
        out = np.tanh(x)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (t,) = ctx.saved
        return (g * (1.0 - t * t),)


class ReLU(Function):
    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx.save(mask)
        return x * mask

    @staticmethod
    def backward(ctx, g):
        (mask,) = ctx.saved
        return (g * mask,)


class LogClamped(Function):
    """Natural log of ``max(x, floor)``; zero gradient where the floor binds."""

    @staticmethod
    def forward(ctx, x, floor=1e-12):
        clamped = np.maximum(x, floor)
        ctx.save(clamped, x >= floor)
        return np.log(clamped)

    @staticmethod
    def backward(ctx, g):
        clamped, live = ctx.saved
        return (g * live / clamped,)


class Softmax(Function):
    @staticmethod
    def forward(ctx, x, axis=-1):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
        ctx.save(out)
        ctx.attrs["axis"] = axis
        return out

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        axis = ctx.attrs["axis"]
        # J^T g for J = diag(y) - y y^T
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
        ctx.save(a, b)
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        if b.ndim == 2:
            # fold all leading axes of a into one GEMM
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        out = MatMul.apply(a.reshape(1, a.shape[0]), b)
        return out.reshape(out.shape[:-2] + out.shape[-1:])
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------
class Sum(Function):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.attrs.update(shape=x.shape, axis=axis, keepdims=keepdims)
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx.attrs["shape"], ctx.attrs["axis"], ctx.attrs["keepdims"]
        if not keepdims and axis is not None:
            g = np.expand_dims(g, _normalize_axes(axis, len(shape)))
        return (np.broadcast_to(g, shape).copy(),)


class Max(Function):
    """Reduction max; the gradient goes to the first maximal entry only."""

    @staticmethod
    def forward(ctx, x, axis, keepdims=False):
        axis = axis % x.ndim
        idx = np.argmax(x, axis=axis)
        out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis)
        ctx.attrs.update(shape=x.shape, axis=axis, idx=idx)
        return out if keepdims else np.squeeze(out, axis=axis)

    @staticmethod
    def backward(ctx, g):
        shape, axis, idx = ctx.attrs["shape"], ctx.attrs["axis"], ctx.attrs["idx"]
        out = np.zeros(shape, dtype=g.dtype)
        if g.ndim < len(shape):
            g = np.expand_dims(g, axis)
        np.put_along_axis(out, np.expand_dims(idx, axis), g, axis=axis)
        return (out,)


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.attrs["shape"] = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.attrs["shape"]),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, x, axes=None):
        axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        ctx.attrs["axes"] = axes
        return np.transpose(x, axes)

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, np.argsort(ctx.attrs["axes"])),)


class GetItem(Function):
    @staticmethod
    def forward(ctx, x, index):
        ctx.attrs.update(shape=x.shape, index=index)
        return np.asarray(x[index])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.attrs["shape"], dtype=g.dtype)
        index = ctx.attrs["index"]
        parts = index if isinstance(index, tuple) else (index,)
        if all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts):
            out[index] = g  # basic indexing never repeats an element
        else:
            np.add.at(out, index, g)
        return (out,)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.attrs["sizes"] = [a.shape[axis] for a in arrays]
        ctx.attrs["axis"] = axis
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        bounds = np.cumsum(ctx.attrs["sizes"])[:-1]
        return tuple(np.split(g, bounds, axis=ctx.attrs["axis"]))


class Stack(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.attrs["axis"] = axis
        return np.stack(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        axis = ctx.attrs["axis"]
        return tuple(np.moveaxis(g, axis, 0))


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis=0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------
class Conv2d(Function):
    """Cross-correlation over ``(N, C, H, W)`` or ``(C, H, W)`` input via im2col.

    Columns are laid out as ``(C*k*k, N*H'*W')`` so the gather copies long
    contiguous runs along the image rows.
    """

    @staticmethod
    def forward(ctx, x, w, stride=1, pad=0):
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(f"conv2d: expected (N,C,H,W) and (O,C,k,k), got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        if ci != c:
            raise DimensionError(f"conv2d: input has {c} channels, kernels expect {ci}")
        if stride < 1:
            raise DimensionError("conv2d: stride must be >= 1")
        if kh > h + 2 * pad or kw > wd + 2 * pad:
            raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
        if pad:
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        xc = x.transpose(1, 0, 2, 3)  # (C, N, Hp, Wp) view
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=np.result_type(x, w))
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(c * kh * kw, n * ho * wo)
        wmat = w.reshape(o, -1)
        out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
        ctx.save(cols, wmat)
        ctx.attrs.update(xshape=x.shape, wshape=w.shape, stride=stride, pad=pad,
                         squeeze=squeeze, oshape=(ho, wo))
        out = np.ascontiguousarray(out)
        return out[0] if squeeze else out

    @staticmethod
    def backward(ctx, g):
        cols, wmat = ctx.saved
        a = ctx.attrs
        n, c, hp, wp = a["xshape"]
        o, _, kh, kw = a["wshape"]
        ho, wo = a["oshape"]
        s, pad = a["stride"], a["pad"]
        if a["squeeze"]:
            g = g[None]
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (gmat @ cols.T).reshape(a["wshape"])
        gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
        gx = np.zeros((c, n, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j]
        gx = gx.transpose(1, 0, 2, 3)
        if pad:
            gx = gx[:, :, pad:hp - pad, pad:wp - pad]
        gx = np.ascontiguousarray(gx)
        if a["squeeze"]:
            gx = gx[0]
        return gx, gw


def conv2d(x, w, stride=1, pad=0) -> Tensor:
    return Conv2d.apply(x, w, stride=stride, pad=pad)


class MaxPool2d(Function):
    """Non-overlapping ``size x size`` max pooling over the last two axes.

    Ties route the gradient to the first maximal offset in row-major order.
    """

    @staticmethod
    def forward(ctx, x, size=2):
        h, w = x.shape[-2:]
        ho, wo = h // size, w // size
        if ho == 0 or wo == 0:
            raise DimensionError(f"maxpool: input {h}x{w} smaller than window {size}")
        views = [x[..., i:ho * size:size, j:wo * size:size]
                 for i in range(size) for j in range(size)]
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for v in views:
            m = (v == out) & ~taken
            taken |= m
            masks.append(m)
        ctx.save(*masks)
        ctx.attrs.update(shape=x.shape, size=size)
        return out

    @staticmethod
    def backward(ctx, g):
        shape, size = ctx.attrs["shape"], ctx.attrs["size"]
        ho, wo = g.shape[-2:]
        out = np.zeros(shape, dtype=g.dtype)
        k = 0
        for i in range(size):
            for j in range(size):
                out[..., i:ho * size:size, j:wo * size:size] = g * ctx.saved[k]
                k += 1
        return (out,)


def max_pool2d(x, size=2) -> Tensor:
    return MaxPool2d.apply(x, size=size)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------
def uniform_init(shape, fan_in, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-6) -> float:
    """Max relative gap between the tape gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. The relative error per coordinate
    is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = Tensor(np.array(as_tensor(point).data, dtype=np.float64), requires_grad=True)
    analytic = _tape_grad(f, x)
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f(x).item()
            flat[k] = orig - eps
            fm = f(x).item()
            flat[k] = orig
            nflat[k] = (fp - fm) / (2 * eps)
    return relative_error(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict, eps: float = 1e-6) -> dict:
    """Per-parameter max relative error for a closure over ``params``.

    Gradients already stored on the parameters are discarded.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    report = {}
    with no_grad():
        for name, p in params.items():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
            numeric = np.zeros_like(p.data)
            flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = loss_fn().item()
                flat[k] = orig - eps
                fm = loss_fn().item()
                flat[k] = orig
                nflat[k] = (fp - fm) / (2 * eps)
            report[name] = relative_error(analytic, numeric)
    for p in params.values():
        p.grad = None
    return report


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _tape_grad(f, x):
    x.grad = None
    out = f(x)
    out.backward()
    return np.zeros_like(x.data) if x.grad is None else x.grad


def parameters_checksum(params: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
