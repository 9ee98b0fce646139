"""Dense float64 tensors with a reverse-mode tape.

Every primitive is a plain function taking and returning :class:`Tensor`.
When any input requires a gradient the primitive records a :class:`TapeNode`
holding the backward rule.  :func:`backward` walks the reachable nodes in
reverse creation order and accumulates gradients.

Leading batch dimensions are allowed wherever the primitive's shape rule
only constrains the trailing axes (MatMul, LayerNorm, Softmax, GatherRows).
"""
from __future__ import annotations

import contextlib
import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "TapeNode", "Primitive", "ShapeMismatch", "NonFiniteInput",
    "NonScalarLoss", "NondeterministicLoss", "no_grad", "grad_enabled",
    "parameter", "constant", "backward", "check_gradient",
    "matmul", "add_bias", "conv2d", "batch_norm2d", "layer_norm", "gelu",
    "tanh", "softmax", "log_softmax", "add", "sub", "mul", "scalar_mul",
    "abs_", "concat", "slice_", "mean", "sum_", "embedding_lookup",
    "gather_rows", "reshape", "transpose",
]

CHECK_FINITE = True
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeMismatch(ValueError):
    pass


class NonFiniteInput(FloatingPointError):
    pass


class NonScalarLoss(ValueError):
    pass


class NondeterministicLoss(RuntimeError):
    pass


class Primitive(enum.Enum):
    MATMUL = "MatMul"
    ADD_BIAS = "AddBias"
    CONV2D = "Conv2d"
    BATCH_NORM2D = "BatchNorm2d"
    LAYER_NORM = "LayerNorm"
    GELU = "Gelu"
    TANH = "Tanh"
    SOFTMAX = "Softmax"
    LOG_SOFTMAX = "LogSoftmax"
    ELEM_ADD = "ElemAdd"
    ELEM_SUB = "ElemSub"
    ELEM_MUL = "ElemMul"
    SCALAR_MUL = "ScalarMul"
    ABS = "Abs"
    CONCAT = "Concat"
    SLICE = "Slice"
    MEAN = "Mean"
    SUM = "Sum"
    EMBEDDING_LOOKUP = "EmbeddingLookup"
    GATHER_ROWS = "GatherRows"
    RESHAPE = "Reshape"
    TRANSPOSE = "Transpose"


_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@dataclass(eq=False)
class TapeNode:
    primitive: Primitive
    inputs: tuple
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)
    order: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    """A dense float64 array plus an optional tape record."""

    __slots__ = ("data", "requires_grad", "grad", "name", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node: TapeNode | None = None

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

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteInput(f"tensor {self.name or '<anon>'} holds NaN/Inf")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; each maps onto a single primitive
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, index):
        return slice_(self, index)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _record(prim: Primitive, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn, **saved) -> Tensor:
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out.node = TapeNode(prim, tuple(inputs), out, backward_fn, saved)
    return out


def _check_inputs(prim: Primitive, *inputs: Tensor) -> None:
    if not CHECK_FINITE:
        return
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteInput(f"{prim.value}: non-finite input of shape {t.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(prim: Primitive, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{prim.value}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    _check_inputs(Primitive.MATMUL, a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(
            f"MatMul: inner dims differ, left {a.shape} (last={a.shape[-1] if a.ndim else None}) "
            f"vs right {b.shape} (second-last={b.shape[-2] if b.ndim > 1 else None})")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(Primitive.MATMUL, (a, b), out, bw)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    _check_inputs(Primitive.ADD_BIAS, x, bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeMismatch(f"AddBias: bias {bias.shape} does not match last dim of {x.shape}")
    out = x.data + bias.data

    def bw(g):
        return g, g.reshape(-1, bias.shape[0]).sum(axis=0)

    return _record(Primitive.ADD_BIAS, (x, bias), out, bw)


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(n, C, H, W) -> (n, H, W, C*k*k) with zero same-padding."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    n, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h, w, c * k * k)


def _conv_same(x: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    cout, cin, k, _ = w.shape
    if k == 1:
        return np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0], optimize=True)
    if cols is None:
        cols = _im2col(x, k)
    out = cols @ w.reshape(cout, cin * k * k).T
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, zero same-padded 2-D convolution; x is (n, C, H, W)."""
    inputs = (x, weight) if bias is None else (x, weight, bias)
    _check_inputs(Primitive.CONV2D, *inputs)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"Conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if cin != x.shape[1]:
        raise ShapeMismatch(f"Conv2d: input channels {x.shape[1]} != weight in_channels {cin}")
    if kh != kw or kh % 2 == 0:
        raise ShapeMismatch(f"Conv2d: kernel must be odd and square, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"Conv2d: bias {bias.shape} != ({cout},)")
    cols = _im2col(x.data, kh) if kh > 1 else None
    out = _conv_same(x.data, weight.data, cols)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        k = kh
        if k == 1:
            gw = np.einsum("nohw,nchw->oc", g, x.data, optimize=True)[:, :, None, None]
        else:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 1, 2])).reshape(weight.shape)
        flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _conv_same(g, np.ascontiguousarray(flipped))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _record(Primitive.CONV2D, inputs, out, bw)


# ---------------------------------------------------------------- normalisation

def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (n, H, W).

    In training mode the running buffers are updated in place (unbiased
    variance, as is conventional); eval mode normalises with them.
    """
    _check_inputs(Primitive.BATCH_NORM2D, x, gamma, beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"BatchNorm2d: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        unbiased = var * count / max(count - 1, 1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            m = x.data.size // x.shape[1]
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _record(Primitive.BATCH_NORM2D, (x, gamma, beta), out, bw, training=training)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    _check_inputs(Primitive.LAYER_NORM, x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"LayerNorm: last dim {d}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _record(Primitive.LAYER_NORM, (x, gamma, beta), out, bw)


# ---------------------------------------------------------------- pointwise

def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    _check_inputs(Primitive.GELU, x)
    a = x.data
    u = _GELU_C * (a + 0.044715 * (a * a * a))
    t = np.tanh(u)
    out = 0.5 * a * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)

    return _record(Primitive.GELU, (x,), out, bw)


def tanh(x: Tensor) -> Tensor:
    _check_inputs(Primitive.TANH, x)
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _record(Primitive.TANH, (x,), out, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_inputs(Primitive.SOFTMAX, x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(Primitive.SOFTMAX, (x,), out, bw, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_inputs(Primitive.LOG_SOFTMAX, x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(Primitive.LOG_SOFTMAX, (x,), out, bw, axis=axis)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs(Primitive.ELEM_ADD, a, b)
    _broadcast_shape(Primitive.ELEM_ADD, a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(Primitive.ELEM_ADD, (a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs(Primitive.ELEM_SUB, a, b)
    _broadcast_shape(Primitive.ELEM_SUB, a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(Primitive.ELEM_SUB, (a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs(Primitive.ELEM_MUL, a, b)
    _broadcast_shape(Primitive.ELEM_MUL, a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(Primitive.ELEM_MUL, (a, b), a.data * b.data, bw)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    _check_inputs(Primitive.SCALAR_MUL, x)

    def bw(g):
        return (g * c,)

    return _record(Primitive.SCALAR_MUL, (x,), x.data * c, bw, scalar=c)


def abs_(x: Tensor) -> Tensor:
    """Absolute value; the subgradient at exactly 0 is 0."""
    _check_inputs(Primitive.ABS, x)

    def bw(g):
        return (g * np.sign(x.data),)

    return _record(Primitive.ABS, (x,), np.abs(x.data), bw)


# ---------------------------------------------------------------- structural

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_inputs(Primitive.CONCAT, *tensors)
    if not tensors:
        raise ShapeMismatch("Concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeMismatch(f"Concat(axis={axis}): {t.shape} incompatible with {ref}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return np.split(g, splits, axis=ax)

    return _record(Primitive.CONCAT, tuple(tensors), out, bw, axis=ax)


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-advanced) slicing; use gather_rows for index arrays."""
    _check_inputs(Primitive.SLICE, x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record(Primitive.SLICE, (x,), np.array(out), bw, index=index)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_inputs(Primitive.MEAN, x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return _record(Primitive.MEAN, (x,), np.asarray(out), bw, axis=axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_inputs(Primitive.SUM, x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(Primitive.SUM, (x,), np.asarray(out), bw, axis=axis)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Rows of a (C, w) table selected by an integer index array."""
    _check_inputs(Primitive.EMBEDDING_LOOKUP, table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch(f"EmbeddingLookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"EmbeddingLookup: index out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(Primitive.EMBEDDING_LOOKUP, (table,), out, bw, indices=idx)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Gather along axis -2: x (..., N, d), indices (..., k) -> (..., k, d)."""
    _check_inputs(Primitive.GATHER_ROWS, x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim < 2 or idx.ndim != x.ndim - 1 or idx.shape[:-1] != x.shape[:-2]:
        raise ShapeMismatch(f"GatherRows: x {x.shape} vs indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
        raise IndexError(f"GatherRows: index out of range [0, {x.shape[-2]})")
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)

    def bw(g):
        gx = np.zeros_like(x.data)
        lead = np.indices(idx.shape, sparse=True)[:-1]
        np.add.at(gx, (*lead, idx), g)
        return (gx,)

    return _record(Primitive.GATHER_ROWS, (x,), out, bw, indices=idx)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    _check_inputs(Primitive.RESHAPE, x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"Reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _record(Primitive.RESHAPE, (x,), out, bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Axis permutation; the default swaps the last two axes."""
    _check_inputs(Primitive.TRANSPOSE, x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeMismatch(f"Transpose: need >=2 dims, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"Transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _record(Primitive.TRANSPOSE, (x,), x.data.transpose(axes), bw, axes=axes)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, params: Iterable[Tensor] | dict | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a name -> gradient map over ``params`` (zeros for parameters the
    loss does not reach).  Leaf gradients are overwritten, not summed, so
    repeated calls do not need a separate zeroing pass.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if isinstance(params, dict):
        params = list(params.values())
    params = list(params) if params is not None else []
    for p in params:
        p.grad = None

    nodes: list[TapeNode] = []
    seen: set[int] = set()
    stack = [loss]
    leaves: dict[int, Tensor] = {}
    while stack:
        t = stack.pop()
        if t.node is None:
            if t.requires_grad:
                leaves[id(t)] = t
            continue
        if id(t.node) in seen:
            continue
        seen.add(id(t.node))
        nodes.append(t.node)
        stack.extend(t.node.inputs)
    nodes.sort(key=lambda n: n.order, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)
    for key, leaf in leaves.items():
        leaf.grad = grads.get(key, np.zeros_like(leaf.data))

    out = {}
    for i, p in enumerate(params):
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p.name or f"param{i}"] = p.grad
    return out


def check_gradient(parameter: Tensor, loss_fn: Callable[[], Tensor], h: float = 1e-5,
                   max_elements: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max element-wise relative error between analytic and central-difference gradients.

    ``loss_fn`` is re-evaluated with ``parameter.data`` perturbed in place.
    ``max_elements`` restricts the comparison to a random subset of entries.
    """
    first = loss_fn()
    second = loss_fn()
    if first.data.tobytes() != second.data.tobytes():
        raise NondeterministicLoss("two evaluations of loss_fn disagree")
    backward(second, [parameter])
    analytic = parameter.grad.copy()

    flat = parameter.data.reshape(-1)
    positions = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        rng = rng or np.random.default_rng(0)
        positions = rng.choice(flat.size, size=max_elements, replace=False)
    worst = 0.0
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
