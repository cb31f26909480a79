#!/usr/bin/env python3
"""
GPDNN Tensor Core
Dense float64 tensors with tape-based reverse-mode differentiation.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import lapack, solve_triangular
from scipy.special import ndtr

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TensorError(Exception):
    """Base class for tensor_core failures"""


class ShapeError(TensorError, ValueError):
    """Operand shapes are incompatible"""


class DomainError(TensorError, ValueError):
    """Operand outside the domain of the op (log/sqrt of negative, div by zero)"""


class NumericalError(TensorError, ArithmeticError):
    """A forward op produced NaN or Inf"""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(message or f"non-finite value produced by op '{op}'")


class CholeskyError(NumericalError):
    """Matrix is not positive definite"""

    def __init__(self, pivot: int, jitter: Optional[float] = None):
        self.pivot = pivot
        self.jitter = jitter
        detail = f"cholesky failed at pivot {pivot}"
        if jitter is not None:
            detail += f" (jitter {jitter:g})"
        super().__init__("cholesky", detail)


@dataclass
class OpRecord:
    """One entry of the tape"""
    kind: str
    inputs: Tuple[Optional[int], ...]
    output: int
    backward: BackwardFn


class Graph:
    """Ordered tape of op records; one per forward/backward pass.

    A Graph must only be used from one thread. Tensors that do not belong
    to a graph are plain read-only arrays and can be shared freely.
    """

    def __init__(self, name: str = "graph"):
        self.name = name
        self.records: List[OpRecord] = []
        self.shapes: List[Tuple[int, ...]] = []
        self.leaves: Dict[int, Optional[str]] = {}

    def _new_node(self, shape: Tuple[int, ...]) -> int:
        self.shapes.append(tuple(shape))
        return len(self.shapes) - 1

    def leaf(self, value: ArrayLike, name: Optional[str] = None) -> "Tensor":
        """Register a differentiable input (parameter or image)"""
        data = _as_array(value, copy=True)
        _check_finite(data, "leaf" if name is None else f"leaf:{name}")
        node = self._new_node(data.shape)
        self.leaves[node] = name
        return Tensor(data, graph=self, node=node)

    def record(self, kind: str, inputs: Sequence["Tensor"], data: np.ndarray,
               backward: BackwardFn) -> "Tensor":
        node = self._new_node(data.shape)
        self.records.append(OpRecord(kind, tuple(t.node for t in inputs), node, backward))
        return Tensor(data, graph=self, node=node)

    def backward(self, loss: "Tensor") -> Dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss; returns gradients of every leaf"""
        if loss.graph is not self:
            raise TensorError("loss does not belong to this graph")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {loss.node: np.ones(self.shapes[loss.node])}
        for record in reversed(self.records):
            upstream = grads.pop(record.output, None)
            if upstream is None:
                continue
            for node, g in zip(record.inputs, record.backward(upstream)):
                if node is None or g is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + g
                else:
                    grads[node] = np.array(g, dtype=np.float64)

        return {node: grads.get(node, np.zeros(self.shapes[node])) for node in self.leaves}

    def gradient(self, loss: "Tensor", tensors: Sequence["Tensor"]) -> List[np.ndarray]:
        grads = self.backward(loss)
        out = []
        for t in tensors:
            if t.graph is not self or t.node not in grads:
                out.append(np.zeros(t.shape))
            else:
                out.append(grads[t.node])
        return out

    def __len__(self) -> int:
        return len(self.records)


class Tensor:
    """Float64 array, optionally attached to a Graph node"""

    __array_priority__ = 1000

    def __init__(self, data: np.ndarray, graph: Optional[Graph] = None, node: Optional[int] = None):
        self.data = data
        self.data.flags.writeable = False
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(value: ArrayLike) -> Tensor:
    """Wrap a value as a graph-free tensor"""
    if isinstance(value, Tensor):
        return Tensor(value.data)
    data = _as_array(value, copy=True)
    return Tensor(data)


def _as_array(value: Any, copy: bool = False) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.array(value, dtype=np.float64, copy=copy) if copy else np.asarray(value, dtype=np.float64)


def _wrap(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(op)


def _graph_of(*tensors: Tensor) -> Optional[Graph]:
    graph = None
    for t in tensors:
        if t.graph is None:
            continue
        if graph is None:
            graph = t.graph
        elif t.graph is not graph:
            raise TensorError("operands belong to different graphs")
    return graph


def _emit(kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward: BackwardFn) -> Tensor:
    """Finite-check a forward result and put it on the tape if any input is tracked"""
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, kind)
    graph = _graph_of(*inputs)
    if graph is None:
        return Tensor(data)
    return graph.record(kind, inputs, data, backward)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "add")
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "mul")
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0.0):
        raise DomainError("log: negative operand")
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _emit("log", (a,), out, lambda g: (g / a.data,))


def relu(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0.0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tanh(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def square(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: negative operand")
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def normal_cdf(a: ArrayLike) -> Tensor:
    """Standard normal CDF Φ"""
    a = _wrap(a)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
    return _emit("normal_cdf", (a,), ndtr(a.data), lambda g: (g * pdf,))


_UNARY = {"exp": exp, "log": log, "neg": neg, "relu": relu, "tanh": tanh,
          "sigmoid": sigmoid, "square": square, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """Dispatch an elementwise op by name"""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"elementwise op '{op}' needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op '{op}'")


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Reverse axes, or swap the last two when the tensor has a batch dimension"""
    a = _wrap(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1] if a.ndim <= 2 else tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def getitem(a: ArrayLike, key: Any) -> Tensor:
    a = _wrap(a)
    if isinstance(key, Tensor):
        key = key.data.astype(np.int64)

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    return _emit("getitem", (a,), np.array(a.data[key]), backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if len({t.shape for t in ts}) > 1:
        raise ShapeError("stack: operands must share a shape")
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _emit("stack", ts, out, backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _expand(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _emit("sum", (a,), out, lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),))


def reduce_mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean of an empty axis")
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _emit("mean", (a,), out, lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / n,))


def reduce_max(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Max; gradient goes to the first maximal entry only"""
    a = _wrap(a)
    if axis is None:
        flat = int(np.argmax(a.data))
        out = a.data.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * a.ndim)

        def backward(g):
            full = np.zeros(a.size)
            full[flat] = np.sum(g)
            return (full.reshape(a.shape),)

        return _emit("max", (a,), np.asarray(out), backward)

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        full = np.zeros(a.shape)
        g = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _emit("max", (a,), out, backward)


def reduce_prod(a: ArrayLike, axis: int, keepdims: bool = False) -> Tensor:
    """Product along an axis; backward uses exclusive prefix/suffix products"""
    a = _wrap(a)
    x = np.moveaxis(a.data, axis, -1)
    out = np.prod(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        ones = np.ones(x.shape[:-1] + (1,))
        prefix = np.concatenate([ones, np.cumprod(x[..., :-1], axis=-1)], axis=-1)
        suffix = np.concatenate([np.cumprod(x[..., :0:-1], axis=-1)[..., ::-1], ones], axis=-1)
        g = g if keepdims else np.expand_dims(g, axis)
        g = np.moveaxis(g, axis, -1)
        return (np.moveaxis(g * prefix * suffix, -1, axis),)

    return _emit("prod", (a,), out, backward)


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op: str, a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if op == "prod":
        return reduce_prod(a, -1 if axis is None else axis, keepdims)
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction '{op}'")
    return _REDUCE[op](a, axis, keepdims)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product; leading batch dimensions broadcast"""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, backward)


def _phi(m: np.ndarray) -> np.ndarray:
    """Lower triangle with the diagonal halved"""
    out = np.tril(m)
    out[np.diag_indices(m.shape[0])] *= 0.5
    return out


def cholesky(a: ArrayLike) -> Tensor:
    """Lower Cholesky factor; symmetric gradient with respect to a"""
    a = _wrap(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky needs a square matrix, got {a.shape}")
    _check_finite(a.data, "cholesky")
    factor, info = lapack.dpotrf(np.array(a.data), lower=1, clean=1)
    if info > 0:
        raise CholeskyError(pivot=int(info) - 1)
    if info < 0:
        raise TensorError(f"dpotrf argument error {info}")
    L = np.tril(factor)

    def backward(g):
        P = _phi(L.T @ np.tril(g))
        # L^{-T} (P + P^T) L^{-1} / 2
        inner = solve_triangular(L, P + P.T, lower=True, trans="T")
        S = solve_triangular(L, inner.T, lower=True, trans="T")
        return (0.5 * S,)

    return _emit("cholesky", (a,), L, backward)


def triangular_solve(L: ArrayLike, b: ArrayLike, lower: bool = True, transpose: bool = False) -> Tensor:
    """Solve op(L) x = b where op is identity or transpose"""
    L, b = _wrap(L), _wrap(b)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError(f"triangular_solve needs a square matrix, got {L.shape}")
    if b.shape[0] != L.shape[0]:
        raise ShapeError(f"triangular_solve: {L.shape} vs right-hand side {b.shape}")
    if np.any(np.diag(L.data) == 0.0):
        raise DomainError("triangular_solve: zero on the diagonal")
    trans = "T" if transpose else "N"
    x = solve_triangular(L.data, b.data, lower=lower, trans=trans)
    mask = np.tril if lower else np.triu

    def backward(g):
        # op(L) x = b  =>  b_bar = op(L)^{-T} g,  op(L)_bar = -b_bar x^T
        gb = solve_triangular(L.data, g, lower=lower, trans="N" if transpose else "T")
        gb2 = gb if gb.ndim == 2 else gb[:, None]
        x2 = x if x.ndim == 2 else x[:, None]
        g_op = -gb2 @ x2.T
        gL = mask(g_op.T if transpose else g_op)
        return gL, gb

    return _emit("triangular_solve", (L, b), x, backward)


# ---------------------------------------------------------------------------
# Image ops (NHWC, stride-1 convolution)
# ---------------------------------------------------------------------------

def _same_padding(size: int, window: int, stride: int) -> Tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + window - size, 0)
    return total // 2, total - total // 2


def conv2d(x: ArrayLike, w: ArrayLike, b: ArrayLike, padding: str = "SAME") -> Tensor:
    """Cross-correlation of x[B,H,W,Cin] with w[kh,kw,Cin,Cout] plus bias"""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    B, H, W, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    padding = str(padding).upper()
    if padding == "SAME":
        (pt, pb), (pl, pr) = _same_padding(H, kh, 1), _same_padding(W, kw, 1)
    elif padding == "VALID":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding '{padding}'")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {H}x{W}")

    out = np.zeros((B, ho, wo, cout))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + ho, j:j + wo, :] @ w.data[i, j]
    out += b.data

    def backward(g):
        gx = np.zeros(xp.shape)
        gw = np.zeros(w.shape)
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + ho, j:j + wo, :].reshape(-1, cin)
                gw[i, j] = patch.T @ g2
                gx[:, i:i + ho, j:j + wo, :] += g @ w.data[i, j].T
        gx = gx[:, pt:pt + H, pl:pl + W, :]
        return gx, gw, g2.sum(axis=0)

    return _emit("conv2d", (x, w, b), out, backward)


def maxpool2d(x: ArrayLike, window: int = 2, stride: int = 2, padding: str = "SAME") -> Tensor:
    """Window max over x[B,H,W,C]; gradient to the first maximal element"""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    B, H, W, C = x.shape
    padding = str(padding).upper()
    if padding == "SAME":
        (pt, pb), (pl, pr) = _same_padding(H, window, stride), _same_padding(W, window, stride)
        ho, wo = -(-H // stride), -(-W // stride)
    elif padding == "VALID":
        pt = pb = pl = pr = 0
        ho, wo = (H - window) // stride + 1, (W - window) // stride + 1
    else:
        raise ValueError(f"unknown padding '{padding}'")
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"maxpool2d: window {window} larger than input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)

    def window_view(arr, di, dj):
        return arr[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :]

    best = np.full((B, ho, wo, C), -np.inf)
    arg = np.zeros((B, ho, wo, C), dtype=np.int64)
    for k in range(window * window):
        cand = window_view(xp, k // window, k % window)
        better = cand > best
        best = np.where(better, cand, best)
        arg = np.where(better, k, arg)

    def backward(g):
        gx = np.zeros(xp.shape)
        for k in range(window * window):
            view = window_view(gx, k // window, k % window)
            view += np.where(arg == k, g, 0.0)
        return (gx[:, pt:pt + H, pl:pl + W, :],)

    return _emit("maxpool2d", (x,), best, backward)


# ---------------------------------------------------------------------------
# Gradient entry point
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """Gradient map (leaf node-id -> array) of a scalar loss"""
    if loss.graph is None:
        raise TensorError("loss is not attached to a graph")
    return loss.graph.backward(loss)
