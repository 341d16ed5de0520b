"""
Dense tensors with define-by-run reverse-mode automatic differentiation.

This module implements the numerical core shared by the retention model and the
upsampler:
- Tensor: a numpy array plus an optional gradient and the op that produced it
- Elementwise arithmetic with numpy broadcasting (gradients are reduced back)
- matmul, reductions, softmax / log_softmax
- layer and group normalisation
- 2D cross-correlation and nearest upsampling
- gather by index (scatter-add in the backward pass)

Graphs are built while ops run and are released by `backward` unless
`retain_graph=True`. Grad recording can be switched off per thread with `no_grad()`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from retcomplete.errors import DimensionError, NonFiniteError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]
Axis = Optional[Union[int, Tuple[int, ...]]]

NORM_EPS = 1e-6
_GELU_C = float(np.sqrt(2.0 / np.pi))

_dtype: type = np.float64
_debug = False
_local = threading.local()


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit reals for every tensor created afterwards."""
    global _dtype
    if bits == 64:
        _dtype = np.float64
    elif bits == 32:
        _dtype = np.float32
    else:
        raise UsageError(f"precision must be 32 or 64 bits, got {bits}")


def get_dtype() -> np.dtype:
    """Return the active real dtype."""
    return np.dtype(_dtype)


def set_debug(enabled: bool) -> None:
    """Raise NonFiniteError as soon as any op produces NaN or Inf."""
    global _debug
    _debug = bool(enabled)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """
    N-dimensional real array with reverse-mode gradient support.

    Attributes:
        data: Row-major numpy array in the active precision
        grad: Accumulated gradient (leaf tensors only) or None
        requires_grad: Whether gradients flow to or through this tensor
        name: Optional label, used for parameters
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(
        self, data: Union["Tensor", np.ndarray, Sequence, float, int],
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if array.dtype != _dtype:
            array = array.astype(_dtype)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> Dict["Tensor", np.ndarray]:
        return backward(self, retain_graph=retain_graph)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: object) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Union[int, Tuple[int, ...]]) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            return reshape(self, shape[0])
        return reshape(self, tuple(shape))  # type: ignore[arg-type]


def _lift(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(
    op: str, data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn
) -> Tensor:
    out = Tensor(data)
    if _debug and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> Dict[Tensor, np.ndarray]:
    """
    Back-propagate from a scalar loss.

    Gradients are accumulated into `.grad` of every leaf tensor that requires them.

    Args:
        loss: Scalar tensor produced by differentiable ops
        retain_graph: Keep the graph so backward can run again

    Returns:
        Mapping of each reached leaf tensor to the gradient contributed by this call

    Raises:
        UsageError: If the loss is not a scalar or does not depend on any parameter
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    contributed: Dict[Tensor, np.ndarray] = {}

    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            grad = np.array(grad, dtype=node.data.dtype).reshape(node.shape)
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            contributed[node] = grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        if not retain_graph:
            node._parents = ()
            node._backward = None

    return contributed


# Elementwise arithmetic


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Operand) -> Tensor:
    a = _lift(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Operand, exponent: float) -> Tensor:
    a = _lift(a)
    p = float(exponent)
    return _make("power", a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: Operand) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Operand) -> Tensor:
    a = _lift(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Operand) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Operand) -> Tensor:
    a = _lift(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def swish(a: Operand) -> Tensor:
    a = _lift(a)
    return mul(a, sigmoid(a))


def gelu(a: Operand) -> Tensor:
    """GELU, tanh approximation."""
    a = _lift(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make("gelu", out, (a,), backward_fn)


def abs_(a: Operand) -> Tensor:
    a = _lift(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a: Operand, low: float, high: float) -> Tensor:
    a = _lift(a)
    inside = (a.data >= low) & (a.data <= high)
    return _make("clip", np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


# Linear algebra and shape ops


def matmul(a: Operand, b: Operand) -> Tensor:
    """
    Matrix product of a [m,k] and b [k,n].

    A 1-D left operand [k] is treated as a single row and the result is [n].
    """
    a, b = _lift(a), _lift(b)
    if a.ndim == 1 and b.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _make(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def outer(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    return matmul(reshape(a, (a.size, 1)), reshape(b, (1, b.size)))


def transpose(a: Operand) -> Tensor:
    """Swap the last two axes."""
    a = _lift(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got {a.shape}")
    data = np.swapaxes(a.data, -1, -2)
    return _make("transpose", data, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Operand, shape: Tuple[int, ...]) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(index: object) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in items)


def getitem(a: Operand, index: object) -> Tensor:
    a = _lift(a)
    basic = _is_basic_index(index)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g  # type: ignore[index]
        else:
            np.add.at(full, index, g)  # type: ignore[arg-type]
        return (full,)

    return _make("getitem", a.data[index], (a,), backward_fn)  # type: ignore[index]


def flip(a: Operand, axis: int = 0) -> Tensor:
    a = _lift(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(None, None, -1)
    return getitem(a, tuple(index))


def gather(table: Operand, indices: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """
    Select rows of a table by index; the backward pass scatter-adds into the table.

    Raises:
        DimensionError: If any index is outside the table
    """
    table = _lift(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"gather index outside [0, {table.shape[0]})")
    return getitem(table, idx)


def pick(x: Operand, indices: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """For a [n,k] tensor, take element indices[i] from row i."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"pick needs [n,k] and [n] indices, got {x.shape} and {idx.shape}")
    return getitem(x, (np.arange(x.shape[0]), idx))


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = [_lift(t) for t in tensors]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concat shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make("concat", out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


# Reductions


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(sorted(a % ndim for a in axes))


def sum_(a: Operand, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        expanded = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(expanded, a.shape).copy(),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), backward_fn)


def mean(a: Operand, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return div(sum_(a, axis=axes, keepdims=keepdims), float(count))


def softmax(x: Operand, axis: int = -1) -> Tensor:
    """
    Numerically stable softmax along `axis`.

    Raises:
        NonFiniteError: If the input holds NaN or Inf
    """
    x = _lift(x)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax input is not finite")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(
        "softmax",
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def log_softmax(x: Operand, axis: int = -1) -> Tensor:
    x = _lift(x)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("log_softmax input is not finite")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _make(
        "log_softmax",
        out,
        (x,),
        lambda g: (g - probs * g.sum(axis=axis, keepdims=True),),
    )


# Normalisation


def _group_standardize(x: Tensor, groups: int, eps: float) -> Tensor:
    features = x.shape[-1]
    if groups < 1 or features % groups:
        raise DimensionError(f"feature dim {features} is not divisible into {groups} groups")
    grouped_shape = x.shape[:-1] + (groups, features // groups)
    xr = x.data.reshape(grouped_shape)
    centered = xr - xr.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        gr = g.reshape(grouped_shape)
        gx = inv_std * (
            gr - gr.mean(axis=-1, keepdims=True) - xhat * (gr * xhat).mean(axis=-1, keepdims=True)
        )
        return (gx.reshape(x.shape),)

    return _make("group_standardize", xhat.reshape(x.shape), (x,), backward_fn)


def _affine(x: Tensor, gamma: Optional[Operand], beta: Optional[Operand]) -> Tensor:
    if gamma is not None:
        x = mul(x, gamma)
    if beta is not None:
        x = add(x, beta)
    return x


def layer_norm(
    x: Operand,
    gamma: Optional[Operand] = None,
    beta: Optional[Operand] = None,
    eps: float = NORM_EPS,
) -> Tensor:
    """Normalise the last axis to mean 0 / variance 1, then apply gamma and beta."""
    x = _lift(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    return _affine(_group_standardize(x, 1, eps), gamma, beta)


def group_norm(
    x: Operand,
    groups: int,
    gamma: Optional[Operand] = None,
    beta: Optional[Operand] = None,
    eps: float = NORM_EPS,
) -> Tensor:
    """
    Normalise contiguous groups of the last axis independently.

    Raises:
        DimensionError: If the last axis is not divisible by `groups`
    """
    x = _lift(x)
    return _affine(_group_standardize(x, groups, eps), gamma, beta)


# Convolution


def conv2d(
    x: Operand,
    kernels: Operand,
    bias: Optional[Operand] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """
    2-D cross-correlation (no kernel flip).

    Args:
        x: Input [C_in, H, W]
        kernels: Weights [C_out, C_in, kh, kw]
        bias: Optional [C_out]
        stride: Step between windows
        pad: Zero padding on every border

    Returns:
        Output [C_out, H', W']

    Raises:
        DimensionError: On channel mismatch or a kernel larger than the padded input
    """
    x, kernels = _lift(x), _lift(kernels)
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernels {kernels.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"invalid conv2d stride={stride} pad={pad}")
    channels, height, width = x.shape
    _, _, kh, kw = kernels.shape
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    if kh > padded.shape[1] or kw > padded.shape[2]:
        raise DimensionError(f"kernel {kh}x{kw} does not fit padded input {padded.shape[1:]}")
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out_h, out_w = windows.shape[1], windows.shape[2]
    out = np.tensordot(kernels.data, windows, axes=([1, 2, 3], [0, 3, 4]))

    def conv_backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_k = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * (out_h - 1) + 1, stride)
                cols = slice(j, j + stride * (out_w - 1) + 1, stride)
                tap = kernels.data[:, :, i, j]
                grad_padded[:, rows, cols] += np.tensordot(tap, g, axes=([0], [0]))
        return grad_padded[:, pad : pad + height, pad : pad + width], grad_k

    result = _make("conv2d", out, (x, kernels), conv_backward)
    if bias is not None:
        result = add(result, reshape(_lift(bias), (-1, 1, 1)))
    return result


def upsample_nearest(x: Operand, factor: int) -> Tensor:
    """Repeat every pixel of a [C,H,W] map factor x factor times."""
    x = _lift(x)
    if x.ndim != 3 or factor < 1:
        raise DimensionError(f"upsample_nearest needs [C,H,W] and factor >= 1, got {x.shape}")
    c, h, w = x.shape
    out = x.data.repeat(factor, axis=1).repeat(factor, axis=2)
    return _make(
        "upsample_nearest",
        out,
        (x,),
        lambda g: (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),),
    )
