"""
Dense real arrays with a reverse-mode differentiation tape.

Operations executed while a `Graph` is active (``with Graph() as graph:``)
and touching at least one tensor that requires gradients are appended to
that graph; `backward` then sweeps the graph in reverse append order.
Outside an active graph every operation runs in plain inference mode.
The active graph lives in a context variable, so independent runs on
different threads never share a tape.
"""
import contextvars
import logging
from collections.abc import Mapping
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from intertwined.utils.errors import (
    ConfigurationError,
    ContractViolationError,
    EmptyOutputError,
    GradientCheckError,
    KernelTooLongError,
    ShapeError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

ACTIVATIONS = ("relu", "softmax", "elu", "selu")

# Self-normalizing constants
SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
ELU_ALPHA = 1.0

_active_graph: contextvars.ContextVar = contextvars.ContextVar("intertwined_active_graph", default=None)


def format_shape(shape: Sequence[int]) -> str:
    return "×".join(str(int(s)) for s in shape) if len(shape) else "scalar"


class Tensor:
    """
    A real-valued array plus an optional gradient slot.

    Leaf tensors (parameters, inputs) keep their gradient in ``grad`` after
    `backward`; intermediate results only carry gradients transiently.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            is_float = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if is_float else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolationError(f"item() needs a single-element tensor, got {format_shape(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={format_shape(self.shape)}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Node:
    """One recorded operation: its kind, input tensors, output and backward rule."""
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Graph:
    """
    Append-only record of operations.

    Append order is a valid topological order: a node's inputs always
    exist before the node is appended.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Graph":
        self._tokens.append(_active_graph.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_graph.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        self.nodes.append(Node(kind, inputs, output, backward_fn))


@contextmanager
def no_grad():
    """Run the enclosed operations without recording them."""
    token = _active_graph.set(None)
    try:
        yield
    finally:
        _active_graph.reset(token)


def custom_op(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """
    Wrap a forward result and, when recording, register its backward rule.

    Args:
        kind: Operation name stored on the graph node
        inputs: Input tensors, in the order `backward_fn` returns gradients
        out_data: Forward result
        backward_fn: Maps the output gradient to one gradient (or None) per input

    Returns:
        The output tensor
    """
    inputs = tuple(inputs)
    out = Tensor(out_data, dtype=out_data.dtype if out_data.dtype in (np.float32, np.float64) else None)
    graph = _active_graph.get()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        graph.record(kind, inputs, out, backward_fn)
    return out


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return custom_op("add", (a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return custom_op("subtract", (a, b), a.data - b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return custom_op("multiply", (a, b), a.data * b.data,
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, broadcasting leading axes.

    Raises:
        ShapeError: If either operand has rank < 2 or the inner extents disagree
    """
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {format_shape(a.shape)} · {format_shape(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents disagree: {format_shape(a.shape)} · {format_shape(b.shape)} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return custom_op("matmul", (a, b), np.matmul(a.data, b.data), backward)


# Reductions and reshaping

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return custom_op("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return custom_op("mean", (a,), np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), backward)


def reshape(a: Tensor, shape: Sequence[int], kind: str = "reshape") -> Tensor:
    return custom_op(kind, (a,), a.data.reshape(tuple(shape)), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return custom_op("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return custom_op("getitem", (a,), np.asarray(a.data[index]), backward)


def concatenate(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return custom_op("concatenate", tensors, np.concatenate([t.data for t in tensors], axis=axis),
                     lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    return custom_op("stack", tensors, np.stack([t.data for t in tensors], axis=axis),
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


# Activations

def activation(x: Tensor, kind: str, axis: int = -1) -> Tensor:
    """
    Apply a named activation.

    Args:
        x: Input tensor
        kind: One of relu, softmax, elu, selu, plus the internal sigmoid, tanh and linear
        axis: Class axis for softmax; ignored by elementwise kinds

    Returns:
        Activated tensor

    Raises:
        ConfigurationError: For an unknown kind
    """
    kind = kind.lower()
    data = x.data

    if kind == "linear":
        return x
    if kind == "relu":
        return custom_op("relu", (x,), np.maximum(data, 0.0), lambda g: (g * (data > 0),))
    if kind == "elu":
        out = np.where(data > 0, data, ELU_ALPHA * np.expm1(np.minimum(data, 0.0)))
        return custom_op("elu", (x,), out, lambda g: (g * np.where(data > 0, 1.0, out + ELU_ALPHA),))
    if kind == "selu":
        negative = SELU_ALPHA * np.expm1(np.minimum(data, 0.0))
        out = SELU_LAMBDA * np.where(data > 0, data, negative)
        slope = SELU_LAMBDA * np.where(data > 0, 1.0, negative + SELU_ALPHA)
        return custom_op("selu", (x,), out, lambda g: (g * slope,))
    if kind == "sigmoid":
        out = expit(data)
        return custom_op("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))
    if kind == "tanh":
        out = np.tanh(data)
        return custom_op("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))
    if kind == "softmax":
        shifted = np.exp(data - data.max(axis=axis, keepdims=True))
        out = shifted / shifted.sum(axis=axis, keepdims=True)
        return custom_op("softmax", (x,), out,
                         lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))
    raise ConfigurationError(f"Unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    data = x.data
    shifted = data - data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return custom_op("log_softmax", (x,), out, lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


# Signal operations

def conv1d_valid(signal: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """
    Valid (unpadded) cross-correlation along the last axis.

    A kernel of shape (k,) maps (..., K) to (..., T'); a kernel bank of
    shape (C, k) maps (..., K) to (..., C, T'), with
    T' = floor((K - k) / stride) + 1.

    Raises:
        KernelTooLongError: If k > K
    """
    x, w = signal.data, kernel.data
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if w.ndim not in (1, 2):
        raise ShapeError(f"kernel must have shape (k,) or (C, k), got {format_shape(w.shape)}")
    length, k = x.shape[-1], w.shape[-1]
    if k > length:
        raise KernelTooLongError(f"kernel of length {k} is longer than the signal ({length} samples)")

    windows = sliding_window_view(x, k, axis=-1)[..., ::stride, :]
    n_out = windows.shape[-2]
    span = stride * (n_out - 1) + 1
    if w.ndim == 1:
        out = windows @ w
    else:
        out = np.einsum("...tk,ck->...ct", windows, w, optimize=True)

    def backward(g):
        grad_x = np.zeros_like(x)
        if w.ndim == 1:
            grad_w = np.einsum("...tk,...t->k", windows, g, optimize=True)
            for j in range(k):
                grad_x[..., j:j + span:stride] += g * w[j]
        else:
            grad_w = np.einsum("...tk,...ct->ck", windows, g, optimize=True)
            for j in range(k):
                grad_x[..., j:j + span:stride] += np.einsum("...ct,c->...t", g, w[:, j], optimize=True)
        return grad_x, grad_w

    return custom_op("conv1d_valid", (signal, kernel), out, backward)


def conv2d_valid(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """
    Valid 2D cross-correlation, (N, Cin, H, W) with (Cout, Cin, s, s) -> (N, Cout, H', W').

    Raises:
        KernelTooLongError: If the kernel does not fit the spatial extent
    """
    data, w = x.data, weight.data
    if data.ndim != 4 or w.ndim != 4 or data.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d expects (N, Cin, H, W) and (Cout, Cin, s, s), got "
                         f"{format_shape(data.shape)} and {format_shape(w.shape)}")
    size = w.shape[-1]
    if size > data.shape[-2] or size > data.shape[-1]:
        raise KernelTooLongError(f"kernel {size}×{size} does not fit a {data.shape[-2]}×{data.shape[-1]} mesh")

    windows = sliding_window_view(data, (size, size), axis=(-2, -1))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    span_h, span_w = stride * (out_h - 1) + 1, stride * (out_w - 1) + 1
    out = np.einsum("nchwij,ocij->nohw", windows, w, optimize=True)

    def backward(g):
        grad_w = np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
        grad_x = np.zeros_like(data)
        for i in range(size):
            for j in range(size):
                grad_x[:, :, i:i + span_h:stride, j:j + span_w:stride] += np.einsum(
                    "nohw,oc->nchw", g, w[:, :, i, j], optimize=True)
        return grad_x, grad_w

    return custom_op("conv2d_valid", (x, weight), out, backward)


def _pool_kind(kind: str) -> str:
    normalized = kind.lower().replace("pooling", "")
    if normalized not in ("max", "average"):
        raise ConfigurationError(f"Unknown pooling type {kind!r}; expected max or average")
    return normalized


def time_pool(x: Tensor, window: int, kind: str = "max") -> Tensor:
    """
    Non-overlapping pooling along the last (time) axis.

    A trailing remainder shorter than `window` is dropped.

    Raises:
        EmptyOutputError: If the time extent is shorter than the window
    """
    kind = _pool_kind(kind)
    if window < 1:
        raise ConfigurationError(f"pool window must be >= 1, got {window}")
    data = x.data
    length = data.shape[-1]
    n_out = length // window
    if n_out == 0:
        raise EmptyOutputError(f"time extent {length} is shorter than the pool window {window}")
    used = n_out * window
    lead = data.shape[:-1]
    blocks = data[..., :used].reshape(*lead, n_out, window)

    if kind == "max":
        idx = blocks.argmax(axis=-1)[..., None]
        out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

        def backward(g):
            grad_blocks = np.zeros_like(blocks)
            np.put_along_axis(grad_blocks, idx, g[..., None], axis=-1)
            grad = np.zeros_like(data)
            grad[..., :used] = grad_blocks.reshape(*lead, used)
            return (grad,)
    else:
        out = blocks.mean(axis=-1)

        def backward(g):
            grad = np.zeros_like(data)
            grad[..., :used] = np.repeat(g / window, window, axis=-1)
            return (grad,)

    return custom_op(f"{kind}_pool", (x,), out, backward)


def flatten_space(x: Tensor) -> Tensor:
    """Merge the two axes before time: (..., a, b, T) -> (..., a·b, T)."""
    if x.ndim < 3:
        raise ShapeError(f"flatten_space needs a rank-3 (a × b × T) input, got {format_shape(x.shape)}")
    *lead, a, b, length = x.shape
    return reshape(x, (*lead, a * b, length), kind="flatten_space")


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the last (time) axis."""
    if x.shape[-1] < 1:
        raise ShapeError("global_average_pool needs at least one time step")
    return tensor_mean(x, axis=-1)


def dropout_apply(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """
    Inverted dropout: survivors are scaled by 1 / (1 - rate); identity at evaluation.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractViolationError("dropout in training mode needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return multiply(x, Tensor(mask, dtype=x.dtype))


# Differentiation

def backward(loss: Tensor, graph: Graph) -> None:
    """
    Reverse sweep from a scalar loss.

    Gradients are added into the ``grad`` slot of every leaf tensor that
    requires them, so two calls without zeroing double the gradients.

    Raises:
        ContractViolationError: If the loss is not a scalar
    """
    if loss.size != 1:
        raise ContractViolationError(f"backward needs a scalar loss, got shape {format_shape(loss.shape)}")

    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    pending = {id(loss): seed}
    for node in reversed(graph.nodes):
        grad_out = pending.pop(id(node.output), None)
        if grad_out is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(grad_out)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                tensor.grad = np.array(grad, dtype=tensor.dtype) if tensor.grad is None else tensor.grad + grad
            else:
                key = id(tensor)
                pending[key] = grad if key not in pending else pending[key] + grad


def finite_diff_check(f: Callable[[], Tensor], params: Union[Mapping, Iterable[Tensor]], epsilon: float = 1e-5,
                      max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                      exclude: Optional[Callable[[str, tuple], bool]] = None, floor: float = 1e-8) -> float:
    """
    Compare analytic gradients with central differences.

    Args:
        f: Deterministic closure returning a scalar loss tensor built from `params`
        params: Named parameters (a mapping such as ParamStore) or plain tensors
        epsilon: Perturbation size
        max_coords: Check at most this many randomly chosen coordinates per parameter
        rng: Generator used to choose coordinates when `max_coords` is set
        exclude: Predicate ``(name, index) -> bool`` skipping coordinates
        floor: Lower bound of the relative-error denominator

    Returns:
        Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor)

    Raises:
        GradientCheckError: If f is non-finite at a perturbed point
    """
    if epsilon <= 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    rng = rng if rng is not None else np.random.default_rng(0)

    for _, param in named:
        param.zero_grad()
    with Graph() as graph:
        loss = f()
        backward(loss, graph)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    def evaluate(name, index):
        with no_grad():
            value = float(np.asarray(f().data).reshape(-1)[0])
        if not np.isfinite(value):
            raise GradientCheckError(f"loss is not finite when perturbing {name}{list(index)}",
                                     parameter=name, coordinate=index)
        return value

    worst, worst_at = 0.0, None
    for name, param in named:
        if max_coords is not None and max_coords < param.size:
            flat = rng.choice(param.size, size=max_coords, replace=False)
            coords = [tuple(int(i) for i in np.unravel_index(k, param.shape)) for k in sorted(flat)]
        else:
            coords = list(np.ndindex(*param.shape))
        for index in coords:
            if exclude is not None and exclude(name, index):
                continue
            original = param.data[index]
            param.data[index] = original + epsilon
            f_plus = evaluate(name, index)
            param.data[index] = original - epsilon
            f_minus = evaluate(name, index)
            param.data[index] = original

            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            exact = float(analytic[name][index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            if error > worst:
                worst, worst_at = error, (name, index, exact, numeric)

    if worst_at is not None:
        name, index, exact, numeric = worst_at
        logger.debug(f"Worst gradient mismatch {worst:.3e} at {name}{list(index)}: analytic={exact!r} numeric={numeric!r}")
    return worst
