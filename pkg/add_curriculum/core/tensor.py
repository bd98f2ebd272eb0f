from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
VjpFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_DTYPE: contextvars.ContextVar = contextvars.ContextVar("add_curriculum_dtype", default=np.float32)


class ContractError(ValueError):
    """Raised when an operation's pre- or post-condition is violated."""


def current_dtype() -> np.dtype:
    return np.dtype(_DTYPE.get())


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the working float type (the gradient oracle runs in float64)."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    __slots__ = ("data", "tape", "name")

    def __init__(self, data, *, tape: Optional["Tape"] = None, name: Optional[str] = None) -> None:
        self.data = np.asarray(data, dtype=current_dtype())
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        tracked = " tracked" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


@dataclass
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: VjpFn
    op: str


class Tape:
    """Ordered record of primitive operations; nodes are appended in execution order."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []

    def watch(self, value: ArrayLike, name: Optional[str] = None) -> Tensor:
        data = value.data if isinstance(value, Tensor) else value
        return Tensor(data, tape=self, name=name or getattr(value, "name", None))

    def watch_params(self, params: Dict[str, Tensor]) -> Dict[str, Tensor]:
        return {key: self.watch(value, name=key) for key, value in params.items()}

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], vjp: VjpFn, op: str) -> None:
        self.nodes.append(_Node(output=output, inputs=inputs, vjp=vjp, op=op))

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape: Optional[Tape] = None
    for item in inputs:
        if item.tape is None:
            continue
        if tape is not None and item.tape is not tape:
            raise ContractError("operands are recorded on different tapes")
        tape = item.tape
    return tape


def _apply(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: VjpFn) -> Tensor:
    value = np.asarray(value, dtype=current_dtype())
    if not np.all(np.isfinite(value)):
        raise ContractError(f"{op} produced non-finite values")
    tape = _tape_of(inputs)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape.record(out, tuple(inputs), vjp, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sum64(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    # long reductions accumulate in float64, then truncate
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(current_dtype())


# -- elementwise ---------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _apply("neg", -a.data, (a,), lambda g: (-g,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _apply("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)
    return _apply("exp", value, (a,), lambda g: (g * value,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ContractError("log of a non-positive value")
    return _apply("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    value = np.tanh(a.data)
    return _apply("tanh", value, (a,), lambda g: (g * (1.0 - value * value),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _apply("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise min; ties (a <= b) route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _apply(
        "minimum",
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def clamp(a: ArrayLike, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clamp into [lo, hi]; gradient is zero strictly outside the bounds."""
    a = as_tensor(a)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    value = np.clip(a.data, lo, hi)
    return _apply("clamp", value, (a,), lambda g: (g * inside,))


# -- reductions and shape ------------------------------------------------------


def sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply("sum", _sum64(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _apply("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flip(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return _apply("flip", np.flip(a.data, axis=axis), (a,), lambda g: (np.flip(g, axis=axis),))


def cumsum(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    value = np.cumsum(a.data, axis=axis, dtype=np.float64)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _apply("cumsum", value, (a,), vjp)


def concat(parts: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(p) for p in parts]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def take_along(a: ArrayLike, index: np.ndarray, axis: int = -1) -> Tensor:
    """Gather one entry per row: ``out[i] = a[i, index[i]]`` for 2-D inputs."""
    a = as_tensor(a)
    idx = np.expand_dims(np.asarray(index, dtype=np.int64), axis)
    value = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros(a.shape, dtype=g.dtype)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _apply("take_along", value, (a,), vjp)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _apply("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- softmax family ------------------------------------------------------------


def logsumexp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    weights = np.exp(a.data - shift)
    total = _sum64(weights, axis=axis, keepdims=True)
    value = np.log(total) + shift
    soft = weights / total

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _apply("logsumexp", value if keepdims else np.squeeze(value, axis), (a,), vjp)


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


# -- differentiation -----------------------------------------------------------


def backward(tape: Tape, loss: Tensor, leaves: Sequence[Tensor]) -> List[np.ndarray]:
    """Reverse sweep over ``tape``; one gradient per leaf, zeros for unreached leaves."""
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss is not recorded on this tape")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        upstream = grads.get(id(node.output))
        if upstream is None:
            continue
        for item, grad in zip(node.inputs, node.vjp(upstream)):
            if grad is None or item.tape is None:
                continue
            key = id(item)
            grads[key] = grads[key] + grad if key in grads else np.asarray(grad)
    return [
        np.asarray(grads.get(id(leaf), np.zeros(leaf.shape)), dtype=leaf.data.dtype).reshape(leaf.shape)
        for leaf in leaves
    ]


def grad_of(tape: Tape, loss: Tensor, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    names = list(params)
    return dict(zip(names, backward(tape, loss, [params[name] for name in names])))
