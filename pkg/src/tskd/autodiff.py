"""Dense float64 tensors with reverse-mode differentiation.

Only the primitives needed by small MLPs and the distillation losses are
provided. Every differentiable primitive records a node on the result; a
backward pass linearizes the reachable nodes into a :class:`Tape` (inputs
always precede the operation that consumes them) and walks it in reverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LOG_CLAMP = 1e-12


class DimensionError(ValueError):
    pass


class NumericOverflowError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor | None"
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tensor:
    """Immutable-after-construction array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise NumericOverflowError(f"non-finite output in '{op}'")


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(op, out)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    result.requires_grad = any(t.requires_grad for t in inputs)
    result._node = None
    if result.requires_grad:
        result._node = Node(op, tuple(inputs), result, backward_fn)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("add", a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("sub", a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("mul", a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    """Natural log with inputs clamped below at ``LOG_CLAMP``."""
    clamped = np.maximum(x.data, LOG_CLAMP)
    active = x.data >= LOG_CLAMP
    return _record("log", np.log(clamped), (x,), lambda g: (np.where(active, g / clamped, 0.0),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner),)

    return _record("gelu", out, (x,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (x,), back)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take_rows", x.data[idx], (x,), back)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-shifted."""
    if logits.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    p = _softmax_np(logits.data)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", p, (logits,), back)


def log_softmax(logits: Tensor) -> Tensor:
    if logits.shape[-1] < 1:
        raise DimensionError("log_softmax over an empty axis")
    out = _log_softmax_np(logits.data)

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (logits,), back)


# ---------------------------------------------------------------------------
# reverse pass


class Tape:
    """Topologically ordered list of the nodes reachable from an output."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        if output._node is None:
            return cls(order)
        stack: list[tuple[Node, bool]] = [(output._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp._node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(output: Tensor) -> Tape:
    """Populate ``grad`` on every requires-grad leaf reachable from ``output``.

    Gradients accumulate across repeated calls until leaves are reset with
    :meth:`Tensor.zero_grad`.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    tape = Tape.from_output(output)
    upstream: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = upstream.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                upstream[key] = gi if key not in upstream else upstream[key] + gi
    if output._node is None and output.requires_grad:
        g = np.ones_like(output.data)
        output.grad = g if output.grad is None else output.grad + g
    return tape


def finite_diff_check(
    f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` maps the input tensors to a scalar tensor. Central differences with
    step ``eps`` are compared against one reverse pass.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    out = f(*leaves)
    backward(out)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        base = [Tensor(t.data) for t in leaves]
        flat = base[i].data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(*base).item()
            flat[j] = orig - eps
            fm = f(*base).item()
            flat[j] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic.reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
