"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Operations record onto the innermost active :class:`Tape` (a Wengert list);
``Tape.backward`` replays the list in reverse and accumulates gradients into
every tensor that requires them. Distinct tapes are fully independent, and the
active-tape stack is thread-local, so models running on separate threads never
observe each other's nodes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation's rule."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or infinity."""


class Tensor:
    """An n-dimensional float64 array plus an accumulated gradient buffer.

    The gradient buffer is materialized lazily: reading ``grad`` before any
    accumulation yields zeros of the right shape.
    """

    __slots__ = ("values", "_grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal: adopt an already-materialized float64 array without copying.
        out = cls.__new__(cls)
        out.values = arr
        out._grad = None
        out.requires_grad = False
        return out

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node(NamedTuple):
    """One recorded primitive application: inputs, output, backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], None]


_TLS = threading.local()


def _stack() -> list["Tape"]:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited out of order")

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into every recorded tensor's grad."""
        if loss.values.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ValueError("backward on an empty tape")
        loss.grad = loss.grad + np.ones_like(loss.values)
        for node in reversed(self.nodes):
            node.rule(node.output.grad)
        self.nodes.clear()


def _finish(op: str, inputs: tuple[Tensor, ...], values: np.ndarray,
            make_rule: Callable[[Tensor], Callable[[np.ndarray], None]]) -> Tensor:
    # a non-finite entry makes the array's sum non-finite, so one reduction
    # suffices (desk-scale magnitudes cannot overflow the sum)
    if not np.isfinite(values.sum()):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor._wrap(values)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, inputs, out, make_rule(out)))
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """Allow equal shapes, or a row vector b applied across a's leading axis."""
    if a.shape == b.shape:
        return False
    if a.values.ndim == b.values.ndim + 1 and a.shape[1:] == b.shape:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    values = a.values @ b.values

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g @ b.values.T
            if b.requires_grad:
                b.grad += a.values.T @ g
        return rule

    return _finish("matmul", (a, b), values, make_rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_broadcast("add", a, b)
    values = a.values + b.values

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad += g.sum(axis=0) if broadcast else g
        return rule

    return _finish("add", (a, b), values, make_rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_broadcast("sub", a, b)
    values = a.values - b.values

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad -= g.sum(axis=0) if broadcast else g
        return rule

    return _finish("sub", (a, b), values, make_rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_broadcast("mul", a, b)
    values = a.values * b.values

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g * b.values
            if b.requires_grad:
                gb = g * a.values
                b.grad += gb.sum(axis=0) if broadcast else gb
        return rule

    return _finish("mul", (a, b), values, make_rule)


def relu(a: Tensor) -> Tensor:
    values = np.maximum(a.values, 0.0)

    def make_rule(out: Tensor):
        mask = a.values > 0

        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g * mask
        return rule

    return _finish("relu", (a,), values, make_rule)


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    values = np.empty_like(x)
    pos = x >= 0
    values[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    values[~pos] = ex / (1.0 + ex)

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g * out.values * (1.0 - out.values)
        return rule

    return _finish("sigmoid", (a,), values, make_rule)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        values = np.exp(a.values)

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g * out.values
        return rule

    return _finish("exp", (a,), values, make_rule)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.log(a.values)

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g / a.values
        return rule

    return _finish("log", (a,), values, make_rule)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        values = np.sqrt(a.values)

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                # Subgradient 0 at the origin keeps norms finite at their minimum.
                safe = np.where(out.values > 0, out.values, 1.0)
                a.grad += np.where(out.values > 0, g * 0.5 / safe, 0.0)
        return rule

    return _finish("sqrt", (a,), values, make_rule)


def neg(a: Tensor) -> Tensor:
    values = -a.values

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad -= g
        return rule

    return _finish("neg", (a,), values, make_rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError(f"scale: non-finite factor {c}")
    values = a.values * c

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g * c
        return rule

    return _finish("scale", (a,), values, make_rule)


def _check_axis(op: str, a: Tensor, axis: int | None) -> None:
    if axis is not None and not -a.values.ndim <= axis < a.values.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")


def sum_reduce(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    _check_axis("sum_reduce", a, axis)
    values = a.values.sum(axis=axis, keepdims=keepdims)

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                if axis is None:
                    a.grad += g
                elif keepdims:
                    a.grad += g
                else:
                    a.grad += np.expand_dims(g, axis)
        return rule

    return _finish("sum_reduce", (a,), values, make_rule)


def mean_reduce(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    _check_axis("mean_reduce", a, axis)
    count = a.values.size if axis is None else a.shape[axis]
    values = a.values.mean(axis=axis, keepdims=keepdims)

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                if axis is None:
                    a.grad += g / count
                elif keepdims:
                    a.grad += g / count
                else:
                    a.grad += np.expand_dims(g, axis) / count
        return rule

    return _finish("mean_reduce", (a,), values, make_rule)


def sqeuclidean(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance.

    Vector/vector input gives a scalar; two matrices with matching trailing
    dimension give the pairwise distance matrix [rows(a), rows(b)].
    """
    if a.values.ndim == 1 and b.values.ndim == 1:
        if a.shape != b.shape:
            raise ShapeError(f"sqeuclidean: incompatible shapes {a.shape} and {b.shape}")
        diff = a.values - b.values
        values = np.array((diff * diff).sum())

        def make_rule(out: Tensor):
            def rule(g: np.ndarray) -> None:
                if a.requires_grad:
                    a.grad += g * 2.0 * diff
                if b.requires_grad:
                    b.grad -= g * 2.0 * diff
            return rule

        return _finish("sqeuclidean", (a, b), values, make_rule)

    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sqeuclidean: incompatible shapes {a.shape} and {b.shape}")
    # ||x - y||^2 = ||x||^2 + ||y||^2 - 2 x.y; clip the tiny negatives that
    # cancellation can produce so sqrt never sees a value below zero.
    sq_a = (a.values * a.values).sum(axis=1)[:, None]
    sq_b = (b.values * b.values).sum(axis=1)[None, :]
    values = np.maximum(sq_a + sq_b - 2.0 * (a.values @ b.values.T), 0.0)

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += 2.0 * (g.sum(axis=1, keepdims=True) * a.values - g @ b.values)
            if b.requires_grad:
                b.grad += 2.0 * (g.sum(axis=0)[:, None] * b.values - g.T @ a.values)
        return rule

    return _finish("sqeuclidean", (a, b), values, make_rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    ndim = tensors[0].values.ndim
    for t in tensors[1:]:
        if t.values.ndim != ndim:
            raise ShapeError(f"concat: mixed ranks {[t.shape for t in tensors]}")
    values = np.concatenate([t.values for t in tensors], axis=axis)

    def make_rule(out: Tensor):
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def rule(g: np.ndarray) -> None:
            for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(start, stop)
                    t.grad += g[tuple(index)]
        return rule

    return _finish("concat", tuple(tensors), values, make_rule)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if a.values.ndim < 1:
        raise ShapeError("softmax: requires at least one axis")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=-1, keepdims=True)

    def make_rule(out: Tensor):
        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                s = out.values
                a.grad += s * (g - (g * s).sum(axis=-1, keepdims=True))
        return rule

    return _finish("softmax", (a,), values, make_rule)


class SGD:
    """SGD with momentum: v <- momentum*v + grad; p <- p - lr*v; grads zeroed."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.params = list(params)
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if v.shape != p.values.shape:
                raise ShapeError(
                    f"parameter/velocity shape drift: {p.values.shape} vs {v.shape}")
            v *= self.momentum
            grad = p._grad
            if grad is not None:
                v += grad
                grad[...] = 0.0
            p.values -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class GradientCheckReport:
    """Max relative error between analytic and central-difference gradients."""

    per_block: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_block.values()) if self.per_block else 0.0

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def gradient_check(loss_fn: Callable[[], Tensor],
                   params: Sequence[tuple[str, Tensor]],
                   step: float = 1e-4) -> GradientCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild its graph on every call and be deterministic.
    Intended for desk-scale networks only.
    """
    total = sum(p.values.size for _, p in params)
    if total >= 10_000:
        raise ValueError(f"gradient_check is limited to <10^4 parameters, got {total}")

    for _, p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params}
    for _, p in params:
        p.zero_grad()

    report = GradientCheckReport()
    for name, p in params:
        flat = p.values.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = loss_fn().item()
            flat[i] = original - step
            down = loss_fn().item()
            flat[i] = original
            numeric[i] = (up - down) / (2.0 * step)
        ana = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), 1e-6)
        report.per_block[name] = float(np.max(np.abs(ana - numeric) / denom))
    return report
