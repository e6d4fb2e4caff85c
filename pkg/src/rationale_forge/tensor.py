"""Minimal dense-tensor autodiff core.

Float64 tensors backed by numpy, with reverse-mode differentiation over
exactly the operation set the training losses need: matmul, elementwise
arithmetic, exp / clamped log / tanh / abs, last-axis softmax, full
reductions, row gather, last-axis concat, plus the temperature-controlled
noisy relaxation used to sample token masks and its straight-through
discretization.

Recording happens on an explicit :class:`Tape`: while a tape is active
(``with Tape() as tape:``) every op whose inputs require gradients appends
a record, and ``tape.backward(loss)`` replays the records in reverse,
accumulating gradients additively into ``Tensor.grad``.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

# Clamp floor for log arguments; keeps cross-entropy and KL terms finite
# when a predicted probability collapses to zero.
LOG_EPS = 1e-8

ArrayLike = Union[float, int, Sequence, np.ndarray, "Tensor"]


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class DomainError(ValueError):
    """Numeric argument outside the op's documented domain."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape or a non-scalar loss."""


class Tensor:
    """Dense float64 value, optionally carrying a gradient buffer.

    Data is immutable after construction except for ``grad`` and the
    trainer's between-step parameter updates.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value: ArrayLike) -> Tensor:
    return Tensor(value, requires_grad=False)


def parameter(value: ArrayLike) -> Tensor:
    return Tensor(value, requires_grad=True)


def detach(t: Tensor) -> Tensor:
    """Same values, severed from the graph (no gradient flows past it)."""
    return Tensor(t.data, requires_grad=False)


class _Record:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.out = out
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


def _active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed ops for one forward computation.

    backward() traverses the records exactly once, in reverse execution
    order, and may be called at most once per tape.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every recorded tensor reachable from ``loss``."""
        if self._consumed:
            raise TapeError("backward already ran on this tape; rebuild the forward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        self._consumed = True
        _accumulate(loss, np.ones_like(loss.data))
        for record in reversed(self._records):
            out_grad = record.out.grad
            if out_grad is not None:
                record.backward_fn(out_grad)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if t.grad is None:
        t.grad = grad.copy()
    else:
        t.grad = t.grad + grad


def _register(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append(_Record(out, backward_fn))
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _register(out, backward)


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("subtract", a, b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _register(out, backward)


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("multiply", a, b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _register(out, backward)


def scale(t: ArrayLike, factor: float) -> Tensor:
    t = as_tensor(t)
    factor = float(factor)
    out = Tensor(t.data * factor, t.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(t, g * factor)

    return _register(out, backward)


def add_scalar(t: ArrayLike, value: float) -> Tensor:
    t = as_tensor(t)
    out = Tensor(t.data + float(value), t.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(t, g)

    return _register(out, backward)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _register(out, backward)


def transpose(t: ArrayLike) -> Tensor:
    t = as_tensor(t)
    if t.data.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {t.shape}")
    out = Tensor(t.data.T.copy(), t.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(t, g.T)

    return _register(out, backward)


def reshape(t: ArrayLike, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    new_shape = tuple(int(s) for s in shape)
    if int(np.prod(new_shape)) != t.size:
        raise ShapeError(f"reshape: cannot view shape {t.shape} as {new_shape}")
    out = Tensor(t.data.reshape(new_shape), t.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(t, g.reshape(t.shape))

    return _register(out, backward)


def gather_rows(t: ArrayLike, indices: Sequence[int]) -> Tensor:
    """Select rows (elements, for 1-D input) along the first axis."""
    t = as_tensor(t)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")
    if t.size and (idx.min(initial=0) < 0 or idx.max(initial=-1) >= t.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for first-axis size {t.shape[0]}")
    out = Tensor(t.data[idx], t.requires_grad)

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(t.data)
        np.add.at(full, idx, g)
        _accumulate(t, full)

    return _register(out, backward)


def concat_last(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last: shapes {a.shape} and {b.shape} differ off the last axis")
    out = Tensor(np.concatenate([a.data, b.data], axis=-1), a.requires_grad or b.requires_grad)
    split = a.shape[-1]

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g[..., :split])
        if b.requires_grad:
            _accumulate(b, g[..., split:])

    return _register(out, backward)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(t: ArrayLike) -> Tensor:
    t = as_tensor(t)
    out = Tensor(np.exp(t.data), t.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(t, g * out.data)

    return _register(out, backward)


def log(t: ArrayLike) -> Tensor:
    """Natural log of max(x, LOG_EPS); zero gradient where the clamp is active."""
    t = as_tensor(t)
    clamped = np.maximum(t.data, LOG_EPS)
    out = Tensor(np.log(clamped), t.requires_grad)
    active = (t.data > LOG_EPS).astype(np.float64)

    def backward(g: np.ndarray) -> None:
        _accumulate(t, g * active / clamped)

    return _register(out, backward)


def tanh(t: ArrayLike) -> Tensor:
    t = as_tensor(t)
    out = Tensor(np.tanh(t.data), t.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(t, g * (1.0 - out.data * out.data))

    return _register(out, backward)


def absolute(t: ArrayLike) -> Tensor:
    """|x| with the usual subgradient convention sign(0) = 0."""
    t = as_tensor(t)
    out = Tensor(np.abs(t.data), t.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(t, g * np.sign(t.data))

    return _register(out, backward)


def softmax(t: ArrayLike) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=-1, keepdims=True), t.requires_grad)

    def backward(g: np.ndarray) -> None:
        s = out.data
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(t, s * (g - dot))

    return _register(out, backward)


# ---------------------------------------------------------------------------
# reductions and distances


def tensor_sum(t: ArrayLike) -> Tensor:
    t = as_tensor(t)
    out = Tensor(t.data.sum(), t.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(t, np.full_like(t.data, float(g)))

    return _register(out, backward)


def mean(t: ArrayLike) -> Tensor:
    t = as_tensor(t)
    if t.size == 0:
        raise ShapeError("mean: empty tensor")
    out = Tensor(t.data.mean(), t.requires_grad)
    inv = 1.0 / t.size

    def backward(g: np.ndarray) -> None:
        _accumulate(t, np.full_like(t.data, float(g) * inv))

    return _register(out, backward)


def squared_distance(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Squared L2 distance sum((a - b)^2), differentiable in both operands."""
    diff = subtract(a, b)
    return tensor_sum(multiply(diff, diff))


# ---------------------------------------------------------------------------
# relaxed discrete sampling


def sample_gumbel(shape: Sequence[int], rng: np.random.Generator) -> Tensor:
    """Standard Gumbel(0,1) draws: -log(-log(u)), u uniform on (0,1)."""
    u = np.clip(rng.random(tuple(shape)), 1e-12, 1.0 - 1e-12)
    return constant(-np.log(-np.log(u)))


def gumbel_softmax(log_probs: Tensor, noise: Tensor, tau: float) -> Tensor:
    """Per-row softmax of (log_probs + noise) / tau.

    Rows sum to one and the output is differentiable w.r.t. ``log_probs``;
    ``noise`` is treated as a fixed sample. Lower ``tau`` sharpens the rows
    toward one-hot, higher ``tau`` flattens them toward uniform.
    """
    if tau <= 0:
        raise DomainError(f"gumbel_softmax: tau must be positive, got {tau}")
    _check_same_shape("gumbel_softmax", as_tensor(log_probs), as_tensor(noise))
    return softmax(scale(add(log_probs, noise), 1.0 / float(tau)))


def straight_through(soft: Tensor) -> Tensor:
    """Row-wise argmax one-hot forward; gradients pass through unchanged."""
    soft = as_tensor(soft)
    if soft.data.ndim < 1:
        raise ShapeError("straight_through: expected at least one axis")
    hard = np.zeros_like(soft.data)
    winners = soft.data.argmax(axis=-1)
    np.put_along_axis(hard, winners[..., None], 1.0, axis=-1)
    out = Tensor(hard, soft.requires_grad)

    def backward(g: np.ndarray) -> None:
        _accumulate(soft, g)

    return _register(out, backward)
