"""A small dense 2-D tensor engine with tape-based reverse-mode autodiff.

Every tensor is a float64 matrix. Operations are recorded onto the active
:class:`Tape` (define-by-run); outside a ``with Tape():`` block nothing is
recorded and ops behave as plain numpy functions, which is what evaluation
code relies on.

New differentiable ops are written by subclassing :class:`Op` and calling
:func:`apply`; ``model`` does this for its sparse gather and attention
kernels.
"""

from __future__ import annotations

import threading
from typing import Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the tape: backward without a recorded forward, or twice."""


class ContractError(ValueError):
    """A precondition on an argument does not hold."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_tape", "_node")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"only 2-D tensors are supported, got ndim={arr.ndim}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None
        self._node: Optional[int] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.values = arr
        t.requires_grad = False
        t.grad = None
        t.name = ""
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor._wrap(np.zeros((rows, cols)))


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


class _Node:
    __slots__ = ("op", "inputs", "out", "ctx")

    def __init__(self, op, inputs, out, ctx):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.ctx = ctx


class Tape:
    """Ordered record of the ops executed in one forward pass.

    Nodes are appended as ops run, so the list is already in topological
    order. A tape supports exactly one backward traversal.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op, inputs, out: Tensor, ctx: dict) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); start a new Tape")
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(op, inputs, out, ctx))


class Op:
    """Base class for a differentiable op.

    ``forward(ctx, *arrays, **kwargs)`` returns the output array and may
    stash anything needed later in the ``ctx`` dict. ``backward(ctx, grad)``
    returns one gradient (or ``None``) per tensor input.
    """

    name = "op"

    @staticmethod
    def forward(ctx, *arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError


def apply(op: type, *inputs: Tensor, **kwargs) -> Tensor:
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op.name}: expected Tensor inputs, got {type(t).__name__}")
    ctx: dict = {}
    arr = op.forward(ctx, *(t.values for t in inputs), **kwargs)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op.name} produced non-finite values")
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, ctx)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t``."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward() needs a scalar (1x1) loss, got {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced on a Tape; nothing to differentiate")
    if tape.consumed:
        raise TapeError("backward() already ran on this tape; re-run the forward pass")
    tape.consumed = True

    pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes[: loss._node + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g if node.out.grad is None else node.out.grad + g
        in_grads = node.op.backward(node.ctx, g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise DimensionError(
                    f"{node.op.name}.backward returned grad {gi.shape} for input {t.shape}"
                )
            if t._tape is tape:
                key = id(t)
                pending[key] = gi if key not in pending else pending[key] + gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    for node in tape.nodes:
        node.ctx = None


def _check_same_shape(name: str, *arrays: np.ndarray) -> None:
    first = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != first:
            raise DimensionError(f"{name}: shape mismatch {first} vs {a.shape}")


class MatMul(Op):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        return grad @ ctx["b"].T, ctx["a"].T @ grad


class AddRowBias(Op):
    name = "add_row_bias"

    @staticmethod
    def forward(ctx, a, bias):
        if bias.shape != (1, a.shape[1]):
            raise DimensionError(f"add_row_bias: bias {bias.shape} does not fit {a.shape}")
        return a + bias

    @staticmethod
    def backward(ctx, grad):
        return grad, grad.sum(axis=0, keepdims=True)


class Relu(Op):
    name = "relu"

    @staticmethod
    def forward(ctx, a):
        mask = a > 0
        ctx["mask"] = mask
        return np.where(mask, a, 0.0)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["mask"],)


class Sigmoid(Op):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, a):
        # clip keeps exp() finite; 1/(1+e^36) is already below float64 eps
        z = np.clip(a, -36.0, 36.0)
        s = 1.0 / (1.0 + np.exp(-z))
        ctx["s"] = s
        return s

    @staticmethod
    def backward(ctx, grad):
        s = ctx["s"]
        return (grad * s * (1.0 - s),)


class ConcatCols(Op):
    name = "concat_cols"

    @staticmethod
    def forward(ctx, a, b):
        if a.shape[0] != b.shape[0]:
            raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
        ctx["split"] = a.shape[1]
        return np.concatenate([a, b], axis=1)

    @staticmethod
    def backward(ctx, grad):
        k = ctx["split"]
        return grad[:, :k], grad[:, k:]


class MaskedSqError(Op):
    name = "masked_sq_error"

    @staticmethod
    def forward(ctx, pred, target, mask):
        _check_same_shape("masked_sq_error", pred, target, mask)
        diff = (pred - target) * mask
        ctx["diff"] = diff
        return np.array([[np.sum(diff * diff)]])

    @staticmethod
    def backward(ctx, grad):
        d = ctx["diff"]
        g = 2.0 * grad[0, 0] * d
        return g, -g, None


class Add(Op):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _check_same_shape("add", a, b)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return grad, grad


class Sub(Op):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _check_same_shape("sub", a, b)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        return grad, -grad


class Mul(Op):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _check_same_shape("mul", a, b)
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx["b"], grad * ctx["a"]


class Scale(Op):
    name = "scale"

    @staticmethod
    def forward(ctx, a, c=1.0):
        ctx["c"] = c
        return a * c

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["c"],)


class AddScalar(Op):
    name = "add_scalar"

    @staticmethod
    def forward(ctx, a, c=0.0):
        return a + c

    @staticmethod
    def backward(ctx, grad):
        return (grad,)


class Sqrt(Op):
    name = "sqrt"

    @staticmethod
    def forward(ctx, a):
        if np.any(a < 0):
            raise FloatingPointError("sqrt: negative input")
        r = np.sqrt(a)
        ctx["r"] = r
        return r

    @staticmethod
    def backward(ctx, grad):
        return (grad * 0.5 / ctx["r"],)


class Log(Op):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        if np.any(a <= 0):
            raise FloatingPointError("log: non-positive input")
        ctx["a"] = a
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        return (grad / ctx["a"],)


class ClampMin(Op):
    name = "clamp_min"

    @staticmethod
    def forward(ctx, a, floor=0.0):
        keep = a >= floor
        ctx["keep"] = keep
        return np.where(keep, a, floor)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["keep"],)


class Transpose(Op):
    name = "transpose"

    @staticmethod
    def forward(ctx, a):
        return a.T.copy()

    @staticmethod
    def backward(ctx, grad):
        return (grad.T,)


class RowSum(Op):
    name = "row_sum"

    @staticmethod
    def forward(ctx, a):
        ctx["cols"] = a.shape[1]
        return a.sum(axis=1, keepdims=True)

    @staticmethod
    def backward(ctx, grad):
        return (np.repeat(grad, ctx["cols"], axis=1),)


class SumAll(Op):
    name = "sum"

    @staticmethod
    def forward(ctx, a):
        ctx["shape"] = a.shape
        return np.array([[a.sum()]])

    @staticmethod
    def backward(ctx, grad):
        return (np.full(ctx["shape"], grad[0, 0]),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply(MatMul, a, b)


def add_row_bias(a: Tensor, bias: Tensor) -> Tensor:
    return apply(AddRowBias, a, bias)


def relu(a: Tensor) -> Tensor:
    return apply(Relu, a)


def sigmoid(a: Tensor) -> Tensor:
    return apply(Sigmoid, a)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    return apply(ConcatCols, a, b)


def masked_sq_error(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    return apply(MaskedSqError, pred, target, mask)


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply(Add, a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply(Sub, a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply(Mul, a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return apply(Scale, a, c=float(c))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return apply(AddScalar, a, c=float(c))


def sqrt(a: Tensor) -> Tensor:
    return apply(Sqrt, a)


def log(a: Tensor) -> Tensor:
    return apply(Log, a)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    return apply(ClampMin, a, floor=float(floor))


def transpose(a: Tensor) -> Tensor:
    return apply(Transpose, a)


def row_sum(a: Tensor) -> Tensor:
    return apply(RowSum, a)


def sum_all(a: Tensor) -> Tensor:
    return apply(SumAll, a)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add_row_bias(matmul(x, weight), bias)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
