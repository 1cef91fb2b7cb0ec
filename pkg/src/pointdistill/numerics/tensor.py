"""Dense tensors with tape-based reverse-mode gradient recording."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class FrozenTensorError(RuntimeError):
    """A gradient was routed into a tensor marked frozen."""


class Tensor:
    """Numpy array plus the bookkeeping needed for reverse-mode differentiation.

    ``requires_grad`` marks a leaf whose ``grad`` is populated by
    :meth:`Tape.backward`. ``frozen`` tensors (teacher targets) may never
    receive a gradient; routing one into them raises ``FrozenTensorError``.
    """

    __slots__ = ("data", "grad", "requires_grad", "frozen", "name",
                 "grad_contributions", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, frozen: bool = False,
                 name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and not frozen
        self.frozen = frozen
        self.name = name
        self.grad_contributions = 0
        self._leaf = True

    # --- array-ish surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None
        self.grad_contributions = 0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Record:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops (the gradient record).

    Use as a context manager; ops executed while a tape is active and whose
    inputs require gradients are appended in execution order.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) to every requires_grad leaf.

        Leaf gradients accumulate (sum) into ``tensor.grad``. Each recorded op
        is visited exactly once, newest first. Returns the map of leaf id to
        gradient produced by this call.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced: dict[int, np.ndarray] = {}
        if loss._leaf and loss.requires_grad:
            _accumulate(loss, adjoint[id(loss)], produced)
        for rec in reversed(self.records):
            g = adjoint.pop(id(rec.out), None)
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not isinstance(inp, Tensor):
                    continue
                if not inp.requires_grad:
                    continue
                if inp._leaf:
                    _accumulate(inp, gi, produced)
                else:
                    key = id(inp)
                    if key in adjoint:
                        adjoint[key] = adjoint[key] + gi
                    else:
                        adjoint[key] = gi
        return produced


def _accumulate(t: Tensor, g: np.ndarray, produced: dict[int, np.ndarray]) -> None:
    if t.frozen:
        raise FrozenTensorError(f"gradient routed into frozen tensor {t.name or t!r}")
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g
    t.grad_contributions += 1
    produced[id(t)] = produced[id(t)] + g if id(t) in produced else g


def backward(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def recording() -> bool:
    return bool(_ACTIVE)


def make_result(op: str, data: np.ndarray, inputs: Sequence, backward: BackwardFn) -> Tensor:
    """Wrap an op's forward value and record it on every active tape."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _ACTIVE and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        rec = _Record(op, out, tuple(inputs), backward)
        for tape in _ACTIVE:
            tape.records.append(rec)
    return out
