"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to tensors that live on it.
Each record keeps the forward function, references to its inputs and the
vector-Jacobian product produced by the last forward evaluation, so the tape
can both back-propagate and be replayed with new parameter values.

Tensors created without a tape are plain values: primitives applied to them
compute eagerly and record nothing, which is how evaluation paths run.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError, ShapeError

# fwd(*arrays) -> (out, vjp) with vjp(g) -> tuple of input cotangents (None = no grad)
Forward = Callable[..., tuple[np.ndarray, Callable[[np.ndarray], tuple]]]


class Tensor:
    """A dense float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, data, tape: "Tape | None" = None, index: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        where = f"tape node {self.index}" if self.tape is not None else "detached"
        return f"Tensor(shape={self.shape}, {where})"

    # operator sugar; the primitives live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.slice(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)


class _Node:
    __slots__ = ("fwd", "inputs", "vjp")

    def __init__(self, fwd, inputs, vjp):
        self.fwd = fwd
        self.inputs = inputs  # tuple: int (node index) or ndarray (constant)
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications from parameters to outputs."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._values: list[np.ndarray] = []
        self._params: list[int] = []

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def n_params(self) -> int:
        return len(self._params)

    def param(self, value) -> Tensor:
        """Declare a differentiable leaf."""
        data = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NumericError("parameter contains non-finite values")
        idx = len(self._nodes)
        self._nodes.append(_Node(None, (), None))
        self._values.append(data)
        self._params.append(idx)
        return Tensor(data, self, idx)

    def apply(self, fwd: Forward, *inputs) -> Tensor:
        """Evaluate ``fwd`` on the inputs and record it."""
        refs = []
        arrays = []
        for x in inputs:
            if isinstance(x, Tensor) and x.tape is not None:
                if x.tape is not self:
                    raise ShapeError("operands belong to different tapes")
                refs.append(x.index)
                arrays.append(self._values[x.index])
            else:
                arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
                refs.append(arr)
                arrays.append(arr)
        out, vjp = fwd(*arrays)
        idx = len(self._nodes)
        self._nodes.append(_Node(fwd, tuple(refs), vjp))
        self._values.append(out)
        return Tensor(out, self, idx)

    def value(self, t: Tensor) -> np.ndarray:
        """Current value of a tensor on this tape (reflects the last replay)."""
        self._check(t)
        return self._values[t.index]

    def _check(self, t: Tensor) -> None:
        if not isinstance(t, Tensor) or t.tape is not self or not 0 <= t.index < len(self._nodes):
            raise ShapeError("node is not on this tape")

    def replay(self, param_values: Sequence[np.ndarray]) -> None:
        """Re-run every recorded primitive with new parameter values."""
        if len(param_values) != len(self._params):
            raise ShapeError(f"expected {len(self._params)} parameter arrays, got {len(param_values)}")
        for idx, val in zip(self._params, param_values):
            val = np.array(val, dtype=np.float64)
            if val.shape != self._values[idx].shape:
                raise ShapeError(f"parameter shape {val.shape} != {self._values[idx].shape}")
            self._values[idx] = val
        for i, node in enumerate(self._nodes):
            if node.fwd is None:
                continue
            arrays = [self._values[r] if isinstance(r, int) else r for r in node.inputs]
            self._values[i], node.vjp = node.fwd(*arrays)

    def backward(self, objective: Tensor) -> list[np.ndarray]:
        """Gradients of a scalar objective for every declared parameter, in declaration order."""
        self._check(objective)
        out = self._values[objective.index]
        if out.size != 1:
            raise ShapeError(f"objective must be scalar, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {objective.index: np.ones_like(out)}
        for i in range(objective.index, -1, -1):
            g = grads.pop(i, None) if self._nodes[i].fwd is not None else grads.get(i)
            if g is None or self._nodes[i].fwd is None:
                continue
            node = self._nodes[i]
            for ref, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not isinstance(ref, int):
                    continue
                if ref in grads:
                    grads[ref] = grads[ref] + gi
                else:
                    grads[ref] = gi
        return [grads.get(p, np.zeros_like(self._values[p])) for p in self._params]


def backward(tape: Tape, objective: Tensor) -> list[np.ndarray]:
    return tape.backward(objective)
