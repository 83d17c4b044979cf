"""Tensor container, recording tape and reverse-mode traversal."""

from __future__ import annotations

from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class ContractError(ValueError):
    """An input violates an operation precondition (e.g. not a simplex)."""


class TapeError(RuntimeError):
    """Misuse of the tape, such as differentiating a value it never recorded."""


class Tensor:
    """Dense float64 array plus the bookkeeping needed for differentiation.

    ``name`` marks a trainable leaf; gradients returned by :func:`backward`
    are keyed by it.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor contains non-finite entries")
        self.data = arr
        self.requires_grad = requires_grad or name is not None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operators delegate to the differentiable ops module.
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients are appended in execution order, which is
    therefore a topological order. A tape belongs to one thread.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._outputs: set = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.output))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: List[Tape] = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` and record a node on the active tape if any input needs grad.

    ``backward(g)`` receives dLoss/dOutput and returns one gradient (or None)
    per entry of ``inputs``.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("operation produced non-finite entries")
    out.data = data
    out.requires_grad = needs
    out.name = None
    tape = active_tape()
    if needs and tape is not None:
        tape.record(Node(inputs, out, backward))
    return out


def backward(
    tape: Tape, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None
) -> Dict[str, np.ndarray]:
    """Reverse traversal of ``tape`` from the scalar ``loss``.

    Returns gradients for every named leaf reached. When ``params`` is given,
    the result holds exactly those names, with zeros for parameters the loss
    does not depend on.
    """
    if loss not in tape:
        raise TapeError("loss was not recorded on this tape")
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.name is not None and t not in tape:
                leaves[key] = t

    out: Dict[str, np.ndarray] = {}
    for key, t in leaves.items():
        out[t.name] = out.get(t.name, 0) + grads[key]
    if params is not None:
        return {
            name: np.asarray(out.get(name, np.zeros_like(p.data)), dtype=np.float64).reshape(p.shape)
            for name, p in params.items()
        }
    return out
