"""Minimal reverse-mode differentiation over a recorded list of primitive ops.

A ``Tape`` is single-writer: build one per training step and never share it
between concurrent steps.
"""
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ArgumentError


class Var:
    """A value recorded on a tape."""

    __slots__ = ('value', 'tape', 'trainable', 'name', '_id')
    # make ndarray (op) Var defer to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, tape: 'Tape', trainable: bool = False, name: Optional[str] = None):
        self.value = value
        self.tape = tape
        self.trainable = trainable
        self.name = name
        self._id = tape._next_id()

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ''
        return f"Var(shape={self.value.shape}{label})"

    # Operator sugar routes through the primitive set in ops.py.
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)


Operand = Union[Var, np.ndarray, float]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ('out', 'parents', 'backward', 'op')

    def __init__(self, out: Var, parents: Sequence[Operand], backward: Backward, op: str):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of primitive ops with their saved activations.

    With ``record=False`` values flow through unrecorded, which lets the same
    model code run with or without gradients.
    """

    def __init__(self, record: bool = True):
        self.record_ops = record
        self.nodes: List[_Node] = []
        self.leaves: Dict[str, Var] = {}
        self._counter = 0
        self._grads: Optional[Dict[int, np.ndarray]] = None

    def _next_id(self) -> int:
        self._counter += 1
        return self._counter

    def leaf(self, value: np.ndarray, name: Optional[str] = None, trainable: bool = True) -> Var:
        var = Var(np.asarray(value, dtype=np.float64), self, trainable=trainable, name=name)
        if name is not None and trainable:
            self.leaves[name] = var
        return var

    def record(self, value: np.ndarray, parents: Sequence[Operand], backward: Backward, op: str) -> Var:
        out = Var(value, self)
        if self.record_ops:
            self.nodes.append(_Node(out, parents, backward, op))
        return out

    def backward(self, root: Var) -> Dict[int, np.ndarray]:
        """Accumulate d(root)/d(var) for every var upstream of ``root``."""
        if root.tape is not self:
            raise ArgumentError('root was recorded on a different tape')
        if root.value.size != 1:
            raise ArgumentError(f'backward needs a scalar root, got shape {root.value.shape}')
        if not self.record_ops:
            raise ArgumentError('tape was created with record=False')

        grads: Dict[int, np.ndarray] = {root._id: np.ones_like(root.value)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out._id, None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(parent, Var):
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
        self._grads = grads
        return grads

    def grad(self, var: Var) -> np.ndarray:
        grads = self._grads
        if grads is None:
            raise ArgumentError('call backward() before reading gradients')
        g = grads.get(var._id)
        if g is None:
            return np.zeros_like(var.value)
        return g

    def leaf_grads(self) -> Dict[str, np.ndarray]:
        """Gradients for every named trainable leaf."""
        return {name: self.grad(var) for name, var in self.leaves.items()}


def value_of(x: Operand) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def tape_of(*xs: Operand) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None
