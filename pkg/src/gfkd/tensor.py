"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Tensors produced by a differentiable
operation whose inputs carry lineage remember a :class:`Node` (the producing
:class:`Function` and its inputs); :func:`backward` replays those nodes in
reverse topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward``, which maps
    the upstream gradient to one gradient (or ``None``) per tensor input.
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls()
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if any(t.requires_grad for t in inputs):
            return Tensor(out, requires_grad=True, _node=Node(fn, tuple(inputs)))
        return Tensor(out)


@dataclass(eq=False)
class Node:
    fn: Function
    inputs: Tuple["Tensor", ...]


class Tensor:
    """A dense double-precision array with optional lineage.

    Leaves created with ``requires_grad=True`` are the differentiation
    targets. Tensors are never mutated in place after construction.
    """

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, _node: Optional[Node] = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node = _node

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the functional forms live in gfkd.ops
    def __add__(self, other):
        from gfkd import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from gfkd import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from gfkd import ops

        return ops.add(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from gfkd import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from gfkd import ops

        return ops.scale(self, -1.0)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Tape:
    """Topologically ordered record of the nodes reachable from a loss.

    ``nodes`` lists tensors so that each appears after all of its inputs;
    ``grads`` accumulates one buffer per tensor id during replay.
    """

    nodes: List[Tensor] = field(default_factory=list)
    grads: Dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        tape = cls()
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                tape.nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for inp in reversed(t._node.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return tape

    def replay(self, root: Tensor) -> None:
        self.grads[id(root)] = np.ones_like(root.data)
        for t in reversed(self.nodes):
            g = self.grads.get(id(t))
            if g is None or t._node is None:
                continue
            in_grads = t._node.fn.backward(g)
            for inp, ig in zip(t._node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in self.grads:
                    self.grads[key] = self.grads[key] + ig
                else:
                    self.grads[key] = np.array(ig, dtype=np.float64)


class GradMap(dict):
    """Mapping leaf tensor -> gradient; unreachable leaves read as zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros_like(key.data)


def backward(loss: Tensor) -> GradMap:
    """Gradient of a scalar ``loss`` with respect to every lineage-bearing leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    out = GradMap()
    if not loss.requires_grad:
        return out
    tape = Tape.record(loss)
    tape.replay(loss)
    for t in tape.nodes:
        if t.is_leaf and id(t) in tape.grads:
            out[t] = tape.grads[id(t)].reshape(t.shape)
    return out


def grads_for(loss: Tensor, leaves: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Run :func:`backward` and key the result by the names in ``leaves``."""
    g = backward(loss)
    return {name: g[t] for name, t in leaves.items()}


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")

