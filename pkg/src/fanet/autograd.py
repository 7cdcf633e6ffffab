"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation in
:mod:`fanet.functional` produces a new tensor that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
:func:`backward` walks that graph once in reverse topological order and
accumulates into ``.grad`` of the leaves.

Precision is a process-wide default (single for training, double for
gradient checks) that can be switched temporarily with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import GradientError

_state = threading.local()

_PRECISIONS = {"single": np.float32, "double": np.float64}


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype) -> None:
    dtype = _PRECISIONS.get(dtype, dtype)
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype!r}")
    _state.dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(mode) -> Iterator[None]:
    """Temporarily switch the default float type ("single" or "double")."""
    previous = default_dtype()
    set_default_dtype(mode)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- construction of graph nodes -------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- conveniences ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # operator overloads delegate to fanet.functional (imported lazily to
    # keep this module free of op definitions)
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self):
        from . import functional as F
        return F.sum(self)

    def mean(self):
        from . import functional as F
        return F.mean(self)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def relu(self):
        from . import functional as F
        return F.relu(self)

    def sigmoid(self):
        from . import functional as F
        return F.sigmoid(self)


class Parameter(Tensor):
    """A trainable leaf tensor with an initialisation rule.

    ``init`` is one of ``"kaiming"``, ``"zeros"`` or ``"ones"``; ``fan_in`` is
    used by the Kaiming rule.  The registry name is assigned by the owning
    module tree.
    """

    __slots__ = ("init", "fan_in")

    def __init__(self, shape: Sequence[int], init: str = "kaiming", fan_in: int | None = None, dtype=None):
        super().__init__(np.zeros(tuple(shape), dtype=dtype or default_dtype()), requires_grad=True)
        self.init = init
        self.fan_in = fan_in if fan_in is not None else int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients from multiple paths are summed.  Unless ``retain_graph`` is set
    the graph is released afterwards, so a second call on the same root
    raises nothing but propagates nothing.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("backward on a tensor that does not require grad")

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
