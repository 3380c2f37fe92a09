"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable primitive (see
:mod:`trunet.ops`) creates its output through :func:`make_node`, which links
the output to its inputs and stores a closure that maps the output adjoint to
input adjoints.  Nodes receive a monotonically increasing sequence number at
creation, so sorting by that number yields a topological order of any
sub-graph; :func:`backward` replays nodes in decreasing order.

Only ``float32`` and ``float64`` buffers are supported.  ``float64`` is
required for finite-difference checks.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_FLOAT_TYPES = (np.float32, np.float64)
_seq = itertools.count()
_grad_enabled = True
_tapes: list["GradientTape"] = []


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
    else:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            raise ContractError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    return arr


class Tensor:
    """N-dimensional real array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_array(data, dtype)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._seq = next(_seq)

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------- operators
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
        if isinstance(other, (int, float)):
            return ops.scale(self, 1.0 / other)
        raise TypeError("only division by a python scalar is supported")

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self, tape: Optional["GradientTape"] = None) -> None:
        backward(self, tape)


class Parameter(Tensor):
    """A trainable leaf tensor with a persistent, zero-initialised gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.data = np.array(self.data, copy=True, order="C")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class GradientTape:
    """Records every differentiable node created while the tape is active.

    Usage::

        with GradientTape() as tape:
            loss = f(params)
        tape.backward(loss)

    Creation order is a valid topological order, so replaying the tape from
    the end visits each node after all nodes that consume it.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "GradientTape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def __len__(self) -> int:
        return len(self.nodes)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def make_node(data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``data`` as the output of a primitive applied to ``parents``."""
    data = np.asarray(data)
    if 0 in data.shape or data.dtype not in _FLOAT_TYPES:
        out = Tensor(data)
    else:
        # fast path: primitives already produce valid float buffers
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._seq = next(_seq)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
        for tape in _tapes:
            tape.record(out)
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` (allocating on first use)."""
    if not t.requires_grad:
        return
    if g.shape != t.shape:
        raise ShapeError(f"adjoint shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def accumulate_at(t: Tensor, index, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad[index]`` for a basic (slice/int) index."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad[index] += g


def _reachable(loss: Tensor) -> list[Tensor]:
    seen = {id(loss)}
    stack = [loss]
    nodes = []
    while stack:
        node = stack.pop()
        nodes.append(node)
        for p in node._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    return nodes


def backward(loss: Tensor, tape: Optional[GradientTape] = None) -> None:
    """Propagate d(loss)/d(.) into every reachable tensor's ``grad``.

    Parameter gradients accumulate additively; call ``zero_grad`` first when
    a fresh gradient is wanted.  Intermediate adjoints are released after use
    so the same graph may be replayed again.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        accumulate(loss, np.ones_like(loss.data))
        return
    if tape is not None:
        wanted = {id(n) for n in _reachable(loss)}
        order: Iterable[Tensor] = [n for n in tape.nodes if id(n) in wanted]
        order = reversed(list(order))
    else:
        order = sorted(_reachable(loss), key=lambda n: n._seq, reverse=True)
    order = list(order)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in order:
        if node._backward is None or node.grad is None:
            continue
        g = node.grad
        node.grad = None
        node._backward(g)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
