"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy buffer. Every differentiable
operation that touches a tensor with ``requires_grad=True`` records its
parents and a backward closure on the output; :func:`backward` turns the
recorded graph into a :class:`Tape` (a topologically ordered node list) and
walks it once in reverse.

Storage is float32 by default. Wrap gradient checks in
``default_dtype(np.float64)`` to get the 64-bit shadow mode.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from collections import defaultdict
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_state = threading.local()
_node_ids = itertools.count()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference, finite differences)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate counts, attributed to named scopes."""

    def __init__(self) -> None:
        self.by_scope: dict[str, int] = defaultdict(int)
        self.scope: list[str] = []

    @property
    def total(self) -> int:
        return int(sum(self.by_scope.values()))

    def add(self, macs: int) -> None:
        key = "/".join(self.scope) if self.scope else "<root>"
        self.by_scope[key] += int(macs)

    def under(self, prefix: str) -> int:
        return int(sum(v for k, v in self.by_scope.items()
                       if k == prefix or k.startswith(prefix + "/")))


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    prev = getattr(_state, "macs", None)
    _state.macs = counter
    try:
        yield counter
    finally:
        _state.macs = prev


@contextlib.contextmanager
def mac_scope(name: str) -> Iterator[None]:
    counter = getattr(_state, "macs", None)
    if counter is None:
        yield
        return
    counter.scope.append(name)
    try:
        yield
    finally:
        counter.scope.pop()


def record_macs(macs: int) -> None:
    counter = getattr(_state, "macs", None)
    if counter is not None:
        counter.add(macs)


def _check_dims(shape: Sequence[int]) -> None:
    if any(d < 1 for d in shape):
        raise ShapeError(f"tensor dimensions must be >= 1, got {tuple(shape)}")


class Tensor:
    """An n-dimensional array that can take part in reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name",
                 "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        _check_dims(arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor],
                backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``data`` and, if any parent needs gradients, attach ``backward``.

    ``backward`` receives dL/d(out) and returns one gradient (or None) per
    parent, in order.
    """
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.node_id = next(_node_ids)
    return out


class Tape:
    """Topologically ordered record of the operations behind one output.

    ``nodes`` lists every recorded tensor that the output depends on, inputs
    before consumers. ``gradients`` maps node ids to dL/d(node) once
    :meth:`run` has been called.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = self._toposort(output)
        self.gradients: dict[int, np.ndarray] = {}

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def run(self, seed: np.ndarray, release: bool = True) -> None:
        grads: dict[int, np.ndarray] = {id(self.output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.node_id is not None:
                self.gradients[node.node_id] = g
            if node._backward is None:
                # leaf parameter
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(f"gradient shape {pg.shape} does not match {parent.data.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if release:
                node._parents = ()
                node._backward = None


def backward(loss: Tensor, release: bool = True) -> Tape:
    """Populate ``.grad`` of every leaf with requires_grad behind ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    tape = Tape(loss)
    tape.run(np.ones_like(loss.data), release=release)
    return tape


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _dtype_of(*arrays) -> np.dtype:
    return np.result_type(*[a.dtype for a in arrays])


def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Wrap a bare constant in the dtype of its tensor partner."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data + b.data
    return make_result(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data - b.data
    return make_result(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data * b.data

    def _bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), _bw)


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data / b.data

    def _bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), _bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return make_result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def _blas_ready(x: np.ndarray) -> np.ndarray:
    """Copy arrays whose strides would push numpy off its BLAS path."""
    if x.ndim == 2 and (x.flags.c_contiguous or x.flags.f_contiguous):
        return x
    return x if x.flags.c_contiguous else np.ascontiguousarray(x)


def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, P] -> [..., M, P]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = _blas_ready(a.data), _blas_ready(b.data)
    out = ad @ bd
    record_macs(int(np.prod(batch, dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def _bw(g):
        g = _blas_ready(g)
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), _bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), _bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_result(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _has_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[index])
    advanced = _has_advanced(index)

    def _bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(out, (a,), _bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    ref = list(ts[0].shape)
    ax = axis % len(ref)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != ax):
            raise ShapeError(f"concat shapes incompatible along axis {axis}: "
                             f"{[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def _bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return make_result(out, ts, _bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) if axis >= 0
                   else reshape(t, t.shape + (1,)) for t in ts], axis=axis)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad=requires_grad)
