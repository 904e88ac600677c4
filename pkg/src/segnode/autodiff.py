"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` used as a context manager records every primitive applied to
tracked tensors.  Leaves are tensors created with ``requires_grad=True``;
everything else produced on the active tape by a tracked input is tracked
too.  Outside an active tape nothing is recorded, which is how the ODE
solver runs forward without storing activations.
"""
from __future__ import annotations

import builtins
import itertools
import threading
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from . import memory

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_uids = itertools.count()
_tape_ids = itertools.count(1)
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    if stack and not stack[-1].frozen:
        return stack[-1]
    return None


class Tensor:
    """Dense float32/float64 array with optional tape linkage."""

    __slots__ = ("data", "requires_grad", "node", "uid", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.uid = next(_uids)
        tracker = memory._active
        if tracker is not None:
            tracker.track(self, arr.nbytes)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Node:
    __slots__ = ("tape_id", "inputs", "out_uid", "vjp", "__weakref__")

    def __init__(self, tape_id: int, inputs: tuple, out_uid: int, vjp: Callable):
        self.tape_id = tape_id
        self.inputs = inputs
        self.out_uid = out_uid
        self.vjp = vjp


class Tape:
    """Append-only record of primitive applications.

    ``with Tape() as tape: ...`` makes the tape current for the block.
    Calling :func:`backward` or :func:`vjp` freezes it; a frozen tape can be
    replayed any number of times.
    """

    def __init__(self) -> None:
        self.id = next(_tape_ids)
        self.nodes: list[Node] = []
        self.frozen = False

    @property
    def mode(self) -> str:
        return "frozen" if self.frozen else "recording"

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or (t.node is not None and t.node.tape_id == self.id)


class GradMap(dict):
    """Gradients keyed by the tensor they belong to."""

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


def record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable,
           saved: Iterable[np.ndarray] = ()) -> Tensor:
    """Wrap ``out_data`` and, if any input is tracked, log a tape node.

    ``vjp(g)`` must return one cotangent (or ``None``) per input.  ``saved``
    lists the arrays the closure keeps alive, for activation accounting.
    """
    out = Tensor(out_data)
    tape = current_tape()
    if tape is None:
        return out
    tid = tape.id
    if not any(t.requires_grad or (t.node is not None and t.node.tape_id == tid) for t in inputs):
        return out
    node = Node(tid, tuple(inputs), out.uid, vjp)
    tracker = memory._active
    if tracker is not None:
        nbytes = builtins.sum(a.nbytes for a in saved)
        if nbytes:
            tracker.track(node, nbytes)
    tape.nodes.append(node)
    out.node = node
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# elementwise


def _broadcast_b(a: Tensor, b: Tensor, opname: str) -> tuple[np.ndarray, bool]:
    """Return b's data shaped for a, and whether it was channel-broadcast."""
    if a.shape == b.shape:
        return b.data, False
    if a.ndim == 4 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1], 1, 1)):
        return b.data.reshape(1, -1, 1, 1), True
    raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _add_scalar(a, float(b))
    bd, bc = _broadcast_b(a, b, "add")
    bshape = b.shape

    def vjp(g):
        gb = g.sum(axis=(0, 2, 3)).reshape(bshape) if bc else g
        return g, gb

    return record(a.data + bd, (a, b), vjp)


def _add_scalar(a: Tensor, c: float) -> Tensor:
    return record(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _add_scalar(a, -float(b))
    bd, bc = _broadcast_b(a, b, "sub")
    bshape = b.shape

    def vjp(g):
        gb = g.sum(axis=(0, 2, 3)).reshape(bshape) if bc else g
        return g, -gb

    return record(a.data - bd, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    bd, bc = _broadcast_b(a, b, "mul")
    ad = a.data
    bshape = b.shape

    def vjp(g):
        gb = g * ad
        if bc:
            gb = gb.sum(axis=(0, 2, 3)).reshape(bshape)
        return g * bd, gb

    return record(ad * bd, (a, b), vjp)


def scale(a: Tensor, alpha: float) -> Tensor:
    c = a.data.dtype.type(alpha)
    return record(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # strict inequality: the subgradient at exactly 0 is 0
    return record(a.data * mask, (a,), lambda g: (g * mask,), saved=(mask,))


def axpy(alpha: float, x: Tensor, y: Tensor) -> Tensor:
    """``alpha * x + y`` as one primitive."""
    if x.shape != y.shape:
        raise ValueError(f"axpy: shape mismatch {x.shape} vs {y.shape}")
    c = x.data.dtype.type(alpha)
    return record(c * x.data + y.data, (x, y), lambda g: (g * c, g))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


# --------------------------------------------------------------------------
# reductions


def _norm_axes(x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ValueError(f"invalid axis {ax} for tensor of rank {x.ndim}")
        out.append(ax % x.ndim)
    return tuple(sorted(set(out)))


def sum(x: Tensor, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ax = _norm_axes(x, axes)
    shape = x.shape
    kept = tuple(1 if i in ax else n for i, n in enumerate(shape))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    return record(np.asarray(x.data.sum(axis=ax)), (x,), vjp)


def mean(x: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(x, axes)
    count = int(np.prod([x.shape[i] for i in ax])) if ax else 1
    return scale(sum(x, ax), 1.0 / count)


# --------------------------------------------------------------------------
# gradients


def _on_tape(t: Tensor, tape: Tape) -> bool:
    return t.node is not None and t.node.tape_id == tape.id


def vjp(tape: Tape, outputs: Sequence[Tensor], cotangents: Sequence) -> GradMap:
    """Pull ``cotangents`` back through ``tape`` to every tracked leaf.

    Equivalent to ``backward(sum_i <cotangent_i, output_i>)``.
    """
    if len(outputs) != len(cotangents):
        raise ValueError(f"{len(outputs)} outputs but {len(cotangents)} cotangents")
    tape.frozen = True
    pending: dict[int, np.ndarray] = {}
    leaves = GradMap()
    for out, ct in zip(outputs, cotangents):
        ct = ct.data if isinstance(ct, Tensor) else np.asarray(ct, dtype=out.dtype)
        if ct.shape != out.shape:
            raise ValueError(f"vjp: cotangent shape {ct.shape} vs output shape {out.shape}")
        if _on_tape(out, tape):
            _accumulate(pending, out.uid, ct)
        elif out.requires_grad:
            _accumulate(leaves, out, ct)
    for node in reversed(tape.nodes):
        g = pending.pop(node.out_uid, None)
        if g is None:
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if inp.node is not None and inp.node.tape_id == tape.id:
                _accumulate(pending, inp.uid, gi)
            elif inp.requires_grad:
                _accumulate(leaves, inp, gi)
    return leaves


def _accumulate(store: dict, key, g: np.ndarray) -> None:
    prev = store.get(key)
    store[key] = g if prev is None else prev + g


def backward(loss: Tensor, tape: Tape) -> GradMap:
    """Gradients of a scalar ``loss`` recorded on ``tape`` w.r.t. its leaves."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _on_tape(loss, tape):
        raise ValueError("loss was not produced on this tape")
    return vjp(tape, [loss], [np.ones_like(loss.data)])


# --------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named, ordered collection of learnable tensors."""

    def __init__(self, items: Union[Mapping[str, Tensor], Iterable[tuple[str, Tensor]], None] = None):
        self._items: dict[str, Tensor] = {}
        if items is not None:
            pairs = items.items() if isinstance(items, Mapping) else items
            for name, t in pairs:
                self[name] = t

    def __setitem__(self, name: str, value) -> None:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._items[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def subset(self, prefix: str) -> "ParamStore":
        """View sharing the same tensors for names starting with ``prefix``."""
        sub = ParamStore()
        sub._items = {k: v for k, v in self._items.items() if k.startswith(prefix)}
        return sub

    def size(self) -> int:
        return int(np.sum([t.size for t in self._items.values()])) if self._items else 0

    def nbytes(self) -> int:
        return int(np.sum([t.data.nbytes for t in self._items.values()])) if self._items else 0

    def flatten(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._items.values()])

    def assign_flat(self, vec: np.ndarray) -> None:
        """Overwrite every tensor's data in place from one flat vector."""
        vec = np.asarray(vec)
        if vec.size != self.size():
            raise ValueError(f"flat vector has {vec.size} entries, store has {self.size()}")
        offset = 0
        for t in self._items.values():
            n = t.size
            t.data[...] = vec[offset:offset + n].reshape(t.shape)
            offset += n

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        """Split a flat vector into per-name arrays (no mutation)."""
        out = {}
        offset = 0
        for name, t in self._items.items():
            n = t.size
            out[name] = np.asarray(vec[offset:offset + n]).reshape(t.shape)
            offset += n
        if offset != np.asarray(vec).size:
            raise ValueError(f"flat vector has {np.asarray(vec).size} entries, store has {offset}")
        return out

    def named(self, grads: Mapping[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
        """Per-name gradients from a tensor-keyed GradMap; missing ones are zeros."""
        return {name: (grads[t] if t in grads else np.zeros_like(t.data))
                for name, t in self._items.items()}

    def flat_grad(self, named: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(named[k]).reshape(-1) for k in self._items])

    def astype(self, dtype) -> None:
        for t in self._items.values():
            t.data = t.data.astype(dtype)


def finite_diff_grad(f: Callable[[ParamStore], float], params: ParamStore, eps: float = 1e-5,
                     sample: Optional[Sequence[int]] = None) -> dict[int, float]:
    """Central-difference gradient estimate at selected flat indices.

    Each sampled entry of ``params`` is perturbed in place and restored.
    Returns a sparse map from flat index to estimate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tensors = params.tensors()
    offsets = np.cumsum([0] + [t.size for t in tensors])
    indices = range(int(offsets[-1])) if sample is None else sample
    out: dict[int, float] = {}
    for i in indices:
        i = int(i)
        k = int(np.searchsorted(offsets, i, side="right")) - 1
        flat = tensors[k].data.reshape(-1)
        j = i - int(offsets[k])
        orig = flat[j]
        try:
            flat[j] = orig + eps
            fp = float(f(params))
            flat[j] = orig - eps
            fm = float(f(params))
        finally:
            flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective at flat index {i}")
        out[i] = (fp - fm) / (2 * eps)
    return out
