"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (layers, attention, the full model) is expressed in
the operations defined here. Each op computes its result eagerly with numpy
and, when a Tape is active and an input participates in gradients, records
a backward rule onto that tape. Gradients are recovered by walking the tape
in reverse execution order, which is a valid reverse-topological order
because an operation's inputs always exist before the operation runs.

Broadcasting is deliberately restricted: elementwise ops require identical
shapes, except that `add` also accepts a trailing-axis bias vector. This
keeps every backward rule auditable.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "set_default_dtype",
    "get_default_dtype",
    "set_finite_checks",
    "record_op",
    "relu",
    "tanh",
    "sigmoid",
    "log",
    "softmax",
    "concat",
    "dropout",
    "embedding_lookup",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = False


def set_default_dtype(dtype) -> None:
    """Set the dtype for newly created tensors (float64 or float32).

    float64 is the test profile; finite-difference checks are unreliable
    in float32, which is only intended for faster training runs.
    """
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    """Enable assertions that every op result is free of NaN/Inf."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """A dense n-dimensional value that can participate in gradient taping.

    `data` is a row-major numpy array; `grad`, once populated by a backward
    pass, always has the same shape as `data`. Tensors are value-like: no op
    ever mutates an existing tensor's data or grad in place.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{rg})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    # -- operator sugar; python numbers act as non-differentiable constants --

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _add_const(self, float(other))

    def __radd__(self, other):
        return _add_const(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return _add_const(self, -float(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return _mul_const(self, float(other))

    def __rmul__(self, other):
        return _mul_const(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops as methods, numpy-style --

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"transpose expects a 2-d tensor, got shape {self.data.shape}")
        return _result(self.data.T, (self,), lambda g: (g.T,))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def slice(self, axis: int, start: int, stop: int) -> "Tensor":
        """Contiguous block along one axis; gradient scatters back."""
        nd = self.data.ndim
        if not -nd <= axis < nd:
            raise ShapeError(f"slice axis {axis} out of range for shape {self.data.shape}")
        axis = axis % nd
        extent = self.data.shape[axis]
        if not (0 <= start < stop <= extent):
            raise ShapeError(
                f"slice [{start}:{stop}] out of bounds on axis {axis} of shape {self.data.shape}"
            )
        index = tuple(slice(start, stop) if d == axis else slice(None) for d in range(nd))
        src_shape = self.data.shape

        def rule(g):
            full = np.zeros(src_shape, dtype=g.dtype)
            full[index] = g
            return (full,)

        return _result(self.data[index], (self,), rule)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return _reduce(self, axis, scale=False)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return _reduce(self, axis, scale=True)


# -- tape ------------------------------------------------------------------

_TAPES = threading.local()
# count of open tapes across all threads; lets untaped code skip the
# thread-local lookup entirely. Guarded by a lock so it can never read 0
# while any tape is open.
_OPEN_TAPES = 0
_OPEN_TAPES_LOCK = threading.Lock()


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one forward pass, confined to a thread.

    Entries are appended in execution order, so every operation's inputs
    precede it; the backward walk visits entries once, in reverse.
    """

    def __init__(self):
        self._entries: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        global _OPEN_TAPES
        _tape_stack().append(self)
        with _OPEN_TAPES_LOCK:
            _OPEN_TAPES += 1
        return self

    def __exit__(self, exc_type, exc, tb):
        global _OPEN_TAPES
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"
        with _OPEN_TAPES_LOCK:
            _OPEN_TAPES -= 1
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, inputs: tuple, output: "Tensor", rule: Callable) -> None:
        self._entries.append((inputs, output, rule))

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) onto every requires_grad leaf.

        `loss` must be a scalar. A loss with no recorded dependencies leaves
        all other gradients untouched (i.e. zero).
        """
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self.seed(loss, np.ones_like(loss.data))

    def seed(self, output: "Tensor", seed_grad: np.ndarray) -> None:
        """Propagate an arbitrary output gradient; used by grad_check.

        Propagation runs over per-call scratch storage and only the final
        per-tensor totals are added into `.grad`, so repeated calls on one
        tape accumulate linearly instead of compounding.
        """
        if seed_grad.shape != output.data.shape:
            raise ShapeError(
                f"seed gradient shape {seed_grad.shape} != output shape {output.data.shape}"
            )
        local: dict[int, np.ndarray] = {id(output): seed_grad}
        touched: list[Tensor] = [output]
        for inputs, out, rule in reversed(self._entries):
            g = local.get(id(out))
            if g is None:
                continue
            for tensor, gi in zip(inputs, rule(g)):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                cur = local.get(key)
                if cur is None:
                    local[key] = gi
                    touched.append(tensor)
                else:
                    local[key] = cur + gi
        for tensor in touched:
            if not tensor.requires_grad:
                continue
            total = local[id(tensor)]
            tensor.grad = total.copy() if tensor.grad is None else tensor.grad + total


def _result(data: np.ndarray, inputs: tuple, rule: Callable) -> Tensor:
    # flat and allocation-light: this sits under every tensor op
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by tensor op")
    requires = False
    for t in inputs:
        if t.requires_grad:
            requires = True
            break
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires
    out.grad = None
    if requires and _OPEN_TAPES:
        stack = getattr(_TAPES, "stack", None)
        if stack:
            stack[-1]._entries.append((inputs, out, rule))
    return out


def record_op(data, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Build a custom differentiable op.

    `rule` maps the upstream gradient (an ndarray shaped like `data`) to one
    gradient per input, in order; return None for an input that gets no
    gradient. Returned arrays must be fresh or safe to share, never later
    mutated in place.
    """
    return _result(np.asarray(data, dtype=_DEFAULT_DTYPE), tuple(inputs), rule)


# -- arithmetic ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-d bias broadcast over leading axes."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        return _result(ad + bd, (a, b), lambda g: (g, g))
    if bd.ndim == 1 and ad.ndim >= 2 and bd.shape[0] == ad.shape[-1]:
        n = bd.shape[0]
        return _result(ad + bd, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {ad.shape} and {bd.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: incompatible shapes {a.data.shape} and {b.data.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def _add_const(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"mul: incompatible shapes {ad.shape} and {bd.shape}")
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _mul_const(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _reduce(a: Tensor, axis: Optional[int], scale: bool) -> Tensor:
    ad = a.data
    if axis is None:
        count = ad.size
        out = ad.mean() if scale else ad.sum()

        def rule(g):
            gx = np.broadcast_to(g, ad.shape)
            return ((gx / count) if scale else gx,)

        return _result(np.asarray(out), (a,), rule)
    nd = ad.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"reduce axis {axis} out of range for shape {ad.shape}")
    axis = axis % nd
    count = ad.shape[axis]
    out = ad.mean(axis=axis) if scale else ad.sum(axis=axis)

    def rule(g):
        gx = np.broadcast_to(np.expand_dims(g, axis), ad.shape)
        return ((gx / count) if scale else gx,)

    return _result(out, (a,), rule)


# -- elementwise nonlinearities --------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # exp(-logaddexp(0, -x)) is 1/(1+e^-x) without overflow on either tail
    y = np.exp(-np.logaddexp(0.0, -x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax; each slice along `axis` sums to 1."""
    xd = x.data
    nd = xd.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax axis {axis} out of range for shape {xd.shape}")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), rule)


# -- structural ops --------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    arrays = [t.data for t in tensors]
    nd = arrays[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat axis {axis} out of range for rank {nd}")
    axis = axis % nd
    for arr in arrays[1:]:
        if arr.ndim != nd or any(
            arr.shape[d] != arrays[0].shape[d] for d in range(nd) if d != axis
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[a.shape for a in arrays]} on axis {axis}"
            )
    offsets = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def rule(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(np.concatenate(arrays, axis=axis), tuple(tensors), rule)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: scales by 1/(1-p) at train time, identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    factor = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of `table`; the gradient scatter-adds back into it."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got shape {table.data.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("embedding ids must be a flat sequence")
    vocab = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"embedding id out of range for table with {vocab} rows")
    td = table.data

    def rule(g):
        gt = np.zeros_like(td)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(td[idx], (table,), rule)


# -- verification ----------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between taped and central-difference gradients.

    Scalarizes f through a fixed random projection of its output (a plain
    sum would miss errors in ops whose rows sum to a constant, like
    softmax), then compares d/dx of that scalar coordinate by coordinate:
    |analytic - numeric| / max(1, |analytic|).
    """
    base = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    with Tape() as tape:
        y = f(base)
    w = np.random.default_rng(seed).standard_normal(y.data.shape)
    tape.seed(y, w)
    analytic = base.grad if base.grad is not None else np.zeros_like(base.data)

    numeric = np.zeros_like(base.data)
    flat = base.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float((w * f(base).data).sum())
        flat[i] = orig - h
        down = float((w * f(base).data).sum())
        flat[i] = orig
        nflat[i] = (up - down) / (2.0 * h)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
