"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (models, losses, attacks) consumes input gradients
computed here. The design is deliberately small and auditable:

* ``Tensor`` holds an immutable, C-contiguous float64 array. Values are
  checked to be finite on the way in and after every operation, so an
  overflow raises instead of silently propagating ``inf``.
* ``GradTape`` records primitive operations as they execute. A tape is
  single-use: one ``backward`` per recording. Recorded inputs are value
  snapshots (the arrays are frozen), so callers may rebind inputs between
  steps without corrupting a pending backward pass.
* Binary ops broadcast only scalar-vs-tensor or equal shapes. Anything
  fancier must be spelled out (e.g. row tiling via ``matmul`` with a ones
  column), which keeps every backward rule a one-liner.
* ``relu`` uses subgradient 0 at exactly 0, and ``max_reduce`` routes its
  gradient to the first (lowest-index) maximum, so sign-of-gradient
  computations are reproducible.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "DimensionError",
    "DomainError",
    "NonFiniteError",
    "TapeError",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "tanh",
    "exp",
    "log",
    "max_reduce",
    "sum_reduce",
    "reshape",
    "elementwise",
    "backward",
    "finite_diff_grad",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's domain (e.g. log of <= 0)."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity from finite inputs."""


class TapeError(RuntimeError):
    """A gradient tape was misused (reuse, non-scalar output, unknown output)."""


_uids = itertools.count(1)


class Tensor:
    """Immutable dense array of 64-bit floats.

    ``data`` is a read-only ``np.ndarray``; ``uid`` identifies the tensor in
    gradient maps returned by :func:`backward`.
    """

    __slots__ = ("data", "uid")

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64, order="C")
        if arr.size == 0:
            raise DimensionError(f"tensor dimensions must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor values must be finite")
        arr.setflags(write=False)
        self.data = arr
        self.uid = next(_uids)

    @staticmethod
    def _wrap(arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying (internal)."""
        t = object.__new__(Tensor)
        arr.setflags(write=False)
        t.data = arr
        t.uid = next(_uids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, uid={self.uid})"


class GradTape:
    """Ordered record of primitive operations for one reverse pass.

    Call :meth:`watch` on every tensor whose gradient is wanted, run the
    computation with ``tape=...``, then call :func:`backward` once.
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[int, tuple[tuple[int, Callable[[np.ndarray], np.ndarray]], ...]]] = []
        self._watched: dict[int, tuple[int, ...]] = {}
        self._known: set[int] = set()
        self._consumed = False

    def watch(self, t: Tensor) -> Tensor:
        """Request the gradient of this tensor from the next backward pass."""
        self._watched[t.uid] = t.shape
        self._known.add(t.uid)
        return t

    @property
    def watched(self) -> tuple[int, ...]:
        return tuple(self._watched)

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, vjps: Sequence[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]) -> None:
        self._nodes.append((out.uid, tuple((t.uid, fn) for t, fn in vjps)))
        self._known.add(out.uid)


def backward(tape: GradTape, output: Tensor) -> dict[int, Tensor]:
    """Reverse-replay ``tape`` from a scalar output.

    Returns a map ``tensor uid -> gradient Tensor`` covering every watched
    tensor; tensors that do not influence ``output`` get zero gradients.
    The tape is consumed: a second call raises :class:`TapeError`.
    """
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward pass; record a fresh tape")
    if output.size != 1:
        raise TapeError(f"backward requires a scalar output, got shape {output.shape}")
    if output.uid not in tape._known:
        raise TapeError("output tensor was not recorded on this tape")
    tape._consumed = True

    adjoints: dict[int, np.ndarray] = {output.uid: np.ones_like(output.data)}
    for out_uid, vjps in reversed(tape._nodes):
        g = adjoints.pop(out_uid, None)
        if g is None:
            continue
        for in_uid, vjp in vjps:
            contrib = vjp(g)
            prev = adjoints.get(in_uid)
            adjoints[in_uid] = contrib if prev is None else prev + contrib

    grads: dict[int, Tensor] = {}
    for uid, shape in tape._watched.items():
        g = adjoints.get(uid)
        if g is None:
            g = np.zeros(shape)
        if not np.isfinite(g).all():
            raise NonFiniteError("backward produced non-finite gradients")
        grads[uid] = Tensor._wrap(np.ascontiguousarray(g))
    return grads


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _finished(arr: np.ndarray, op: str) -> Tensor:
    # overflow surfaces as this error, not as a numpy warning
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values (overflow?)")
    return Tensor._wrap(arr)


def matmul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul expects (m,k) by (k,n), got {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _finished(a.data @ b.data, "matmul")
    if tape is not None:
        ad, bd = a.data, b.data
        tape._record(out, [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])
    return out


def _binary(op: str, a: Tensor, b: Tensor, fwd, vjp_a, vjp_b, tape: GradTape | None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op} supports equal shapes or scalar operands, got {a.shape} vs {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _finished(fwd(a.data, b.data), op)

    def _fit(g: np.ndarray, operand: Tensor) -> np.ndarray:
        # A scalar operand broadcast against the other: fold the gradient back.
        if operand.shape != g.shape:
            return np.asarray(g.sum()).reshape(operand.shape)
        return g

    if tape is not None:
        ad, bd = a.data, b.data
        tape._record(
            out,
            [
                (a, lambda g: _fit(vjp_a(g, ad, bd), a)),
                (b, lambda g: _fit(vjp_b(g, ad, bd), b)),
            ],
        )
    return out


def add(a, b, tape: GradTape | None = None) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, tape)


def sub(a, b, tape: GradTape | None = None) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, tape)


def mul(a, b, tape: GradTape | None = None) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, tape)


def _unary(op: str, x: Tensor, fwd, vjp, tape: GradTape | None) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _finished(fwd(x.data), op)
    if tape is not None:
        xd, od = x.data, out.data
        tape._record(out, [(x, lambda g: vjp(g, xd, od))])
    return out


def neg(x, tape: GradTape | None = None) -> Tensor:
    return _unary("neg", x, lambda v: -v, lambda g, v, o: -g, tape)


def relu(x, tape: GradTape | None = None) -> Tensor:
    # Subgradient at exactly 0 is 0 (strict inequality below).
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0.0), tape)


def tanh(x, tape: GradTape | None = None) -> Tensor:
    return _unary("tanh", x, np.tanh, lambda g, v, o: g * (1.0 - o * o), tape)


def exp(x, tape: GradTape | None = None) -> Tensor:
    return _unary("exp", x, np.exp, lambda g, v, o: g * o, tape)


def log(x, tape: GradTape | None = None) -> Tensor:
    x = _as_tensor(x)
    if not (x.data > 0.0).all():
        raise DomainError("log requires strictly positive values")
    return _unary("log", x, np.log, lambda g, v, o: g / v, tape)


def max_reduce(x, axis: int | None = None, tape: GradTape | None = None) -> Tensor:
    """Maximum over ``axis`` (all elements when None); ties go to the lowest index."""
    x = _as_tensor(x)
    if axis is None:
        out = _finished(np.asarray(x.data.max()), "max-reduce")
        flat_idx = int(x.data.argmax())
        if tape is not None:
            shape = x.shape

            def vjp(g: np.ndarray) -> np.ndarray:
                grad = np.zeros(shape)
                grad.reshape(-1)[flat_idx] = g.reshape(-1)[0]
                return grad

            tape._record(out, [(x, vjp)])
        return out

    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"max-reduce axis {axis} out of range for shape {x.shape}")
    out = _finished(x.data.max(axis=axis), "max-reduce")
    idx = x.data.argmax(axis=axis)
    if tape is not None:
        shape, ax = x.shape, axis % x.ndim

        def vjp(g: np.ndarray) -> np.ndarray:
            grad = np.zeros(shape)
            np.put_along_axis(grad, np.expand_dims(idx, ax), np.expand_dims(g, ax), ax)
            return grad

        tape._record(out, [(x, vjp)])
    return out


def sum_reduce(x, axis: int | None = None, tape: GradTape | None = None) -> Tensor:
    """Sum over ``axis`` (all elements when None)."""
    x = _as_tensor(x)
    if axis is None:
        out = _finished(np.asarray(x.data.sum()), "sum-reduce")
        if tape is not None:
            shape = x.shape
            tape._record(out, [(x, lambda g: np.full(shape, g.reshape(-1)[0]))])
        return out

    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"sum-reduce axis {axis} out of range for shape {x.shape}")
    out = _finished(x.data.sum(axis=axis), "sum-reduce")
    if tape is not None:
        shape, ax = x.shape, axis % x.ndim

        def vjp(g: np.ndarray) -> np.ndarray:
            return np.broadcast_to(np.expand_dims(g, ax), shape).copy()

        tape._record(out, [(x, vjp)])
    return out


def reshape(x, shape: tuple[int, ...], tape: GradTape | None = None) -> Tensor:
    x = _as_tensor(x)
    try:
        out_arr = x.data.reshape(shape).copy()
    except ValueError as err:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}: {err}") from None
    out = Tensor._wrap(out_arr)
    if tape is not None:
        in_shape = x.shape
        tape._record(out, [(x, lambda g: g.reshape(in_shape))])
    return out


_ELEMENTWISE: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "max-reduce": max_reduce,
    "sum-reduce": sum_reduce,
}


def elementwise(kind: str, *args, tape: GradTape | None = None, **kwargs) -> Tensor:
    """Dispatch an elementwise/reduction primitive by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}; valid: {sorted(_ELEMENTWISE)}") from None
    return fn(*args, tape=tape, **kwargs)


def finite_diff_grad(f: Callable[[Tensor], float | Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a scalar function, coordinate by coordinate."""
    if h <= 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    x = _as_tensor(x)

    def _scalar(value) -> float:
        return value.item() if isinstance(value, Tensor) else float(value)

    base = x.data.reshape(-1)
    grad = np.empty_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        hi = _scalar(f(Tensor(bumped.reshape(x.shape))))
        bumped[i] = base[i] - h
        lo = _scalar(f(Tensor(bumped.reshape(x.shape))))
        grad[i] = (hi - lo) / (2.0 * h)
    return Tensor._wrap(grad.reshape(x.shape))


def iter_primitives() -> Iterator[str]:
    """Names accepted by :func:`elementwise` (used by the property tests)."""
    return iter(_ELEMENTWISE)
