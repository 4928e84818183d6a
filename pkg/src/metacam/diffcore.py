"""Reverse-mode differentiation over a small, fixed set of array primitives.

Every backward rule is written in terms of the same traced primitives, so a
gradient computed with ``create_graph=True`` is itself a differentiable
expression.  That is what lets :func:`grad_through_update` differentiate
through one inner SGD step (reverse-over-reverse) without ever forming a
Hessian.

The primitive set is deliberately limited to what the encoder and the
memory losses need: elementwise arithmetic with numpy broadcasting, 2-D
matrix products, transpose, reshape/slice of the flat parameter vector,
``tanh``/``relu``/``exp``/``log``/``sqrt`` and axis sums.  All values are
float64.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

import numpy as np

_recording: contextvars.ContextVar[bool] = contextvars.ContextVar("recording", default=True)


@contextlib.contextmanager
def recording(enabled: bool):
    """Enable or disable graph construction for ops executed in the block."""
    token = _recording.set(enabled)
    try:
        yield
    finally:
        _recording.reset(token)


def no_grad():
    return recording(False)


class NonFiniteError(FloatingPointError):
    """A loss or gradient entry is NaN or infinite.

    ``block`` names the offending parameter block (``None`` for the loss
    itself) and ``phase`` says which pass produced it.
    """

    def __init__(self, message: str, *, block: str | None = None, phase: str | None = None):
        super().__init__(message)
        self.block = block
        self.phase = phase


class Tensor:
    """A float64 array node in a differentiation graph."""

    __slots__ = ("value", "parents", "is_leaf")
    __array_priority__ = 100.0

    def __init__(self, value, *, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[tuple[Tensor, Callable[[Tensor], Tensor]], ...] = ()
        self.is_leaf = requires_grad

    @property
    def requires_grad(self) -> bool:
        return self.is_leaf or bool(self.parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, key: slice) -> Tensor:
        return take_slice(self, key)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> Tensor:
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Iterable[tuple[Tensor, Callable[[Tensor], Tensor]]]) -> Tensor:
    out = Tensor(value)
    if _recording.get():
        out.parents = tuple((p, fn) for p, fn in parents if p.requires_grad)
    return out


# --- shape plumbing -------------------------------------------------------


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    x = as_tensor(x)
    if x.shape == shape:
        return x
    v = x.value
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and v.shape[i + lead] != 1
    )
    reduced = v.sum(axis=axes, keepdims=True)
    if lead:
        reduced = reduced.reshape(reduced.shape[lead:])
    return _node(reduced, [(x, lambda g: broadcast_to(g, x.shape))])


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    if x.shape == shape:
        return x
    return _node(np.broadcast_to(x.value, shape).copy(), [(x, lambda g: sum_to(g, x.shape))])


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.value.reshape(shape), [(x, lambda g: reshape(g, x.shape))])


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError("transpose is defined for 2-D tensors only")
    return _node(x.value.T.copy(), [(x, transpose)])


def take_slice(x: Tensor, key: slice) -> Tensor:
    """Contiguous slice of a 1-D tensor."""
    x = as_tensor(x)
    if x.ndim != 1 or not isinstance(key, slice):
        raise TypeError("only contiguous slices of 1-D tensors are supported")
    start, stop, step = key.indices(x.shape[0])
    if step != 1:
        raise TypeError("strided slices are not supported")
    n = x.shape[0]
    return _node(x.value[start:stop].copy(), [(x, lambda g: pad(g, start, n))])


def pad(x: Tensor, start: int, length: int) -> Tensor:
    """Embed a 1-D tensor into zeros of ``length`` at offset ``start``."""
    x = as_tensor(x)
    out = np.zeros(length)
    stop = start + x.shape[0]
    out[start:stop] = x.value
    return _node(out, [(x, lambda g: take_slice(g, slice(start, stop)))])


# --- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value + b.value,
        [(a, lambda g: sum_to(g, a.shape)), (b, lambda g: sum_to(g, b.shape))],
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value - b.value,
        [(a, lambda g: sum_to(g, a.shape)), (b, lambda g: sum_to(neg(g), b.shape))],
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, [(a, neg)])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value * b.value,
        [(a, lambda g: sum_to(mul(g, b), a.shape)), (b, lambda g: sum_to(mul(g, a), b.shape))],
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value / b.value,
        [
            (a, lambda g: sum_to(div(g, b), a.shape)),
            (b, lambda g: sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)),
        ],
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul is defined for 2-D tensors only")
    return _node(
        a.value @ b.value,
        [(a, lambda g: matmul(g, transpose(b))), (b, lambda g: matmul(transpose(a), g))],
    )


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    value = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g: Tensor) -> Tensor:
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.value, axis).shape)
        elif axis is None:
            g = reshape(g, (1,) * x.ndim)
        return broadcast_to(g, x.shape)

    return _node(value, [(x, back)])


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis) / float(n)


# --- elementwise nonlinearities ----------------------------------------


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = _node(np.tanh(x.value), ())
    if _recording.get() and x.requires_grad:
        out.parents = ((x, lambda g: mul(g, sub(1.0, mul(out, out)))),)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = (x.value > 0).astype(np.float64)
    return _node(x.value * mask, [(x, lambda g: mul(g, mask))])


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = _node(np.exp(x.value), ())
    if _recording.get() and x.requires_grad:
        out.parents = ((x, lambda g: mul(g, out)),)
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.value), [(x, lambda g: div(g, x))])


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = _node(np.sqrt(x.value), ())
    if _recording.get() and x.requires_grad:
        out.parents = ((x, lambda g: div(g, mul(2.0, out))),)
    return out


def identity(x) -> Tensor:
    return as_tensor(x)


def logsumexp(x, axis: int = -1) -> Tensor:
    """Row-wise log-sum-exp, keepdims.  The shift is treated as a constant,
    which leaves the value and every derivative exact."""
    x = as_tensor(x)
    shift = np.max(x.value, axis=axis, keepdims=True)
    return add(log(tsum(exp(sub(x, shift)), axis=axis, keepdims=True)), shift)


def log_softmax(x, axis: int = -1) -> Tensor:
    return sub(x, logsumexp(x, axis=axis))


def softmax(x, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


NONLINEARITIES: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh,
    "relu": relu,
    "identity": identity,
}


# --- backward pass --------------------------------------------------------


def _topological(out: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(out: Tensor, inputs: list[Tensor], *, create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``out`` with respect to each of ``inputs``.

    With ``create_graph`` the returned tensors carry their own graph and can
    be differentiated again.
    """
    if out.value.size != 1:
        raise ValueError("backward needs a scalar output")
    grads: dict[int, Tensor] = {id(out): Tensor(np.ones_like(out.value))}
    with recording(create_graph):
        for node in reversed(_topological(out)):
            g = grads.get(id(node))
            if g is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                contribution = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contribution if prev is None else add(prev, contribution)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        result.append(g if g is not None else Tensor(np.zeros_like(x.value)))
    return result


# --- parameter vectors ----------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int
    shape: tuple[int, ...]


@dataclass(frozen=True)
class Layout:
    """Ordered map from named parameter blocks to ranges of a flat vector."""

    segments: tuple[Segment, ...]

    def __post_init__(self):
        pos = 0
        names = set()
        for seg in self.segments:
            if seg.start != pos:
                raise ValueError(f"layout gap or overlap at block {seg.name!r}")
            if seg.stop - seg.start != int(np.prod(seg.shape, dtype=np.int64)):
                raise ValueError(f"block {seg.name!r} range does not match its shape")
            if seg.name in names:
                raise ValueError(f"duplicate block name {seg.name!r}")
            names.add(seg.name)
            pos = seg.stop

    @classmethod
    def from_shapes(cls, shapes: Iterable[tuple[str, tuple[int, ...]]]) -> Layout:
        segs = []
        pos = 0
        for name, shape in shapes:
            shape = tuple(int(s) for s in shape)
            size = int(np.prod(shape, dtype=np.int64))
            segs.append(Segment(name, pos, pos + size, shape))
            pos += size
        return cls(tuple(segs))

    @property
    def size(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def unpack(self, flat: Tensor) -> dict[str, Tensor]:
        return {s.name: reshape(take_slice(flat, slice(s.start, s.stop)), s.shape) for s in self.segments}

    def block_of(self, index: int) -> str:
        for s in self.segments:
            if s.start <= index < s.stop:
                return s.name
        raise IndexError(index)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != self.layout.size:
            raise ValueError(
                f"parameter vector of length {values.shape} does not match layout size {self.layout.size}"
            )
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def blocks(self) -> dict[str, np.ndarray]:
        return {s.name: self.values[s.start : s.stop].reshape(s.shape) for s in self.layout.segments}

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(np.array(values, dtype=np.float64), self.layout)

    def _check(self, other: ParamVector) -> None:
        if other.layout != self.layout:
            raise ValueError("parameter layouts differ")

    def __add__(self, other: ParamVector) -> ParamVector:
        self._check(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: ParamVector) -> ParamVector:
        self._check(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, c: float) -> ParamVector:
        return self.with_values(self.values * float(c))

    __rmul__ = __mul__

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ParamVector)
            and other.layout == self.layout
            and np.array_equal(other.values, self.values)
        )

    @classmethod
    def from_blocks(cls, blocks: Mapping[str, np.ndarray]) -> ParamVector:
        layout = Layout.from_shapes((k, np.shape(v)) for k, v in blocks.items())
        flat = np.concatenate([np.ravel(np.asarray(v, dtype=np.float64)) for v in blocks.values()])
        return cls(flat, layout)


@dataclass
class GradResult:
    loss: float
    gradient: ParamVector
    aux: Any = None
    parts: dict[str, float] = field(default_factory=dict)


LossFn = Callable[[dict[str, Tensor]], Any]


def _split_aux(out, has_aux: bool) -> tuple[Tensor, Any]:
    if has_aux:
        loss, aux = out
    else:
        loss, aux = out, None
    loss = as_tensor(loss)
    if loss.value.size != 1:
        raise ValueError("loss function must return a scalar")
    return loss, aux


def _check_finite_loss(loss: Tensor, phase: str) -> None:
    if not np.isfinite(loss.value).all():
        raise NonFiniteError(f"non-finite loss in {phase} pass", phase=phase)


def _check_finite_grad(g: np.ndarray, layout: Layout, phase: str) -> None:
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        block = layout.block_of(int(bad[0]))
        raise NonFiniteError(
            f"non-finite gradient in block {block!r} during {phase} pass", block=block, phase=phase
        )


def grad(loss_fn: LossFn, theta: ParamVector, *, has_aux: bool = False) -> GradResult:
    """Value and exact reverse-mode gradient of ``loss_fn`` at ``theta``.

    ``loss_fn`` receives the unpacked parameter blocks as tensors.  With
    ``has_aux`` it returns ``(loss, aux)`` and ``aux`` is passed through.
    """
    flat = Tensor(theta.values.copy(), requires_grad=True)
    loss, aux = _split_aux(loss_fn(theta.layout.unpack(flat)), has_aux)
    _check_finite_loss(loss, "forward")
    (g,) = backward(loss, [flat])
    _check_finite_grad(g.value, theta.layout, "backward")
    return GradResult(float(loss.value), theta.with_values(g.value), aux)


def grad_through_update(
    mtr_fn: LossFn,
    mte_fn: LossFn,
    theta: ParamVector,
    gamma: float,
    mode: str = "exact",
    *,
    has_aux: bool = False,
) -> GradResult:
    """Gradient of ``L_mtr(θ) + L_mte(θ - γ ∇L_mtr(θ))`` with respect to θ.

    ``mode="exact"`` differentiates through the inner step, which contributes
    the ``-γ H_mtr ∇L_mte(θ')`` correction; ``mode="first_order"`` treats the
    inner gradient as a constant.  ``parts`` of the result holds the two loss
    values and ``aux`` the pair of auxiliary outputs when ``has_aux``.
    """
    if mode not in ("exact", "first_order"):
        raise ValueError(f"unknown mode {mode!r}")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    layout = theta.layout
    flat = Tensor(theta.values.copy(), requires_grad=True)
    l_tr, aux_tr = _split_aux(mtr_fn(layout.unpack(flat)), has_aux)
    _check_finite_loss(l_tr, "inner")
    (g_tr,) = backward(l_tr, [flat], create_graph=(mode == "exact"))
    _check_finite_grad(g_tr.value, layout, "inner")
    if mode == "first_order":
        g_tr = g_tr.detach()
    theta_prime = sub(flat, mul(float(gamma), g_tr))
    l_te, aux_te = _split_aux(mte_fn(layout.unpack(theta_prime)), has_aux)
    _check_finite_loss(l_te, "outer")
    total = add(l_tr, l_te)
    (g,) = backward(total, [flat])
    _check_finite_grad(g.value, layout, "outer")
    return GradResult(
        float(total.value),
        theta.with_values(g.value),
        (aux_tr, aux_te) if has_aux else None,
        {"mtr": float(l_tr.value), "mte": float(l_te.value)},
    )
