"""Minimal reverse-mode autodiff over dense numpy arrays.

Define-by-run: ops executed under an active ``Tape`` append one node each, in
execution order (which is already topological). ``Tape.backward`` walks the
node list once, in reverse, accumulating ``.grad`` on every tensor that
requires gradients. Outside a tape, ops are plain numpy forward computations.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

RMS_EPS = 1e-6


class ContractViolation(ValueError):
    """An operation was called outside its contract (shape, scalar-ness, ...)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None  # allocated on first accumulation or zero_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is None and self.requires_grad:
            self.grad = np.zeros_like(self.data)
        if self.grad is not None:
            self.grad[...] = 0.0

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))


# A node is (output, inputs, vjp); vjp maps the output gradient to one
# gradient array (or None) per input, in order.
Node = tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], tuple]]

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records ops in execution order; replays them backwards for gradients."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into .grad of every recorded tensor.

        Repeated calls (same or different loss) accumulate additively: the
        in-flight gradient flow is private to each call, only .grad persists.
        """
        if loss.data.shape != ():
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.data.shape}")
        flow: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        leaves: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self.nodes):
            g = flow.pop(id(out), None)
            leaves.pop(id(out), None)
            if g is None:
                continue
            out._accumulate(g)
            for tensor, gi in zip(inputs, vjp(g)):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in flow:
                    flow[key] = flow[key] + gi
                else:
                    flow[key] = gi
                    leaves[key] = tensor
        for key, g in flow.items():
            leaves[key]._accumulate(g)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if _TAPE_STACK:
        for t in inputs:
            if t.requires_grad:
                out = Tensor(data, requires_grad=True)
                _TAPE_STACK[-1].nodes.append((out, inputs, vjp))
                return out
    return Tensor(data)


def zero_grad(params) -> None:
    """Reset gradients of an iterable of tensors (or anything with .parameters())."""
    if hasattr(params, "parameters"):
        params = params.parameters()
    for p in params:
        p.zero_grad()


def _check_2d(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise ContractViolation(f"{name} expects 2-D tensors, got shape {t.data.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the row/column-broadcast operand's shape."""
    if g.shape == shape:
        return g
    if len(shape) == 1:  # (n,) against (m, n)
        return g.sum(axis=0)
    if shape[0] == 1 and g.shape[0] != 1:  # (1, n)
        return g.sum(axis=0, keepdims=True)
    if len(shape) == 2 and shape[1] == 1 and g.shape[1] != 1:  # (m, 1)
        return g.sum(axis=1, keepdims=True)
    raise ContractViolation(f"cannot reduce gradient {g.shape} to {shape}")


def _broadcast_ok(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    if a == b:
        return True
    if len(a) == 2 and (b == (a[1],) or b == (1, a[1]) or b == (a[0], 1)):
        return True
    if len(b) == 2 and (a == (b[1],) or a == (1, b[1]) or a == (b[0], 1)):
        return True
    return False


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ContractViolation(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ContractViolation(f"multiply shape mismatch: {a.shape} vs {b.shape}")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _record(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _record(out_data, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def row_softmax(a: Tensor) -> Tensor:
    _check_2d("row_softmax", a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        return (out_data * (g - dot),)

    return _record(out_data, (a,), vjp)


def row_log_softmax(a: Tensor) -> Tensor:
    _check_2d("row_log_softmax", a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def vjp(g):
        return (g - np.exp(out_data) * g.sum(axis=1, keepdims=True),)

    return _record(out_data, (a,), vjp)


def rms_norm(a: Tensor) -> Tensor:
    """Scale each row to unit root-mean-square (no learned gain)."""
    _check_2d("rms_norm", a)
    n = a.shape[1]
    s = 1.0 / np.sqrt((a.data * a.data).mean(axis=1, keepdims=True) + RMS_EPS)
    out_data = a.data * s

    def vjp(g):
        dot = (a.data * g).sum(axis=1, keepdims=True)
        return (s * g - (s ** 3 / n) * a.data * dot,)

    return _record(out_data, (a,), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ContractViolation(f"embedding ids must be 1-D, got shape {ids.shape}")

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _record(table.data[ids], (table,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if axis not in (0, 1):
        raise ContractViolation(f"concat axis must be 0 or 1, got {axis}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1], ...] for i in range(len(sizes)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def slice2d(a: Tensor, rows: slice = slice(None), cols: slice = slice(None)) -> Tensor:
    _check_2d("slice2d", a)

    def vjp(g):
        da = np.zeros_like(a.data)
        da[rows, cols] = g
        return (da,)

    return _record(a.data[rows, cols].copy(), (a,), vjp)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _record(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ContractViolation(f"sum over axis {axis} undefined for shape {a.shape}")
    if axis == 0:
        return _record(a.data.sum(axis=0), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    return _record(a.data.sum(axis=1), (a,), lambda g: (np.broadcast_to(g[:, None], a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    size = a.data.size
    return _record(a.data.mean(), (a,), lambda g: (np.broadcast_to(g / size, a.shape).copy(),))
