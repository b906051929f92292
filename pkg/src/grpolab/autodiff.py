"""Tape-based reverse-mode automatic differentiation over dense rank-<=3 float64 tensors.

Every primitive records onto the thread-local active tape when some input
requires gradients. Values are checked finite after each forward op, so
numerical blow-ups surface at the op that produced them instead of at the
loss. Broadcasting is deliberately restricted to bias-style trailing-axis
adds and scalars.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "NondeterministicFunctionError",
    "tensor",
    "add",
    "mul",
    "scale",
    "add_const",
    "matmul",
    "transpose_last",
    "reshape",
    "reduce_sum",
    "mean",
    "pow_const",
    "exp",
    "log",
    "relu",
    "softmax_last",
    "log_softmax_last",
    "layer_norm",
    "gather_rows",
    "take_along_last",
    "slice_last",
    "concat_last",
    "minimum",
    "clip_const",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to the op."""


class NonFiniteError(FloatingPointError):
    """An op produced a non-finite value; message names the op."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape, non-scalar loss, etc."""


class NondeterministicFunctionError(RuntimeError):
    """Two forward passes of a supposedly deterministic function disagreed."""


_uid_counter = itertools.count()
_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient requirement.

    Rank must be <= 3. Tensors are value-immutable from the graph's point of
    view: ops allocate fresh outputs, and only the optimizer mutates leaf
    ``data`` in place between steps.
    """

    __slots__ = ("data", "requires_grad", "name", "uid")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds 3 (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.uid = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Thin operator sugar over the primitives below.
    def __add__(self, other):
        return add_const(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, -other)
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, pow_const(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class Tape:
    """Ordered record of primitive ops, replayed once in reverse by backward().

    Usage::

        with Tape() as tape:
            loss = build_loss(params)
        grads = tape.backward(loss, params)

    The tape is consumed by backward; reusing it raises TapeError.
    """

    def __init__(self):
        # Each record: (input tensors, output tensor, grad_fn mapping the
        # output cotangent to per-input cotangents, aligned with inputs).
        self._records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, inputs: tuple[Tensor, ...], output: Tensor, grad_fn: Callable) -> None:
        self._records.append((inputs, output, grad_fn))

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every requires_grad leaf.

        Returns a map uid -> gradient array. Leaves passed via ``params`` that
        never appeared on the tape get exact-zero gradients. The tape is
        cleared afterwards and cannot be replayed.
        """
        if self._consumed:
            raise TapeError("backward called on a consumed tape")
        if loss.data.shape != ():
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        if not self._records:
            raise TapeError("backward on an empty tape")

        grads: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=np.float64)}
        for inputs, output, grad_fn in reversed(self._records):
            g_out = grads.pop(output.uid, None)
            if g_out is None:
                continue  # dead branch: output never influenced the loss
            in_grads = grad_fn(g_out)
            for inp, g in zip(inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                acc = grads.get(inp.uid)
                if acc is None:
                    grads[inp.uid] = g.copy() if g.base is not None or g is g_out else g
                else:
                    acc += g

        self._records.clear()
        self._consumed = True

        out = {p.uid: grads.get(p.uid, np.zeros(p.shape, dtype=np.float64)) for p in params}
        # Also expose gradients of any other requires_grad tensors touched.
        for uid, g in grads.items():
            out.setdefault(uid, g)
        return out


def _finite_or_raise(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite result in op '{op}'")


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, grad_fn: Callable) -> Tensor:
    _finite_or_raise(op, out_data)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._record(inputs, out, grad_fn)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may also be a trailing-axis bias vector or a scalar."""
    if a.shape == b.shape:
        def grad_fn(g):
            return g, g
    elif b.shape == () or (a.shape and b.shape == (a.shape[-1],)):
        reduce_axes = tuple(range(a.data.ndim)) if b.shape == () else tuple(range(a.data.ndim - 1))

        def grad_fn(g):
            return g, g.sum(axis=reduce_axes).reshape(b.shape)
    else:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
    return _emit("add", (a, b), a.data + b.data, grad_fn)


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("add_const", (a,), a.data + c, lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiply; shapes must match exactly or b must be scalar."""
    if a.shape == b.shape:
        def grad_fn(g):
            return g * b.data, g * a.data
    elif b.shape == ():
        def grad_fn(g):
            return g * b.data, np.asarray((g * a.data).sum())
    else:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not conform")
    return _emit("mul", (a, b), a.data * b.data, grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2Dx2D, 3Dx2D (batched), or 3Dx3D (batched) with matching inner dims."""
    sa, sb = a.shape, b.shape
    ok = (
        (len(sa) == 2 and len(sb) == 2 and sa[1] == sb[0])
        or (len(sa) == 3 and len(sb) == 2 and sa[2] == sb[0])
        or (len(sa) == 3 and len(sb) == 3 and sa[0] == sb[0] and sa[2] == sb[1])
    )
    if not ok:
        raise ShapeError(f"matmul: shapes {sa} and {sb} do not conform")

    def grad_fn(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = g @ bt
        gb = at @ g
        if len(sb) == 2 and len(sa) == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return _emit("matmul", (a, b), a.data @ b.data, grad_fn)


def transpose_last(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"transpose_last needs rank >= 2, got shape {a.shape}")
    return _emit("transpose_last", (a,), np.swapaxes(a.data, -1, -2),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    if out.ndim > 3:
        raise ShapeError(f"reshape to rank {out.ndim} exceeds 3")
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(np.float64, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(np.float64, copy=True),)

    return _emit("reduce_sum", (a,), np.asarray(out), grad_fn)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    with np.errstate(all="ignore"):
        out = a.data ** p
    return _emit("pow_const", (a,), out, lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _emit("log", (a,), out, lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def softmax_last(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _emit("softmax_last", (a,), s, grad_fn)


def log_softmax_last(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax_last", (a,), out, grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gs = g * gain.data
        gx = inv * (gs - gs.mean(axis=-1, keepdims=True)
                    - xhat * (gs * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_bias

    return _emit("layer_norm", (x, gain, bias), out, grad_fn)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup (embedding): table (V, D), integer ids of any rank <= 2."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows table must be rank 2, got {table.shape}")
    out = table.data[ids]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("gather_rows", (table,), out, grad_fn)


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position: a (..., V), idx (...,)."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"take_along_last: index shape {idx.shape} vs value shape {a.shape}")
    expanded = np.expand_dims(idx, -1)
    out = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, expanded, np.expand_dims(g, -1), axis=-1)
        return (ga,)

    return _emit("take_along_last", (a,), out, grad_fn)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[..., start:stop]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        return (ga,)

    return _emit("slice_last", (a,), out.copy(), grad_fn)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    widths = [p.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def grad_fn(g):
        splits = np.split(g, np.cumsum(widths)[:-1], axis=-1)
        return tuple(splits)

    return _emit("concat_last", parts, out, grad_fn)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min. On ties the gradient routes to the first argument."""
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} do not conform")
    take_a = a.data <= b.data

    def grad_fn(g):
        return g * take_a, g * ~take_a

    return _emit("minimum", (a, b), np.where(take_a, a.data, b.data), grad_fn)


def clip_const(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input lies inside the interval."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip_const", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients of f() and central differences.

    f must be a deterministic closure over ``params`` returning a scalar
    Tensor; it is re-evaluated (without a tape) at perturbed parameter values.
    Relative error per coordinate is |analytic - fd| / (|analytic| + 1e-8).
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    with Tape() as tape:
        loss = f()
    base_value = loss.item()
    probe = f()  # no tape active here: values only
    if probe.item() != base_value:
        raise NondeterministicFunctionError(
            f"f() returned {base_value!r} then {probe.item()!r}"
        )
    grads = tape.backward(loss, params)

    worst = 0.0
    for p in params:
        analytic = grads[p.uid]
        flat = p.data.reshape(-1)
        g_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(g_flat[i] - fd) / (abs(g_flat[i]) + 1e-8)
            worst = max(worst, rel)
    return worst
