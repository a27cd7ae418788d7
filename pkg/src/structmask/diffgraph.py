"""Minimal define-by-run reverse-mode differentiation on numpy arrays.

Only the operations needed to backpropagate through the unrolled solvers
and the straight-through mask sampler are provided. A :class:`Tape`
records every operation whose inputs require gradients; calling
:meth:`Tape.backward` walks the records once in reverse order.

Batched signals are stored column-wise: a batch of ``B`` vectors of length
``n`` is an ``(n, B)`` array, so ``matmul(Phi, X)`` measures the whole batch.

Example::

    tape = Tape()
    A = tape.variable(np.eye(2))
    loss = sq_sum(matmul(A, constant([3.0, 4.0])))
    grads = tape.backward(loss)
    grads[A]   # 2 * A x x^T
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, ParameterError, StructureError

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable float64 array, optionally tracked by a tape."""

    __slots__ = ("value", "tape", "id")

    def __init__(self, value, tape: "Tape | None" = None, id: int = -1):
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        self.value = arr
        self.tape = tape
        self.id = id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f", id={self.id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.ndim > 0:
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass
class TapeEntry:
    kind: str
    input_ids: tuple[int, ...]
    output_id: int
    vjp: VJP


@dataclass
class Tape:
    """Ordered record of operations for one forward pass."""

    entries: list[TapeEntry] = field(default_factory=list)
    _next_id: int = 0

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def variable(self, value) -> Tensor:
        """Create a leaf tensor whose adjoint will be accumulated."""
        return Tensor(value, self, self._new_id())

    def record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
        ids = tuple(t.id if t.tape is self else -1 for t in inputs)
        out = Tensor(value, self, self._new_id())
        self.entries.append(TapeEntry(kind, ids, out.id, vjp))
        return out

    def backward(self, output: Tensor, seed=None) -> "Gradients":
        """Propagate adjoints from ``output`` back to every recorded node.

        ``seed`` defaults to ones, i.e. the gradient of ``sum(output)``.
        """
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        adj: dict[int, np.ndarray] = {}
        adj[output.id] = np.ones(output.shape) if seed is None else np.array(seed, dtype=np.float64)
        for entry in reversed(self.entries):
            g = adj.get(entry.output_id)
            if g is None:
                continue
            for i, gi in zip(entry.input_ids, entry.vjp(g)):
                if i < 0 or gi is None:
                    continue
                if i in adj:
                    adj[i] = adj[i] + gi
                else:
                    adj[i] = np.asarray(gi, dtype=np.float64)
        return Gradients(adj)


class Gradients:
    """Adjoints keyed by tensor; unreached tensors report zeros."""

    def __init__(self, adjoints: dict[int, np.ndarray]):
        self._adj = adjoints

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._adj.get(t.id) if t.tape is not None else None
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.tape is not None and t.id in self._adj


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) and value.tape is None else Tensor(_raw(value))


def detach(t: Tensor) -> Tensor:
    return Tensor(t.value)


def _raw(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(kind: str, inputs: Sequence, value: np.ndarray, vjp: VJP) -> Tensor:
    """Create the output of a user-defined op.

    ``vjp(g)`` must return one adjoint (or ``None``) per input. The value is
    checked for NaN/Inf before anything is recorded.
    """
    inputs = [_as_tensor(x) for x in inputs]
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind}: non-finite output")
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{kind}: inputs belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    return tape.record(kind, inputs, value, vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    A, B = _raw(a), _raw(b)
    if A.ndim != 2 or B.ndim not in (1, 2) or A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {A.shape} by {B.shape}")

    def vjp(g):
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return custom_op("matmul", (a, b), A @ B, vjp)


def transpose(a) -> Tensor:
    A = _raw(a)
    if A.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return custom_op("transpose", (a,), A.T, lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    A = _raw(a)
    return custom_op("reshape", (a,), A.reshape(shape), lambda g: (g.reshape(A.shape),))


def take(a, index) -> Tensor:
    """Gather entries of the flattened ``a`` at integer ``index`` (any shape)."""
    A = _raw(a)
    idx = np.asarray(index, dtype=np.intp)
    size = A.size

    def vjp(g):
        flat = np.bincount(idx.ravel(), weights=g.ravel(), minlength=size)
        return (flat.reshape(A.shape),)

    return custom_op("take", (a,), A.ravel()[idx], vjp)


def concat(parts: Sequence) -> Tensor:
    """Concatenate 1-D tensors."""
    raws = [_raw(p) for p in parts]
    if any(r.ndim != 1 for r in raws):
        raise DimensionError("concat expects 1-D tensors")
    bounds = np.cumsum([0] + [r.size for r in raws])

    def vjp(g):
        return [g[bounds[k]:bounds[k + 1]] for k in range(len(raws))]

    return custom_op("concat", parts, np.concatenate(raws), vjp)


# ---------------------------------------------------------------- elementwise


def _same_shape(kind, A, B):
    if A.shape != B.shape:
        raise DimensionError(f"{kind}: shape mismatch {A.shape} vs {B.shape}")


def add(a, b) -> Tensor:
    A, B = _raw(a), _raw(b)
    _same_shape("add", A, B)
    return custom_op("add", (a, b), A + B, lambda g: (g, g))


def sub(a, b) -> Tensor:
    A, B = _raw(a), _raw(b)
    _same_shape("sub", A, B)
    return custom_op("sub", (a, b), A - B, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    A, B = _raw(a), _raw(b)
    _same_shape("mul", A, B)
    return custom_op("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scalar_mul(a, s) -> Tensor:
    """Multiply by a scalar; ``s`` may be a float or a 0-d tensor."""
    A = _raw(a)
    S = _raw(s)
    if S.ndim != 0:
        raise DimensionError("scalar_mul expects a scalar factor")
    if isinstance(s, Tensor):
        return custom_op("scalar_mul", (a, s), A * S, lambda g: (g * S, np.sum(g * A)))
    return custom_op("scalar_mul", (a,), A * S, lambda g: (g * S,))


def exp(a) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(_raw(a))
    return custom_op("exp", (a,), out, lambda g: (g * out,))


def abs_sum(a) -> Tensor:
    A = _raw(a)
    return custom_op("abs_sum", (a,), np.abs(A).sum(), lambda g: (g * np.sign(A),))


def sq_sum(a) -> Tensor:
    A = _raw(a)
    return custom_op("sq_sum", (a,), np.square(A).sum(), lambda g: (2.0 * g * A,))


def relu_nonneg(a) -> Tensor:
    """Projection onto the nonnegative orthant."""
    A = _raw(a)
    keep = A > 0
    return custom_op("relu_nonneg", (a,), np.where(keep, A, 0.0), lambda g: (g * keep,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes strictly inside the interval only."""
    A = _raw(a)
    inside = (A > lo) & (A < hi)
    return custom_op("clip", (a,), np.clip(A, lo, hi), lambda g: (g * inside,))


# ---------------------------------------------------------------- thresholding


def soft_threshold(v, lam) -> Tensor:
    """``sign(v) * max(|v| - lam, 0)``; ``lam`` may be a 0-d tensor."""
    V = _raw(v)
    L = _raw(lam)
    if L.ndim != 0:
        raise DimensionError("soft_threshold expects a scalar threshold")
    if L < 0:
        raise ParameterError(f"soft_threshold: negative threshold {float(L)}")
    active = np.abs(V) > L
    sgn = np.sign(V)
    out = np.where(active, V - sgn * L, 0.0)
    if isinstance(lam, Tensor):
        return custom_op("soft_threshold", (v, lam), out,
                         lambda g: (g * active, -np.sum(g * sgn * active)))
    return custom_op("soft_threshold", (v,), out, lambda g: (g * active,))


def topk_indices(values: np.ndarray, k, axis: int = 0) -> np.ndarray:
    """Indices of the ``k`` largest entries along ``axis``; ties go to the lower index."""
    order = np.argsort(-values, axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis)


def topk_keep(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries of each row (last axis).

    Equivalent to a stable descending sort: among entries equal to the
    ``k``-th largest value, the lowest indices are kept.
    """
    n = values.shape[-1]
    if k >= n:
        return np.ones(values.shape, dtype=bool)
    kth = -np.partition(-values, k - 1, axis=-1)[..., k - 1:k]
    above = values > kth
    tied = values == kth
    room = k - above.sum(axis=-1, keepdims=True)
    return above | (tied & (np.cumsum(tied, axis=-1) <= room))


def hard_threshold(v, s: int) -> Tensor:
    """Keep the ``s`` largest magnitudes of each column (or of a 1-D vector)."""
    V = _raw(v)
    n = V.shape[0]
    if not 1 <= s <= n:
        raise ParameterError(f"hard_threshold: s={s} outside [1, {n}]")
    keep = topk_keep(np.abs(V).T, s).T
    return custom_op("hard_threshold", (v,), np.where(keep, V, 0.0), lambda g: (g * keep,))


def softmax_value(V: np.ndarray, tau: float, axis: int = -1) -> np.ndarray:
    z = V / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(p: np.ndarray, g: np.ndarray, tau: float, axis: int = -1) -> np.ndarray:
    return p * (g - np.sum(g * p, axis=axis, keepdims=True)) / tau


def softmax_tau(v, tau: float, axis: int = -1) -> Tensor:
    """Temperature softmax along ``axis`` (max-subtracted for stability)."""
    if not tau > 0:
        raise ParameterError(f"softmax_tau: temperature must be positive, got {tau}")
    p = softmax_value(_raw(v), tau, axis)
    return custom_op("softmax_tau", (v,), p, lambda g: (softmax_vjp(p, g, tau, axis),))


# ---------------------------------------------------------------- median


def normalize_groups(groups) -> "np.ndarray | list[np.ndarray]":
    """Sort each group's indices; return a 2-D array when all groups share a size."""
    gs = [np.sort(np.asarray(g, dtype=np.intp).ravel()) for g in groups]
    if any(g.size == 0 for g in gs):
        raise StructureError("median_select: empty group")
    if len({g.size for g in gs}) == 1:
        return np.stack(gs)
    return gs


def median_select(y, groups) -> Tensor:
    """Coordinate ``j`` is the (lower) median of ``y`` over the rows in group ``j``.

    ``y`` is ``(m,)`` or ``(m, B)``. The adjoint of each output flows to the
    single selected row; among equal values the lowest row index wins.
    """
    Y = _raw(y)
    grp = groups if isinstance(groups, np.ndarray) and groups.ndim == 2 else normalize_groups(groups)
    m = Y.shape[0]
    if isinstance(grp, np.ndarray):
        if grp.shape[1] == 0:
            raise StructureError("median_select: empty group")
        sel = _median_rows(Y, grp)
    else:
        sel = np.stack([_median_rows(Y, g[None, :])[0] for g in grp])
    B = 1 if Y.ndim == 1 else Y.shape[1]
    cols = np.arange(B)
    sel2 = sel.reshape(sel.shape[0], B)
    out = Y.reshape(m, B)[sel2, cols].reshape(sel.shape)
    flat = (sel2 * B + cols).ravel()

    def vjp(g):
        return (np.bincount(flat, weights=np.ravel(g), minlength=m * B).reshape(Y.shape),)

    return custom_op("median_select", (y,), out, vjp)


def _median_rows(Y: np.ndarray, grp: np.ndarray) -> np.ndarray:
    """Row index selected as the lower median for each group (rows of ``grp``)."""
    d = grp.shape[1]
    k = (d - 1) // 2
    slices = Y[grp.T]  # (d, groups[, B]); each slice contiguous
    if d <= 16:
        # odd-even transposition network on whole slices
        srt = list(slices)
        for r in range(d):
            for i in range(r % 2, d - 1, 2):
                lo = np.minimum(srt[i], srt[i + 1])
                srt[i + 1] = np.maximum(srt[i], srt[i + 1])
                srt[i] = lo
        med = srt[k]
    else:
        med = np.partition(slices, k, axis=0)[k]
    # groups are sorted, so the first slice equal to the median is the lowest index
    pick = np.full(med.shape, d - 1, dtype=np.int64)
    for j in range(d - 2, -1, -1):
        pick[slices[j] == med] = j
    cols = np.arange(grp.shape[0]).reshape((-1,) + (1,) * (Y.ndim - 1))
    return grp[cols, pick]
