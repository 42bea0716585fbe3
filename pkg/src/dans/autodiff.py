"""Reverse-mode automatic differentiation over dense float32 arrays.

The engine is deliberately small: a :class:`Tensor` wraps a C-contiguous
``float32`` ndarray, and every operation executed while a
:class:`ComputationRecord` is active appends one entry (operation kind,
input handles, output handle, backward closure).  :func:`backward` replays
the record in reverse, accumulating ``grad`` on every leaf that asked for
it.  Gradients are added, never overwritten, so parameters shared by
several loss terms pick up the sum; call :meth:`Tensor.zero_grad` (or a
parameter group's helper) before each optimizer step.

Forward evaluation without an active record is plain numpy: nothing is
retained and the output does not require grad.  That is how detached
snapshots are produced.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, ShapeError

LOG_FLOOR = np.float32(1e-12)  # log() clamps here so saturated losses stay finite

_RECORD_STACK: list["ComputationRecord"] = []

# Everything runs in float32 except re-evaluations inside the gradient
# checker, which switch this to float64 so difference quotients are not
# drowned by working-precision rounding.
_EVAL_DTYPE = np.float32


@contextlib.contextmanager
def _checker_precision():
    global _EVAL_DTYPE
    prev = _EVAL_DTYPE
    _EVAL_DTYPE = np.float64
    try:
        yield
    finally:
        _EVAL_DTYPE = prev

# While non-None, relu/log ops append their clamp masks here; the gradient
# checker uses it to detect kink crossings between perturbed evaluations.
_KINK_TRACE: list[np.ndarray] | None = None


class Tensor:
    """A dense float32 array, optionally tracked for differentiation.

    ``data`` and ``grad`` expose the flat row-major storage; ``array`` is
    the shaped view used for arithmetic.  A tensor with
    ``requires_grad=False`` never accumulates gradient.
    """

    __slots__ = ("array", "_grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=_EVAL_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.array: np.ndarray = arr
        self._grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    @property
    def grad(self) -> np.ndarray | None:
        """Flat view of the accumulated gradient, or None."""
        return None if self._grad is None else self._grad.reshape(-1)

    @property
    def grad_array(self) -> np.ndarray | None:
        """Gradient shaped like ``array``, or None."""
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self._grad is None:
            self._grad = np.zeros_like(self.array)
        self._grad += g

    def detach(self) -> "Tensor":
        """Constant copy of the current values, outside any record."""
        return Tensor(self.array.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small arithmetic sugar; the fuller op set lives at module level.
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)


class Entry:
    """One executed operation: kind, inputs, output, backward closure."""

    __slots__ = ("kind", "inputs", "output", "backward_fn", "needs")

    def __init__(self, kind, inputs, output, backward_fn, needs):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.needs = needs


class ComputationRecord:
    """Ordered log of executed operations; execution order is topological.

    Use as a context manager::

        with ComputationRecord() as record:
            loss = ...
        backward(loss, record)
    """

    __slots__ = ("entries", "_produced")

    def __init__(self):
        self.entries: list[Entry] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "ComputationRecord":
        _RECORD_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _RECORD_STACK.pop()
        assert popped is self, "computation records must nest"

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def _append(self, entry: Entry) -> None:
        self.entries.append(entry)
        self._produced.add(id(entry.output))


def active_record() -> ComputationRecord | None:
    return _RECORD_STACK[-1] if _RECORD_STACK else None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, inputs: tuple[Tensor, ...], out_array: np.ndarray,
            backward_fn: Callable) -> Tensor:
    """Wrap ``out_array`` and log the op if anything on it needs gradient."""
    record = active_record()
    if record is None:
        return Tensor(out_array)
    needs = tuple(t.requires_grad or record.produced(t) for t in inputs)
    if not any(needs):
        return Tensor(out_array)
    out = Tensor(out_array, requires_grad=True)
    record._append(Entry(kind, inputs, out, backward_fn, needs))
    return out


def backward(root: Tensor, record: ComputationRecord) -> None:
    """Accumulate d(root)/d(leaf) onto every grad-requiring leaf.

    ``root`` must be a scalar produced within ``record``.  Each entry is
    visited exactly once, in reverse execution order; calling backward a
    second time from the same root adds the same gradients again.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.array)}
    for entry in reversed(record.entries):
        g = flowing.pop(id(entry.output), None)
        if g is None:
            continue
        grads = entry.backward_fn(g, entry.needs)
        for t, dt, needed in zip(entry.inputs, grads, entry.needs):
            if dt is None or not needed:
                continue
            if record.produced(t):
                prev = flowing.get(id(t))
                if prev is None:
                    # Stored gradients are mutated by later accumulation, so
                    # never keep an alias of the upstream gradient or a view.
                    if dt is g or dt.base is not None:
                        dt = dt.copy()
                    flowing[id(t)] = dt
                else:
                    prev += dt
            else:
                t.accumulate_grad(dt)


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g, dtype=np.float32)


def scatter_add_into(dest: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    """dest[idx[k]] += src[k] with duplicate indices summed.

    Sort + reduceat; much faster than np.add.at for the row counts seen in
    training batches.
    """
    if len(idx) == 0:
        return
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    sorted_src = src[order]
    boundaries = np.flatnonzero(np.diff(sorted_idx)) + 1
    starts = np.concatenate(([0], boundaries))
    sums = np.add.reduceat(sorted_src, starts, axis=0)
    dest[sorted_idx[starts]] += sums


def _trace_kinks(mask: np.ndarray) -> None:
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(mask)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.array.ndim != 2 or b.array.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.array @ b.array

    def bwd(g, needs):
        da = g @ b.array.T if needs[0] else None
        db = a.array.T @ g if needs[1] else None
        return da, db

    return _record("matmul", (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.array + b.array
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def bwd(g, needs):
        da = _unbroadcast(g, a.shape) if needs[0] else None
        db = _unbroadcast(g, b.shape) if needs[1] else None
        return da, db

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.array - b.array
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None

    def bwd(g, needs):
        da = _unbroadcast(g, a.shape) if needs[0] else None
        db = _unbroadcast(-g, b.shape) if needs[1] else None
        return da, db

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.array * b.array
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def bwd(g, needs):
        da = _unbroadcast(g * b.array, a.shape) if needs[0] else None
        db = _unbroadcast(g * a.array, b.shape) if needs[1] else None
        return da, db

    return _record("mul", (a, b), out, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = np.float32(c)
    out = a.array * c

    def bwd(g, needs):
        return (g * c,)

    return _record("scale", (a,), out, bwd)


def add_const(a: Tensor, c: float) -> Tensor:
    out = a.array + np.float32(c)

    def bwd(g, needs):
        return (g,)

    return _record("add_const", (a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.array > 0
    _trace_kinks(mask)
    out = np.where(mask, a.array, np.float32(0))

    def bwd(g, needs):
        return (g * mask,)

    return _record("relu", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.array)

    def bwd(g, needs):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, bwd)


def log(a: Tensor) -> Tensor:
    """Natural log of max(x, LOG_FLOOR); the clamp keeps losses finite."""
    mask = a.array > LOG_FLOOR
    _trace_kinks(mask)
    clamped = np.maximum(a.array, LOG_FLOOR)
    out = np.log(clamped)

    def bwd(g, needs):
        return (g * mask / clamped,)

    return _record("log", (a,), out, bwd)


def cos(a: Tensor) -> Tensor:
    out = np.cos(a.array)

    def bwd(g, needs):
        return (-np.sin(a.array) * g,)

    return _record("cos", (a,), out, bwd)


def sin(a: Tensor) -> Tensor:
    out = np.sin(a.array)

    def bwd(g, needs):
        return (np.cos(a.array) * g,)

    return _record("sin", (a,), out, bwd)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows a[idx]; backward scatter-adds into the source rows."""
    idx = np.asarray(idx)
    if a.array.ndim < 1:
        raise ShapeError("gather_rows", a.shape, idx.shape)
    out = a.array[idx]

    def bwd(g, needs):
        da = np.zeros_like(a.array)
        scatter_add_into(da, idx.reshape(-1), g.reshape(-1, *a.shape[1:]))
        return (da,)

    return _record("gather_rows", (a,), out, bwd)


def scatter_add_rows(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """out = base with rows[k] added at out[idx[k]] (duplicates summed)."""
    idx = np.asarray(idx)
    if rows.shape[1:] != base.shape[1:] or len(idx) != rows.shape[0]:
        raise ShapeError("scatter_add_rows", base.shape, rows.shape)
    out = base.array.copy()
    scatter_add_into(out, idx, rows.array)

    def bwd(g, needs):
        db = g if needs[0] else None
        dr = g[idx] if needs[1] else None
        return db, dr

    return _record("scatter_add_rows", (base, rows), out, bwd)


def total_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.array.sum(dtype=np.float64), dtype=_EVAL_DTYPE)

    def bwd(g, needs):
        return (np.broadcast_to(g, a.shape).astype(np.float32),)

    return _record("sum", (a,), out, bwd)


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.array.sum(dtype=np.float64) / n, dtype=_EVAL_DTYPE)

    def bwd(g, needs):
        return (np.broadcast_to(g / n, a.shape).astype(np.float32),)

    return _record("mean", (a,), out, bwd)


def sum_squares(a: Tensor) -> Tensor:
    """Squared L2 norm of all elements."""
    out = np.asarray(np.vdot(a.array, a.array), dtype=_EVAL_DTYPE)

    def bwd(g, needs):
        return (2.0 * g * a.array,)

    return _record("sum_squares", (a,), out, bwd)


def row_sum(a: Tensor) -> Tensor:
    """Sum over the last axis, kept as a trailing axis of size 1."""
    out = a.array.sum(axis=-1, keepdims=True)

    def bwd(g, needs):
        return (np.broadcast_to(g, a.shape).astype(np.float32),)

    return _record("row_sum", (a,), out, bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    try:
        out = np.concatenate([p.array for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[p.shape for p in parts]) from None
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, needs):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _record("concat", tuple(parts), out, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", a.shape, (axis, start, length))
    index = [slice(None)] * a.array.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(a.array[index])

    def bwd(g, needs):
        da = np.zeros_like(a.array)
        da[index] = g
        return (da,)

    return _record("narrow", (a,), out, bwd)


def custom_op(kind: str, inputs: Sequence[Tensor], out_array: np.ndarray,
              backward_fn: Callable) -> Tensor:
    """Extension hook for fused operations defined outside this module.

    ``backward_fn(g, needs)`` must return one gradient (or None) per input.
    """
    return _record(kind, tuple(inputs), out_array, backward_fn)


# ---------------------------------------------------------------------------
# finite-difference checking


class GradientCheckReport:
    """Per-coordinate comparison of analytic vs central-difference gradients."""

    def __init__(self):
        self.failures: list[tuple[int, int, float, float, float]] = []
        self.max_rel_error = 0.0
        self.n_checked = 0
        self.n_skipped_kinks = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def __repr__(self):
        return (f"GradientCheckReport(ok={self.ok}, max_rel_error={self.max_rel_error:.3e}, "
                f"checked={self.n_checked}, skipped_kinks={self.n_skipped_kinks}, "
                f"failures={len(self.failures)})")


def _rel_error(a: float, f: float) -> float:
    return abs(a - f) / (abs(a) + abs(f) + 1e-8)


def gradient_check(f: Callable[..., Tensor],
                   points: Tensor | Sequence[Tensor],
                   tolerance: float = 1e-3,
                   h: float = 1e-3) -> GradientCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` against central
    differences at the given point tensor(s).

    ``f`` is called with no arguments and must read the points by closure,
    so the same tensors can be reused across evaluations.  Differencing is
    done in float64 with the effective step measured after float32
    rounding.  Coordinates whose perturbed evaluations land on opposite
    sides of a relu kink (or the log clamp) are skipped and counted.
    """
    global _KINK_TRACE
    if tolerance <= 0:
        raise ContractError("tolerance must be positive")
    if isinstance(points, Tensor):
        points = [points]

    saved_flags = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
        p.zero_grad()
    with ComputationRecord() as record:
        out = f()
    if out.size != 1:
        raise ContractError("gradient_check target must be scalar-valued")
    backward(out, record)
    analytic = [np.zeros(p.size, dtype=np.float64) if p.grad is None
                else p.grad.astype(np.float64).copy() for p in points]

    def eval_traced() -> tuple[float, list[np.ndarray]]:
        global _KINK_TRACE
        _KINK_TRACE = []
        saved = [p.array for p in points]
        try:
            with _checker_precision():
                for p in points:
                    p.array = p.array.astype(np.float64)
                value = float(np.float64(f().array.reshape(())))
            masks = _KINK_TRACE
        finally:
            _KINK_TRACE = None
            for p, arr in zip(points, saved):
                p.array = arr
        return value, masks

    report = GradientCheckReport()
    for pi, p in enumerate(points):
        flat = p.data
        for ci in range(p.size):
            orig = np.float64(flat[ci])
            hi = np.float32(orig + h)
            lo = np.float32(orig - h)
            flat[ci] = hi
            f_hi, masks_hi = eval_traced()
            flat[ci] = lo
            f_lo, masks_lo = eval_traced()
            flat[ci] = np.float32(orig)
            crossed = len(masks_hi) != len(masks_lo) or any(
                m_hi.shape != m_lo.shape or not np.array_equal(m_hi, m_lo)
                for m_hi, m_lo in zip(masks_hi, masks_lo))
            if crossed:
                report.n_skipped_kinks += 1
                continue
            h_eff = (np.float64(hi) - np.float64(lo)) / 2.0
            fd = (f_hi - f_lo) / (2.0 * h_eff)
            rel = _rel_error(analytic[pi][ci], fd)
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tolerance:
                report.failures.append((pi, ci, analytic[pi][ci], fd, rel))
    for p, flag in zip(points, saved_flags):
        p.requires_grad = flag
    return report
