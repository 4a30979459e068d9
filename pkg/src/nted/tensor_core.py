"""Dense numeric arrays with shape-checked products and axis-wise softmax.

Tensors are plain ``numpy.ndarray`` values in row-major layout. The functions
here add the contracts the rest of the package relies on: explicit shape
errors, finite outputs, max-subtracted softmax and an optional cost counter
that records multiply-adds and element allocations.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
import os
from dataclasses import dataclass, field

import numpy as np

F64 = np.float64
F32 = np.float32

_DTYPES = {"f64": F64, "f32": F32}


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        listed = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class NonFiniteError(FloatingPointError):
    pass


def dtype_for(precision: str):
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected f32 or f64") from None


def verification_mode() -> bool:
    """True when NTED_VERIFY=1: f64 arithmetic and a single BLAS thread."""
    return os.environ.get("NTED_VERIFY", "0") == "1"


def limit_threads(n: int):
    """Pin BLAS to ``n`` threads. Returns the threadpoolctl controller."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not _all_true(np.isfinite(x), axis=None):
        raise NonFiniteError(f"{op}: non-finite values in result")
    return x


_all_true = np.logical_and.reduce


# --------------------------------------------------------------------------
# cost instrumentation


@dataclass
class CostCounter:
    multiply_adds: int = 0
    element_allocations: int = 0
    events: list[tuple[str, int, int]] = field(default_factory=list)

    def record(self, op: str, macs: int, allocs: int) -> None:
        self.multiply_adds += macs
        self.element_allocations += allocs
        self.events.append((op, macs, allocs))


_counter: contextvars.ContextVar[CostCounter | None] = contextvars.ContextVar(
    "nted_cost_counter", default=None
)


@contextlib.contextmanager
def counting():
    """Collect multiply-adds and allocations of every op run inside the block."""
    counter = CostCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def _record(op: str, macs: int, allocs: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.record(op, macs, allocs)


def allocate(shape, dtype=F64) -> np.ndarray:
    """Zero-filled buffer, counted as an allocation."""
    out = np.zeros(shape, dtype=dtype)
    _record("allocate", 0, out.size)
    return out


# --------------------------------------------------------------------------
# products


def matmul(a: np.ndarray, b: np.ndarray, check: bool = True) -> np.ndarray:
    """Matrix product of ``a`` (..., m, n) and ``b`` (..., n, p).

    Leading batch axes must agree, or one operand must be a plain matrix that
    is shared across the batch of the other. ``check=False`` skips the
    finiteness scan for callers that validate the result themselves.
    """
    if type(a) is not np.ndarray:
        a = np.asarray(a)
    if type(b) is not np.ndarray:
        b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    out = np.matmul(a, b)
    batch = math.prod(out.shape[:-2])
    m, n, p = a.shape[-2], a.shape[-1], b.shape[-1]
    _record("matmul", batch * m * n * p, out.size)
    return check_finite(out, "matmul") if check else out


SOFTMAX_BLOCK = 1 << 17  # elements per row block; keeps each pass inside L2


def _softmax_into(x: np.ndarray, out: np.ndarray, axis: int) -> None:
    # ufunc reductions directly; the ndarray method wrappers cost more than small inputs
    np.subtract(x, np.maximum.reduce(x, axis=axis, keepdims=True), out=out)
    np.exp(out, out=out)
    np.divide(out, np.add.reduce(out, axis=axis, keepdims=True), out=out)


def softmax_axis(x: np.ndarray, axis: int, out: np.ndarray | None = None) -> np.ndarray:
    """Softmax along ``axis`` with max subtraction.

    Passing ``out`` (which may be ``x`` itself) writes the result in place and
    records no allocation. Large last-axis inputs are processed in row blocks
    so every pass stays cache resident.
    """
    x = np.asarray(x)
    if out is None:
        out = np.empty_like(x)
        _record("softmax", 0, out.size)
    elif out.shape != x.shape:
        raise DimensionError("softmax_axis", x.shape, out.shape)
    n = x.shape[axis]
    last = axis in (-1, x.ndim - 1)
    if not last or x.size <= SOFTMAX_BLOCK or not (x.flags.c_contiguous and out.flags.c_contiguous):
        check_finite(x, "softmax_axis")
        _softmax_into(x, out, axis)
        return out
    rows_x, rows_out = x.reshape(-1, n), out.reshape(-1, n)
    step = max(1, SOFTMAX_BLOCK // n)
    for i in range(0, rows_x.shape[0], step):
        block = rows_x[i:i + step]
        check_finite(block, "softmax_axis")
        _softmax_into(block, rows_out[i:i + step], -1)
    return out


# --------------------------------------------------------------------------
# elementwise


def _broadcast_ok(a: np.ndarray, b: np.ndarray) -> bool:
    # scalar, identical shape, or a vector spanning exactly one axis of the other
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return True
    small, big = (a, b) if a.size <= b.size else (b, a)
    if small.ndim > big.ndim:
        return False
    padded = (1,) * (big.ndim - small.ndim) + small.shape
    non_unit = [i for i, s in enumerate(padded) if s != 1]
    if len(non_unit) > 1:
        return False
    return all(s == 1 or s == big.shape[i] for i, s in enumerate(padded))


def _binary(op: str, fn, a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if not _broadcast_ok(a, b):
        raise DimensionError(op, a.shape, b.shape)
    return check_finite(fn(a, b), op)


def add(a, b) -> np.ndarray:
    return _binary("add", np.add, a, b)


def sub(a, b) -> np.ndarray:
    return _binary("sub", np.subtract, a, b)


def mul(a, b) -> np.ndarray:
    return _binary("mul", np.multiply, a, b)


def scale(a, s) -> np.ndarray:
    """Broadcast-scale: multiply by a scalar or a vector along one axis."""
    return _binary("scale", np.multiply, a, s)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x)
    # split by sign so neither branch overflows; sigmoid(0) is exactly 0.5
    out = np.empty_like(x, dtype=np.result_type(x, F32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return check_finite(out, "sigmoid")


def absolute(x) -> np.ndarray:
    return check_finite(np.abs(np.asarray(x)), "abs")


def mean(x, axis=None) -> np.ndarray:
    return check_finite(np.mean(np.asarray(x), axis=axis), "mean")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "broadcast-scale": scale,
    "sigmoid": sigmoid,
    "abs": absolute,
    "mean": mean,
}


def elementwise(op: str, *args, **kwargs) -> np.ndarray:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)
