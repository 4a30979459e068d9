"""Neural texture extraction and distribution as a factored attention kernel.

Every function accepts either plain arrays or :class:`~nted.autodiff.Var`
values, so the same code runs the instrumented forward path and the
differentiable training path. Feature values are laid out as
(..., positions, channels); correlation matrices as (..., k, positions).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from . import tensor_core as tc


@dataclass
class FeatureMap:
    h: int
    w: int
    values: np.ndarray | ad.Var  # (..., h*w, c)

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError(f"spatial extents must be positive, got {self.h}x{self.w}")
        if self.values.shape[-2] != self.h * self.w:
            raise tc.DimensionError("FeatureMap", (self.h, self.w), tuple(self.values.shape))

    @property
    def c(self) -> int:
        return self.values.shape[-1]


@dataclass
class Projection:
    """Position-wise linear map ``x @ weight.T + bias`` producing the values."""

    weight: np.ndarray | ad.Var  # (c, c)
    bias: np.ndarray | ad.Var | None = None

    def __post_init__(self):
        shape = self.weight.shape
        if len(shape) != 2 or shape[0] != shape[1]:
            raise tc.DimensionError("Projection", tuple(shape))

    @classmethod
    def identity(cls, c: int, dtype=tc.F64) -> "Projection":
        return cls(np.eye(c, dtype=dtype))

    def __call__(self, x):
        out = _mm(x, _t(self.weight))
        if self.bias is not None:
            out = _add(out, self.bias)
        return out


# --------------------------------------------------------------------------
# dispatch between the instrumented array path and the autodiff path


def _mm(a, b, check=True):
    if isinstance(a, ad.Var) or isinstance(b, ad.Var):
        return ad.matmul(a, b)
    return tc.matmul(a, b, check)


def _t(x):
    return ad.transpose(x) if isinstance(x, ad.Var) else x.swapaxes(-1, -2)


def _add(a, b):
    if isinstance(a, ad.Var) or isinstance(b, ad.Var):
        return ad.add(a, b)
    # bias add happens in place on a freshly allocated product
    a += b
    return a


def _softmax(x, axis):
    if isinstance(x, ad.Var):
        return ad.softmax(x, axis)
    return tc.softmax_axis(x, axis, out=x)


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, ad.Var) else np.asarray(x)


def _check_channels(op, filters, fmap_values):
    if filters.shape[-1] != fmap_values.shape[-1]:
        raise tc.DimensionError(op, tuple(filters.shape), tuple(fmap_values.shape))


# --------------------------------------------------------------------------
# the operation


def extraction_correlation(reference: FeatureMap, filters):
    """Row-stochastic (k, h*w) weights: softmax over positions of W_e F_r^T."""
    _check_channels("extract", filters, reference.values)
    k = filters.shape[0]
    if k > reference.h * reference.w:
        warnings.warn(
            f"k={k} exceeds {reference.h * reference.w} positions; textures will be redundant",
            stacklevel=3,
        )
    # the softmax validates its input, so the product skips its own scan
    logits = _mm(filters, _t(reference.values), check=False)
    return _softmax(logits, -1)


def extract(reference: FeatureMap, filters, proj: Projection):
    """Pool reference features into ``k`` neural textures.

    Returns ``(textures, c_e)`` with ``textures`` shaped (..., k, c) and
    ``c_e`` the row-stochastic extraction weights.
    """
    c_e = extraction_correlation(reference, filters)
    values = proj(reference.values)
    return _mm(c_e, values), c_e


def distribution_correlation(target: FeatureMap, filters):
    """Column-stochastic (k, h*w) weights: softmax over semantics of W_d F_t^T."""
    _check_channels("distribute", filters, target.values)
    logits = _mm(filters, _t(target.values), check=False)
    return _softmax(logits, -2)


def distribute(target: FeatureMap, filters, textures):
    """Spread textures over target positions. Returns ``(F_o, c_d)``."""
    if textures.shape[-2] != filters.shape[0]:
        raise tc.DimensionError("distribute", tuple(filters.shape), tuple(textures.shape))
    c_d = distribution_correlation(target, filters)
    out = _mm(_t(c_d), textures)
    return FeatureMap(target.h, target.w, out), c_d


def nted_warp(values: FeatureMap, c_e, c_d) -> FeatureMap:
    """Apply the implicit deformation ``c_d^T c_e`` to ``values``.

    The product is evaluated right to left so the (h*w)^2 matrix never exists.
    Output extents follow ``c_d``; when they differ from the reference, the
    result is reported as a single row of positions.
    """
    if c_e.shape[-2] != c_d.shape[-2] or c_e.shape[-1] != values.values.shape[-2]:
        raise tc.DimensionError("nted_warp", tuple(values.values.shape), tuple(c_e.shape), tuple(c_d.shape))
    out = _mm(_t(c_d), _mm(c_e, values.values))
    n_out = c_d.shape[-1]
    if n_out == values.h * values.w:
        return FeatureMap(values.h, values.w, out)
    return FeatureMap(1, n_out, out)


def materialize_deformation(c_e, c_d) -> np.ndarray:
    """The dense (positions_t, positions_r) deformation matrix ``c_d^T c_e``."""
    c_e, c_d = _value(c_e), _value(c_d)
    if c_e.shape[-2] != c_d.shape[-2]:
        raise tc.DimensionError("materialize_deformation", c_e.shape, c_d.shape)
    return tc.matmul(np.swapaxes(c_d, -1, -2), c_e)


def vanilla_attention(target: FeatureMap, reference: FeatureMap, proj: Projection) -> FeatureMap:
    """Dense softmax(F_t F_r^T) f(F_r), normalised over reference positions.

    This is the quadratic baseline for cost comparisons, not an oracle for
    :func:`nted_warp`.
    """
    if target.c != reference.c:
        raise tc.DimensionError("vanilla_attention", tuple(target.values.shape), tuple(reference.values.shape))
    values = proj(reference.values)
    scores = _softmax(_mm(target.values, _t(reference.values), check=False), -1)
    return FeatureMap(target.h, target.w, _mm(scores, values))


def region_texture_usage(c_d, mask) -> np.ndarray:
    """Mean of each row of ``c_d`` over the positions where ``mask`` is set."""
    c_d = _value(c_d)
    mask = np.asarray(mask, dtype=c_d.dtype).reshape(-1)
    if mask.shape[0] != c_d.shape[-1]:
        raise tc.DimensionError("region_texture_usage", c_d.shape, mask.shape)
    count = mask.sum()
    if count <= 0:
        raise ValueError("region_texture_usage: empty mask")
    return (c_d @ mask) / count


# --------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class Cost:
    element_allocations: int
    multiply_adds: int


def account_cost(h: int, w: int, c: int, k: int, mechanism: Literal["nted", "vanilla"]) -> Cost:
    """Analytic allocation and multiply-add counts of one forward pass.

    NTED holds two k x hw correlation matrices, the k x c textures, the values
    and the output, and performs four hw*k*c products plus the hw*c^2
    projection. Vanilla attention holds the (hw)^2 score matrix instead and
    performs two c*(hw)^2 products.
    """
    if min(h, w, c, k) < 1:
        raise ValueError("extents must be positive")
    n = h * w
    if mechanism == "nted":
        return Cost(2 * k * n + k * c + 2 * n * c, 4 * n * k * c + n * c * c)
    if mechanism == "vanilla":
        return Cost(n * n + 2 * n * c, 2 * c * n * n + n * c * c)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def run_instrumented(
    mechanism: str,
    target: FeatureMap,
    reference: FeatureMap,
    proj: Projection,
    w_e: np.ndarray | None = None,
    w_d: np.ndarray | None = None,
) -> tuple[FeatureMap, tc.CostCounter]:
    """Run one mechanism on plain arrays and return its output and counters."""
    with tc.counting() as counter:
        if mechanism == "nted":
            textures, _ = extract(reference, w_e, proj)
            out, _ = distribute(target, w_d, textures)
        elif mechanism == "vanilla":
            out = vanilla_attention(target, reference, proj)
        else:
            raise ValueError(f"unknown mechanism {mechanism!r}")
    return out, counter
