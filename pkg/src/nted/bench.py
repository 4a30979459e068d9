"""Wall-time and instrumented-cost comparison of NTED against dense attention."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .kernel import FeatureMap, Projection, account_cost, run_instrumented

VANILLA_GUARD = 16384


class MemoryGuardError(RuntimeError):
    pass


@dataclass
class BenchRow:
    hw: int
    h: int
    w: int
    c: int
    k: int
    nted_time: float
    vanilla_time: float
    nted_macs: int
    vanilla_macs: int
    nted_allocs: int
    vanilla_allocs: int
    nted_macs_analytic: int
    vanilla_macs_analytic: int
    nted_allocs_analytic: int
    vanilla_allocs_analytic: int

    @property
    def counts_match(self) -> bool:
        return (
            self.nted_macs == self.nted_macs_analytic
            and self.vanilla_macs == self.vanilla_macs_analytic
            and self.nted_allocs == self.nted_allocs_analytic
            and self.vanilla_allocs == self.vanilla_allocs_analytic
        )


def _side(hw: int) -> tuple[int, int]:
    h = int(math.isqrt(hw))
    while hw % h:
        h -= 1
    return h, hw // h


def make_instance(hw: int, c: int, k: int, rng: np.random.Generator, dtype=tc.F32):
    h, w = _side(hw)
    scale = 1.0 / math.sqrt(c)

    def rnd(*shape, s=1.0):
        return (rng.standard_normal(shape) * s).astype(dtype)

    target = FeatureMap(h, w, rnd(hw, c))
    reference = FeatureMap(h, w, rnd(hw, c))
    # the vanilla baseline shares the projection with NTED
    proj = Projection(rnd(c, c, s=scale), rnd(c, s=0.1))
    return target, reference, proj, rnd(k, c, s=scale), rnd(k, c, s=scale)


MIN_REP_TIME = 0.02  # seconds; short calls are looped until a rep lasts this long


def calls_per_rep(fn, min_time: float = MIN_REP_TIME) -> int:
    """Smallest power of two of calls whose total wall time reaches ``min_time``."""
    n = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        if time.perf_counter() - t0 >= min_time or n >= 1 << 16:
            return n
        n *= 2


def _rep(fn, n: int) -> float:
    t0 = time.perf_counter()
    for _ in range(n):
        fn()
    return (time.perf_counter() - t0) / n


def time_call(fn, reps: int = 5, warmup: int = 2, min_time: float = MIN_REP_TIME) -> float:
    """Median per-call wall time over ``reps`` reps after ``warmup`` discarded calls."""
    return time_interleaved([fn], reps, warmup, min_time)[0]


def time_interleaved(fns, reps: int = 5, warmup: int = 2, min_time: float = MIN_REP_TIME) -> list[float]:
    """Median per-call times of several functions, measured round-robin.

    Interleaving the reps spreads slow drifts in machine speed evenly over all
    functions, which keeps ratios between them stable.
    """
    for fn in fns:
        for _ in range(warmup):
            fn()
    counts = [calls_per_rep(fn, min_time) for fn in fns]
    samples: list[list[float]] = [[] for _ in fns]
    for _ in range(reps):
        for fn, n, out in zip(fns, counts, samples):
            out.append(_rep(fn, n))
    return [statistics.median(x) for x in samples]


def _count_point(hw, c, k, rng, dtype):
    target, reference, proj, w_e, w_d = make_instance(hw, c, k, rng, dtype)
    _, nted_cost = run_instrumented("nted", target, reference, proj, w_e, w_d)
    _, van_cost = run_instrumented("vanilla", target, reference, proj)
    calls = (
        lambda: run_instrumented("nted", target, reference, proj, w_e, w_d),
        lambda: run_instrumented("vanilla", target, reference, proj),
    )
    return target, nted_cost, van_cost, calls


def _row(hw, c, k, target, nted_cost, van_cost, nted_t, van_t) -> BenchRow:
    a_nted = account_cost(target.h, target.w, c, k, "nted")
    a_van = account_cost(target.h, target.w, c, k, "vanilla")
    return BenchRow(
        hw, target.h, target.w, c, k, nted_t, van_t,
        nted_cost.multiply_adds, van_cost.multiply_adds,
        nted_cost.element_allocations, van_cost.element_allocations,
        a_nted.multiply_adds, a_van.multiply_adds,
        a_nted.element_allocations, a_van.element_allocations,
    )


def _guard(grid, guard):
    too_big = [hw for hw in grid if hw > guard]
    if too_big:
        raise MemoryGuardError(
            f"grid points {too_big} exceed the vanilla memory guard hw <= {guard}; "
            f"vanilla attention needs (hw)^2 score elements"
        )


def bench_point(hw: int, c: int, k: int, rng, dtype=tc.F32, reps=5, warmup=2, guard=VANILLA_GUARD) -> BenchRow:
    return run_grid((hw,), c, k, rng, dtype, reps, warmup, guard)[0]


def run_grid(grid=(256, 1024, 4096), c=64, k=32, seed=0, dtype=tc.F32, reps=5, warmup=2, guard=VANILLA_GUARD) -> list[BenchRow]:
    """Counts and median wall times for both mechanisms at every grid point.

    ``seed`` may also be a ``numpy.random.Generator``.
    """
    _guard(grid, guard)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    points = [_count_point(hw, c, k, rng, dtype) for hw in grid]
    fns = [f for p in points for f in p[3]]
    times = time_interleaved(fns, reps, warmup)
    rows = [
        _row(hw, c, k, target, n_cost, v_cost, times[2 * i], times[2 * i + 1])
        for i, (hw, (target, n_cost, v_cost, _)) in enumerate(zip(grid, points))
    ]
    bad = [r.hw for r in rows if not r.counts_match]
    if bad:
        raise AssertionError(f"instrumented counts differ from analytic counts at hw={bad}")
    return rows


COUNT_SCHEMA = "nted.bench.counts.v1"
TIMING_SCHEMA = "nted.bench.timing.v1"

COUNT_FIELDS = [
    "schema", "hw", "h", "w", "c", "k",
    "nted_macs", "nted_macs_analytic", "vanilla_macs", "vanilla_macs_analytic",
    "nted_allocs", "nted_allocs_analytic", "vanilla_allocs", "vanilla_allocs_analytic",
    "mac_ratio", "alloc_ratio", "counts_match",
]
TIMING_FIELDS = [
    "schema", "hw", "precision", "reps", "nted_time_s", "vanilla_time_s", "time_ratio",
    "nted_time_growth", "vanilla_time_growth",
]


def count_records(rows: list[BenchRow]) -> list[dict]:
    return [
        {
            "schema": COUNT_SCHEMA, "hw": r.hw, "h": r.h, "w": r.w, "c": r.c, "k": r.k,
            "nted_macs": r.nted_macs, "nted_macs_analytic": r.nted_macs_analytic,
            "vanilla_macs": r.vanilla_macs, "vanilla_macs_analytic": r.vanilla_macs_analytic,
            "nted_allocs": r.nted_allocs, "nted_allocs_analytic": r.nted_allocs_analytic,
            "vanilla_allocs": r.vanilla_allocs, "vanilla_allocs_analytic": r.vanilla_allocs_analytic,
            "mac_ratio": f"{r.nted_macs / r.vanilla_macs:.6f}",
            "alloc_ratio": f"{r.nted_allocs / r.vanilla_allocs:.6f}",
            "counts_match": int(r.counts_match),
        }
        for r in rows
    ]


def timing_records(rows: list[BenchRow], precision: str, reps: int) -> list[dict]:
    out = []
    prev = None
    for r in rows:
        growth_n = growth_v = ""
        if prev is not None:
            growth_n = f"{r.nted_time / prev.nted_time:.4f}"
            growth_v = f"{r.vanilla_time / prev.vanilla_time:.4f}"
        out.append({
            "schema": TIMING_SCHEMA, "hw": r.hw, "precision": precision, "reps": reps,
            "nted_time_s": f"{r.nted_time:.6e}", "vanilla_time_s": f"{r.vanilla_time:.6e}",
            "time_ratio": f"{r.nted_time / r.vanilla_time:.6f}",
            "nted_time_growth": growth_n, "vanilla_time_growth": growth_v,
        })
        prev = r
    return out
