"""Timing kernels for the attention cost comparison.

Both kernels take query, key and value tensors of shape ``(N,) * m + (c,)``
and perform the query-key products, the softmax and the value aggregation.
No parameters and no autodiff: only the asymptotic work is being measured.

Contractions go through ``np.einsum`` without path optimisation, so they run
in numpy's own loops instead of BLAS. BLAS throughput climbs steeply with
matrix size over the range benchmarked here, which bends the time-vs-N curve;
the plain loops keep the rate per multiply-accumulate nearly flat.
"""

from __future__ import annotations

import statistics
import time

import numpy as np

from .errors import InputError
from .oracle import count_ops

MODES = ("axial", "full")
DEFAULT_MAX_TOKENS = 4096
# wide enough that contraction work, not per-call overhead, dominates the smallest sizes
DEFAULT_CHANNELS = {"axial": 128, "full": 1024}


def _softmax_last(x):
    x = x - x.max(axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=-1, keepdims=True)
    return x


def axial_kernel(q, k, v):
    """Attention along each of the m atom axes in turn, N^(m+1) * c MACs per axis."""
    m = q.ndim - 1
    out = v
    for axis in range(m):
        qa = np.moveaxis(q, axis, -2)
        ka = np.moveaxis(k, axis, -2)
        va = np.moveaxis(out, axis, -2)
        alpha = _softmax_last(np.einsum("...ic,...jc->...ij", qa, ka))
        out = np.moveaxis(np.einsum("...ij,...jc->...ic", alpha, va), -2, axis)
    return out


def full_kernel(q, k, v, max_tokens=DEFAULT_MAX_TOKENS):
    """One attention over all N^m bodies flattened into tokens, N^(2m) * c MACs."""
    c = q.shape[-1]
    tokens = int(np.prod(q.shape[:-1]))
    if tokens > max_tokens:
        raise InputError(f"full attention over {tokens} tokens exceeds the guard of {max_tokens}")
    qf, kf, vf = (a.reshape(tokens, c) for a in (q, k, v))
    alpha = _softmax_last(np.einsum("ic,jc->ij", qf, kf))
    return np.einsum("ij,jc->ic", alpha, vf).reshape(q.shape)


def time_kernel(mode, n, m, c=None, repeats=5, warmup=2, seed=0, max_tokens=DEFAULT_MAX_TOKENS):
    """Median wall time in ns over ``repeats`` runs after ``warmup`` untimed runs."""
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}, got {mode!r}")
    c = DEFAULT_CHANNELS[mode] if c is None else c
    if repeats < 1 or warmup < 0:
        raise InputError("repeats must be >= 1 and warmup >= 0")
    if mode == "full" and n**m > max_tokens:
        raise InputError(f"full attention over {n}^{m} = {n**m} tokens exceeds the guard of {max_tokens}")
    rng = np.random.default_rng([seed, n, m])
    q, k, v = (rng.standard_normal((n,) * m + (c,)) for _ in range(3))
    fn = axial_kernel if mode == "axial" else (lambda a, b, d: full_kernel(a, b, d, max_tokens))
    for _ in range(warmup):
        fn(q, k, v)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn(q, k, v)
        samples.append(time.perf_counter_ns() - t0)
    return int(statistics.median(samples))


def run_bench(orders, sizes, mode, c=None, repeats=5, warmup=2, max_tokens=DEFAULT_MAX_TOKENS):
    """Rows ``{m, N, mode, wall_ns, mac_count}`` for every (order, size) pair."""
    c = DEFAULT_CHANNELS.get(mode) if c is None else c
    rows = []
    for m in orders:
        for n in sizes:
            wall = time_kernel(mode, n, m, c, repeats, warmup, max_tokens=max_tokens)
            rows.append({"m": m, "N": n, "mode": mode, "wall_ns": wall, "mac_count": count_ops(mode, n, m, c)})
    return rows


def loglog_slope(sizes, times):
    """Least-squares slope of log(time) against log(N)."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])
