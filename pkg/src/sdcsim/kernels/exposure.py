"""Poisson accrual of corrupted application results.

Each production segment draws ``Poisson(mean)`` from its own counter key.
Small means use inversion; large means use Hörmann's PTRS transformed
rejection. Only ``sqrt`` and ``log`` are needed, and ``log`` is evaluated
scalar-by-scalar on both backends (numpy's SIMD ``log`` is not bit-identical
to libm), so the two paths return identical counts.
"""

from __future__ import annotations

import math

import numpy as np

from .._accel import njit, pick
from .rng import _draw, _unit, _wrapping, draw_nb, unit_nb

HOUR_MS = 3_600_000
SMALL_MEAN = 10.0

_LOGGAM_A = (8.333333333333333e-02, -2.777777777777778e-03, 7.936507936507937e-04,
             -5.952380952380952e-04, 8.417508417508418e-04, -1.917526917526918e-03,
             6.410256410256410e-03, -2.955065359477124e-02, 1.796443723688307e-01,
             -1.39243221690590e+00)
_A = np.array(_LOGGAM_A)
_LN_2PI = 1.8378770664093453


def _build_loggam(jit, log):
    @jit
    def loggam(x):
        # log Gamma(x) for x >= 1 by shifting to x >= 7 and a Stirling series
        x0 = x
        n = 0
        if x < 7.0:
            n = int(7.0 - x)
            x0 = x + n
        x2 = 1.0 / (x0 * x0)
        gl0 = _A[9]
        for k in range(8, -1, -1):
            gl0 = gl0 * x2 + _A[k]
        gl = gl0 / x0 + 0.5 * _LN_2PI + (x0 - 0.5) * log(x0) - x0
        if n > 0:
            for _ in range(n):
                x0 -= 1.0
                gl -= log(x0)
        return gl

    return loggam


loggam = _build_loggam(lambda f: f, math.log)
_loggam_nb = _build_loggam(njit, math.log)


@njit
def _poisson_nb(ekey, mean, exp_neg):
    if mean <= 0.0:
        return 0
    c = np.uint64(0)
    if mean < SMALL_MEAN:
        u = unit_nb(draw_nb(ekey, c))
        k = 0
        prod = u
        while prod > exp_neg:
            c += np.uint64(1)
            prod *= unit_nb(draw_nb(ekey, c))
            k += 1
        return k
    slam = math.sqrt(mean)
    loglam = math.log(mean)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    while True:
        u = unit_nb(draw_nb(ekey, c)) - 0.5
        v = unit_nb(draw_nb(ekey, c + np.uint64(1)))
        c += np.uint64(2)
        us = 0.5 - abs(u)
        k = math.floor((2.0 * a / us + b) * u + mean + 0.43)
        if us >= 0.07 and v <= vr:
            return int(k)
        if k < 0.0 or (us < 0.013 and v > us):
            continue
        if (math.log(v) + math.log(invalpha) - math.log(a / (us * us) + b)
                <= -mean + k * loglam - _loggam_nb(k + 1.0)):
            return int(k)


@njit
def _accrue_nb(seg_start, seg_end, rate, key):
    total = 0
    for i in range(seg_start.size):
        mean = rate[i] * ((seg_end[i] - seg_start[i]) / HOUR_MS)
        ekey = draw_nb(key, np.uint64(seg_start[i]))
        total += _poisson_nb(ekey, mean, math.exp(-mean))
    return total


@_wrapping
def _poisson_np(ekeys: np.ndarray, means: np.ndarray) -> np.ndarray:
    out = np.zeros(means.size, dtype=np.int64)
    small = (means > 0.0) & (means < SMALL_MEAN)
    # inversion: multiply uniforms until the product drops to exp(-mean)
    idx = np.flatnonzero(small)
    if idx.size:
        thresh = np.array([math.exp(-m) for m in means[idx]])
        prod = _unit(_draw(ekeys[idx], np.uint64(0)))
        k = np.zeros(idx.size, dtype=np.int64)
        c = 0
        live = prod > thresh
        while live.any():
            c += 1
            prod = np.where(live, prod * _unit(_draw(ekeys[idx], np.uint64(c))), prod)
            k += live
            live = prod > thresh
        out[idx] = k
    idx = np.flatnonzero(means >= SMALL_MEAN)
    if idx.size:
        lam = means[idx]
        keys = ekeys[idx]
        slam = np.sqrt(lam)
        b = 0.931 + 2.53 * slam
        a = -0.059 + 0.02483 * b
        invalpha = 1.1239 + 1.1328 / (b - 3.4)
        vr = 0.9277 - 3.6224 / (b - 2.0)
        pending = np.ones(idx.size, dtype=bool)
        c = 0
        while pending.any():
            p = np.flatnonzero(pending)
            u = _unit(_draw(keys[p], np.uint64(c))) - 0.5
            v = _unit(_draw(keys[p], np.uint64(c + 1)))
            c += 2
            us = 0.5 - np.abs(u)
            k = np.floor((2.0 * a[p] / us + b[p]) * u + lam[p] + 0.43)
            fast = (us >= 0.07) & (v <= vr[p])
            reject = (k < 0.0) | ((us < 0.013) & (v > us))
            accept = fast.copy()
            for j in np.flatnonzero(~fast & ~reject):
                i = p[j]
                lhs = math.log(v[j]) + math.log(invalpha[i]) - math.log(a[i] / (us[j] * us[j]) + b[i])
                rhs = -lam[i] + k[j] * math.log(lam[i]) - loggam(k[j] + 1.0)
                accept[j] = lhs <= rhs
            out[idx[p[accept]]] = k[accept].astype(np.int64)
            pending[p[accept]] = False
    return out


def _accrue_np(seg_start, seg_end, rate, key):
    if seg_start.size == 0:
        return 0
    means = rate * ((seg_end - seg_start) / HOUR_MS)
    ekeys = _draw(np.uint64(key), seg_start.astype(np.uint64))
    return int(_poisson_np(ekeys, means).sum())


def poisson(key: int, counter: int, mean: float, use_numba: bool | None = None) -> int:
    """One Poisson draw keyed by ``(key, counter)``."""
    start = np.array([counter], dtype=np.int64)
    end = start + HOUR_MS
    return accrue(start, end, np.array([mean]), key, use_numba)


def accrue(seg_start: np.ndarray, seg_end: np.ndarray, rate_per_hour: np.ndarray, key: int,
           use_numba: bool | None = None) -> int:
    """Total Poisson count over segments; segment ``i`` has mean ``rate[i]`` x its length in hours."""
    impl = pick(_accrue_nb, _accrue_np, use_numba)
    return int(impl(np.ascontiguousarray(seg_start, dtype=np.int64),
                    np.ascontiguousarray(seg_end, dtype=np.int64),
                    np.ascontiguousarray(rate_per_hour, dtype=np.float64), np.uint64(key)))


def hour_segments(t0: int, t1: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``[t0, t1)`` at absolute hour marks."""
    if t1 <= t0:
        e = np.zeros(0, dtype=np.int64)
        return e, e
    first = (t0 // HOUR_MS + 1) * HOUR_MS
    marks = np.arange(first, t1, HOUR_MS, dtype=np.int64)
    starts = np.concatenate(([t0], marks)).astype(np.int64)
    ends = np.concatenate((marks, [t1])).astype(np.int64)
    return starts, ends
