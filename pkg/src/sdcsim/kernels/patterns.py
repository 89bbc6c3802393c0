"""Operand schedules, the faulty-subset predicate and manifestation search.

Operands travel as three uint64 lanes per iteration (floats as IEEE bits,
unused lanes zero). The lanes are also the canonical encoding the faulty
subset hashes, so a crafted operand such as ``(1.1, 53)`` lands in the same
place whether it came from a seed or from a hand-written pattern.
"""

from __future__ import annotations

import functools
from fractions import Fraction

import numpy as np

from .._accel import njit, pick
from .arith import FAM_FMA, FAM_MUL, FAM_POW, FAM_SHX
from .rng import (
    GAMMA_INT,
    MASK64,
    _wrapping,
    _draw,
    _mix64,
    _unit,
    draw_int,
    draw_nb,
    mix64_int,
    mix64_nb,
    unit_int,
    unit_nb,
)

FAM_TAG_INT = 0xD1B54A32D192ED03
_FAM_TAG = np.uint64(FAM_TAG_INT)
_U0 = np.uint64(0)
_U1 = np.uint64(1)
_U3 = np.uint64(3)
_U63 = np.uint64(63)
_U65 = np.uint64(65)


@functools.lru_cache(maxsize=1024)
def subset_threshold(rho: float) -> tuple[int, bool]:
    """``(threshold, full)`` such that a hash ``h`` is faulty iff ``full or h < threshold``."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"faulty fraction must be in (0, 1], got {rho}")
    thr = int(Fraction(rho) * (1 << 64))
    if thr > MASK64:
        return MASK64, True
    return thr, False


# -- reference (Python ints) -------------------------------------------------

def _float_bits(x: float) -> int:
    return int(np.float64(x).view(np.uint64))


def lanes_int(family: int, seed: int, i: int) -> tuple[int, int, int]:
    k = mix64_int(seed ^ (((family + 1) * FAM_TAG_INT) & MASK64))
    r0, r1, r2 = (draw_int(k, 3 * i + j) for j in range(3))
    if family == FAM_MUL:
        return r0, r1, 0
    if family == FAM_SHX:
        return r0, r1 % 63 + 1, 0
    if family == FAM_POW:
        return _float_bits(0.5 + 1.5 * unit_int(r0)), r1 % 65, 0
    return tuple(_float_bits(-4.0 + 8.0 * unit_int(r)) for r in (r0, r1, r2))


def subset_hash_int(subset_seed: int, family: int, lanes: tuple[int, int, int]) -> int:
    h = mix64_int(mix64_int(subset_seed) ^ (((family + 1) * FAM_TAG_INT) & MASK64))
    for lane in lanes:
        h = mix64_int(h ^ lane)
    return h


# -- numba scalar ------------------------------------------------------------

@njit
def lanes_scalar(family, kfam, i, buf, ub):
    base = np.uint64(i) * _U3
    r0 = draw_nb(kfam, base)
    r1 = draw_nb(kfam, base + _U1)
    if family == FAM_MUL:
        return r0, r1, _U0
    if family == FAM_SHX:
        return r0, r1 % _U63 + _U1, _U0
    if family == FAM_POW:
        buf[0] = 0.5 + 1.5 * unit_nb(r0)
        return ub[0], r1 % _U65, _U0
    r2 = draw_nb(kfam, base + np.uint64(2))
    buf[0] = -4.0 + 8.0 * unit_nb(r0)
    a = ub[0]
    buf[0] = -4.0 + 8.0 * unit_nb(r1)
    b = ub[0]
    buf[0] = -4.0 + 8.0 * unit_nb(r2)
    return a, b, ub[0]


@njit
def family_key(seed, family):
    return mix64_nb(seed ^ (np.uint64(family + 1) * _FAM_TAG))


@njit
def subset_family_key(subset_key, family):
    return mix64_nb(subset_key ^ (np.uint64(family + 1) * _FAM_TAG))


@njit
def subset_hash_scalar(hk, l0, l1, l2):
    h = mix64_nb(hk ^ l0)
    h = mix64_nb(h ^ l1)
    return mix64_nb(h ^ l2)


@njit
def first_hit_scalar(family, seed, n, lanes, subset_key, thr, full, p, dur_s,
                     cts0, s_min, trans_limit_s, key, ctr, start, buf, ub):
    """Index of the first manifesting iteration at or after ``start``, else -1."""
    if p <= 0.0:
        return -1
    use_lanes = lanes.shape[0] > 0
    kfam = family_key(seed, family)
    hk = subset_family_key(subset_key, family)
    ekey = draw_nb(key, np.uint64(ctr))
    for j in range(start, n):
        el = (j + 1) * dur_s / n
        if el > trans_limit_s:
            return -1
        if cts0 + el < s_min:
            continue
        if use_lanes:
            l0 = lanes[j, 0]
            l1 = lanes[j, 1]
            l2 = lanes[j, 2]
        else:
            l0, l1, l2 = lanes_scalar(family, kfam, j, buf, ub)
        if not full:
            if subset_hash_scalar(hk, l0, l1, l2) >= thr:
                continue
        if unit_nb(draw_nb(ekey, np.uint64(j))) < p:
            return j
    return -1


@njit
def _first_hit_nb(family, seed, n, lanes, subset_key, thr, full, p, dur_s,
                  cts0, s_min, trans_limit_s, key, ctr, start):
    buf = np.empty(1, np.float64)
    ub = buf.view(np.uint64)
    return first_hit_scalar(family, seed, n, lanes, subset_key, thr, full, p, dur_s,
                            cts0, s_min, trans_limit_s, key, ctr, start, buf, ub)


@njit
def _lanes_nb(family, seed, n):
    buf = np.empty(1, np.float64)
    ub = buf.view(np.uint64)
    out = np.zeros((n, 3), np.uint64)
    kfam = family_key(seed, family)
    for i in range(n):
        l0, l1, l2 = lanes_scalar(family, kfam, i, buf, ub)
        out[i, 0] = l0
        out[i, 1] = l1
        out[i, 2] = l2
    return out


# -- numpy twins ---------------------------------------------------------------

@_wrapping
def family_key_np(seed, family):
    return _mix64(np.uint64(seed) ^ (np.uint64(family + 1) * _FAM_TAG))


@_wrapping
def lanes_np(family: int, seed, idx: np.ndarray) -> np.ndarray:
    """Lanes for iteration indices ``idx``; ``seed`` may be a scalar or per-row array."""
    idx = np.asarray(idx, dtype=np.uint64)
    kfam = family_key_np(seed, family)
    base = idx * _U3
    r0 = np.asarray(_draw(kfam, base))
    r1 = np.asarray(_draw(kfam, base + _U1))
    out = np.zeros(r0.shape + (3,), dtype=np.uint64)
    if family == FAM_MUL:
        out[..., 0] = r0
        out[..., 1] = r1
    elif family == FAM_SHX:
        out[..., 0] = r0
        out[..., 1] = r1 % _U63 + _U1
    elif family == FAM_POW:
        out[..., 0] = (0.5 + 1.5 * _unit(r0)).view(np.uint64)
        out[..., 1] = r1 % _U65
    else:
        r2 = _draw(kfam, base + np.uint64(2))
        for col, r in enumerate((r0, r1, np.asarray(r2))):
            out[..., col] = (-4.0 + 8.0 * _unit(r)).view(np.uint64)
    return out


@_wrapping
def subset_hash_np(subset_key, family: int, lanes: np.ndarray) -> np.ndarray:
    h = _mix64(np.uint64(subset_key) ^ (np.uint64(family + 1) * _FAM_TAG))
    h = _mix64(h ^ lanes[..., 0])
    h = _mix64(h ^ lanes[..., 1])
    return _mix64(h ^ lanes[..., 2])


@_wrapping
def _first_hit_np(family, seed, n, lanes, subset_key, thr, full, p, dur_s,
                  cts0, s_min, trans_limit_s, key, ctr, start, chunk=4096):
    if p <= 0.0:
        return -1
    ekey = _draw(np.uint64(key), np.uint64(ctr))
    for lo in range(int(start), int(n), chunk):
        j = np.arange(lo, min(lo + chunk, int(n)), dtype=np.int64)
        el = (j + 1) * dur_s / n
        past = el > trans_limit_s
        ok = ~past & (cts0 + el >= s_min)
        if lanes.shape[0] > 0:
            ln = lanes[j]
        else:
            ln = lanes_np(int(family), seed, j.astype(np.uint64))
        if not full:
            ok &= subset_hash_np(subset_key, int(family), ln) < np.uint64(thr)
        u = _unit(_draw(ekey, j.astype(np.uint64)))
        ok &= u < p
        first_ok = int(np.argmax(ok)) if ok.any() else len(j)
        first_past = int(np.argmax(past)) if past.any() else len(j)
        if first_past <= first_ok and first_past < len(j):
            return -1
        if first_ok < len(j):
            return int(j[first_ok])
    return -1


# -- dispatch ----------------------------------------------------------------

_NO_LANES = np.zeros((0, 3), dtype=np.uint64)


def pattern_lanes(family: int, seed: int, n: int, use_numba: bool | None = None) -> np.ndarray:
    seed = np.uint64(seed & MASK64)
    if pick(True, False, use_numba):
        return _lanes_nb(np.int64(family), seed, np.int64(n))
    return lanes_np(family, seed, np.arange(n, dtype=np.uint64))


def first_hit(family: int, seed: int, n: int, lanes: np.ndarray | None, subset_seed: int,
              rho: float, p: float, dur_s: float, cts0: float, s_min: float,
              trans_limit_s: float, key: int, ctr: int, start: int = 0,
              use_numba: bool | None = None) -> int:
    thr, full = subset_threshold(rho)
    impl = pick(_first_hit_nb, _first_hit_np, use_numba)
    return int(impl(
        np.int64(family), np.uint64(seed & MASK64), np.int64(n),
        _NO_LANES if lanes is None else np.ascontiguousarray(lanes, dtype=np.uint64),
        np.uint64(mix64_int(subset_seed)), np.uint64(thr), bool(full), float(p),
        float(dur_s), float(cts0), float(s_min), float(trans_limit_s),
        np.uint64(key & MASK64), np.uint64(ctr), np.int64(start),
    ))


def faulty_mask(subset_seed: int, rho: float, family: int, lanes: np.ndarray) -> np.ndarray:
    thr, full = subset_threshold(rho)
    if full:
        return np.ones(lanes.shape[0], dtype=bool)
    return subset_hash_np(np.uint64(mix64_int(subset_seed)), family, lanes) < np.uint64(thr)


__all__ = [
    "FAM_FMA", "FAM_MUL", "FAM_POW", "FAM_SHX", "GAMMA_INT", "first_hit", "faulty_mask",
    "lanes_int", "pattern_lanes", "subset_hash_int", "subset_threshold",
]
