"""Host arithmetic for the four pattern families.

These run the computations on the actual FPU/ALU. The self-check compares
their bit patterns with golden values produced by exact rational arithmetic
in :func:`sdcsim.patterns.reference_eval`.

``pow`` is square-and-multiply in double-double (~104 bit) precision, which
rounds correctly except for inputs within ~2^-100 of a rounding midpoint.
Fused multiply-add is emulated from error-free transforms with the
round-to-odd construction of Boldo and Melquiond, since neither Python 3.10
nor numpy exposes the hardware instruction.
"""

from __future__ import annotations

import numpy as np

from .._accel import njit, pick

FAM_MUL = 0
FAM_POW = 1
FAM_FMA = 2
FAM_SHX = 3

_SPLITTER = 134217729.0  # 2**27 + 1
_U1 = np.uint64(1)
_U63 = np.uint64(63)
_U64 = np.uint64(64)


# -- scalar primitives (numba) ----------------------------------------------

@njit
def _split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


@njit
def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


@njit
def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@njit
def _dd_mul(xh, xl, yh, yl):
    p, e = _two_prod(xh, yh)
    e += xh * yl + xl * yh
    s = p + e
    return s, e - (s - p)


@njit
def pow_dd_scalar(x, k):
    rh, rl = 1.0, 0.0
    bh, bl = x, 0.0
    while k > 0:
        if k & 1:
            rh, rl = _dd_mul(rh, rl, bh, bl)
        k >>= 1
        if k > 0:
            bh, bl = _dd_mul(bh, bl, bh, bl)
    return rh


@njit
def fma_scalar(a, b, c):
    buf = np.empty(1, np.float64)
    ub = buf.view(np.uint64)
    uh, ul = _two_prod(a, b)
    th, tl = _two_sum(c, uh)
    v, e = _two_sum(tl, ul)
    if e != 0.0:
        buf[0] = v
        if (ub[0] & _U1) == 0:
            if (e > 0.0) == (v > 0.0):
                ub[0] = ub[0] + _U1
            else:
                ub[0] = ub[0] - _U1
            v = buf[0]
    return th + v


@njit
def _host_eval_nb(family, lanes, out):
    buf = np.empty(1, np.float64)
    ub = buf.view(np.uint64)
    for i in range(lanes.shape[0]):
        if family == FAM_MUL:
            out[i] = lanes[i, 0] * lanes[i, 1]
        elif family == FAM_SHX:
            x = lanes[i, 0]
            s = lanes[i, 1] & _U63
            if s == 0:
                out[i] = np.uint64(0)
            else:
                out[i] = x ^ ((x << s) | (x >> (_U64 - s)))
        elif family == FAM_POW:
            ub[0] = lanes[i, 0]
            r = pow_dd_scalar(buf[0], np.int64(lanes[i, 1]))
            buf[0] = r
            out[i] = ub[0]
        else:
            ub[0] = lanes[i, 0]
            a = buf[0]
            ub[0] = lanes[i, 1]
            b = buf[0]
            ub[0] = lanes[i, 2]
            c = buf[0]
            buf[0] = fma_scalar(a, b, c)
            out[i] = ub[0]
    return out


# -- vectorised twins --------------------------------------------------------

def _split_np(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod_np(a, b):
    p = a * b
    ah, al = _split_np(a)
    bh, bl = _split_np(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _two_sum_np(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _dd_mul_np(xh, xl, yh, yl):
    p, e = _two_prod_np(xh, yh)
    e = e + (xh * yl + xl * yh)
    s = p + e
    return s, e - (s - p)


def pow_dd_np(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    k = k.astype(np.int64)
    rh = np.ones_like(x)
    rl = np.zeros_like(x)
    bh = x.copy()
    bl = np.zeros_like(x)
    remaining = k.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        while np.any(remaining > 0):
            odd = (remaining & 1).astype(bool)
            mh, ml = _dd_mul_np(rh, rl, bh, bl)
            rh = np.where(odd, mh, rh)
            rl = np.where(odd, ml, rl)
            remaining >>= 1
            live = remaining > 0
            sh, sl = _dd_mul_np(bh, bl, bh, bl)
            bh = np.where(live, sh, bh)
            bl = np.where(live, sl, bl)
    return rh


def fma_np(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    uh, ul = _two_prod_np(a, b)
    th, tl = _two_sum_np(c, uh)
    v, e = _two_sum_np(tl, ul)
    bits = v.view(np.uint64).copy()
    fix = (e != 0.0) & ((bits & _U1) == 0)
    up = (e > 0.0) == (v > 0.0)
    bits[fix & up] += _U1
    bits[fix & ~up] -= _U1
    return th + bits.view(np.float64)


def _host_eval_np(family, lanes, out):
    l0 = lanes[:, 0]
    if family == FAM_MUL:
        out[:] = l0 * lanes[:, 1]
    elif family == FAM_SHX:
        s = lanes[:, 1] & _U63
        safe = np.where(s == 0, _U1, s)
        rot = (l0 << safe) | (l0 >> (_U64 - safe))
        out[:] = np.where(s == 0, np.uint64(0), l0 ^ rot)
    elif family == FAM_POW:
        out[:] = pow_dd_np(l0.view(np.float64), lanes[:, 1]).view(np.uint64)
    else:
        f = lanes.view(np.float64)
        out[:] = fma_np(f[:, 0], f[:, 1], f[:, 2]).view(np.uint64)
    return out


def host_eval(family: int, lanes: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
    """Evaluate ``family`` on an ``(n, 3)`` uint64 lane array; returns result bits."""
    lanes = np.ascontiguousarray(lanes, dtype=np.uint64)
    out = np.empty(lanes.shape[0], dtype=np.uint64)
    return pick(_host_eval_nb, _host_eval_np, use_numba)(np.int64(family), lanes, out)
