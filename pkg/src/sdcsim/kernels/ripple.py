"""Batched Ripple slices over one production interval of one machine.

Candidate slice starts are a pure function of ``(schedule key, time)``: each
absolute day-block draws a Poisson count from a precomputed CDF table and
hashes that many offsets into the block. Splitting a production period into
several intervals therefore never changes which slices exist, only which
ones fall inside production.

Each candidate is then admitted or skipped in time order:

* descale: concurrent slices < ``min(max_cores, cores - busy(t))``;
* tax guard: executed slice time in the trailing 24 h window, including the
  candidate, divided by ``24 h x cores`` must stay <= theta.

For a defective machine every executed slice runs one pattern (chosen and
reseeded by slice id) until the first manifestation, where the batch stops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .._accel import njit, pick
from .patterns import first_hit_scalar, lanes_np, subset_hash_np
from .rng import _draw, _mix64, _unit, _wrapping, draw2_nb, draw_nb, mix64_nb, unit_nb

DAY_MS = 86_400_000
HOUR_MS = 3_600_000
WORKLOAD_STEP_MS = 900_000
ENV_STEP_MS = 6 * HOUR_MS
SID_BLOCK = 65_536
_DAY_F = 86_400_000.0
_NO_LANES = np.zeros((0, 3), dtype=np.uint64)


def poisson_cdf_table(mean: float) -> np.ndarray:
    """CDF of Poisson(mean) up to the point it saturates; the last entry is a sentinel > 1."""
    if mean <= 0:
        return np.array([2.0])
    log_mean = math.log(mean)
    vals = []
    acc = 0.0
    k = 0
    while True:
        acc += math.exp(k * log_mean - mean - math.lgamma(k + 1))
        vals.append(acc)
        if (k > mean and acc >= 1.0 - 1e-17) or k >= SID_BLOCK - 2:
            break
        k += 1
    vals.append(2.0)
    return np.array(vals)


# -- shared scalar helpers -----------------------------------------------------

@njit
def age_gate(age, onset, ramp):
    if math.isinf(onset):
        return 1.0
    if age < onset:
        return 0.0
    if ramp <= 0.0 or age >= onset + ramp:
        return 1.0
    return (age - onset) / ramp


@njit
def slice_probability(s, p0e, temps, tc, gamma, age0, onset, ramp):
    step = s // ENV_STEP_MS
    if step >= temps.size:
        step = temps.size - 1
    t = temps[step]
    th = 1.0 if t <= tc else 1.0 + gamma * (t - tc)
    age = age0 + s / _DAY_F
    p = p0e * th * age_gate(age, onset, ramp)
    if p < 0.0:
        return 0.0
    if p > 1.0:
        return 1.0
    return p


@njit
def busy_cores(s, core_count, load, diurnal, noise_amp, busy_key):
    h = (s // HOUR_MS) % 24
    u = load * diurnal[h] + (unit_nb(draw_nb(busy_key, np.uint64(s // WORKLOAD_STEP_MS))) - 0.5) * (2.0 * noise_amp)
    if u < 0.0:
        u = 0.0
    if u > 1.0:
        u = 1.0
    return np.int64(math.floor(core_count * u + 0.5))


@njit
def _sorted_offsets(bk, cnt, tmp, bkt, pos, srt):
    """``srt[:cnt]`` = sorted day offsets; bucket by the uniform, then insertion-sort (same as np.sort)."""
    for k in range(cnt + 1):
        pos[k] = 0
    for i in range(cnt):
        u = unit_nb(draw_nb(bk, np.uint64(i)))
        tmp[i] = np.int64(u * _DAY_F)
        k = np.int64(u * cnt)
        bkt[i] = k
        pos[k + 1] += 1
    for k in range(cnt):
        pos[k + 1] += pos[k]
    for i in range(cnt):
        k = bkt[i]
        srt[pos[k]] = tmp[i]
        pos[k] += 1
    for i in range(1, cnt):
        v = srt[i]
        j = i
        while j > 0 and srt[j - 1] > v:
            srt[j] = srt[j - 1]
            j -= 1
        srt[j] = v


@njit
def _ripple_nb(t0, t1, sched_key, off_key, cdf, slice_ms, core_count, max_cores, load, diurnal,
               noise_amp, busy_key, theta, carry, defective, pfam, pseed, piter, data_key,
               subset_key, thr, full, p0e, temps, tc, gamma, age0, onset, ramp, s_min, dt_ms,
               exec_key):
    b0 = t0 // DAY_MS
    b1 = (t1 - 1) // DAY_MS
    total = 0
    for b in range(b0, b1 + 1):
        total += np.searchsorted(cdf, unit_nb(draw_nb(sched_key, np.uint64(b))), side="right")
    nc = carry.size
    ex = np.empty(nc + total, np.int64)
    ex[:nc] = carry
    ne = nc
    m = cdf.size + 1
    tmp = np.empty(m, np.int64)
    bkt = np.empty(m, np.int64)
    srt = np.empty(m, np.int64)
    pos = np.empty(m + 1, np.int64)
    buf = np.empty(1, np.float64)
    ub = buf.view(np.uint64)
    cap = _DAY_F * core_count
    # busy(s) is monotone in its noise draw, so its upper bound can settle the core check exactly
    u_max = load * diurnal.max() + noise_amp
    if u_max > 1.0:
        u_max = 1.0
    never_saturated = core_count - np.int64(math.floor(core_count * u_max + 0.5)) >= max_cores
    dur_s = slice_ms / 1000.0
    trans = dt_ms / 1000.0
    npat = np.uint64(pfam.size)
    lo_ptr = 0
    act_ptr = 0
    n_cand = 0
    n_core = 0
    n_tax = 0
    max_tax = 0.0
    for b in range(b0, b1 + 1):
        cnt = np.searchsorted(cdf, unit_nb(draw_nb(sched_key, np.uint64(b))), side="right")
        bk = draw_nb(off_key, np.uint64(b))
        _sorted_offsets(bk, cnt, tmp, bkt, pos, srt)
        for r in range(cnt):
            s = b * DAY_MS + srt[r]
            if s < t0 or s >= t1:
                continue
            n_cand += 1
            if never_saturated:
                lim = max_cores
            else:
                lim = core_count - busy_cores(s, core_count, load, diurnal, noise_amp, busy_key)
                if lim > max_cores:
                    lim = max_cores
            while act_ptr < ne and ex[act_ptr] + slice_ms <= s:
                act_ptr += 1
            if ne - act_ptr >= lim:
                n_core += 1
                continue
            lo = s + slice_ms - _DAY_F
            while lo_ptr < ne and ex[lo_ptr] < lo:
                lo_ptr += 1
            tax = (ne - lo_ptr + 1) * slice_ms / cap
            if tax > theta:
                n_tax += 1
                continue
            ex[ne] = s
            ne += 1
            if tax > max_tax:
                max_tax = tax
            if defective:
                pr = slice_probability(s, p0e, temps, tc, gamma, age0, onset, ramp)
                if pr > 0.0:
                    sid = np.uint64(b * SID_BLOCK + r)
                    k = np.int64(mix64_nb(sid ^ data_key) % npat)
                    seed = draw_nb(pseed[k] ^ data_key, sid)
                    j = first_hit_scalar(pfam[k], seed, piter[k], _NO_LANES, subset_key, thr, full,
                                         pr, dur_s, 0.0, s_min, trans, exec_key, sid, 0, buf, ub)
                    if j >= 0:
                        return (ex[nc:ne].copy(), n_cand, n_core, n_tax, max_tax,
                                np.int64(sid), s, k, np.int64(j), seed)
    return ex[nc:ne].copy(), n_cand, n_core, n_tax, max_tax, np.int64(-1), np.int64(-1), np.int64(-1), np.int64(-1), np.uint64(0)


# -- numpy twin ------------------------------------------------------------------

@_wrapping
def _candidates_np(t0, t1, sched_key, off_key, cdf):
    blocks = np.arange(t0 // DAY_MS, (t1 - 1) // DAY_MS + 1, dtype=np.int64)
    counts = np.searchsorted(cdf, _unit(_draw(sched_key, blocks.astype(np.uint64))), side="right")
    bb = np.repeat(blocks, counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    ii = np.arange(bb.size, dtype=np.int64) - first
    bk = _draw(off_key, bb.astype(np.uint64))
    off = (_unit(_draw(bk, ii.astype(np.uint64))) * _DAY_F).astype(np.int64)
    starts = np.sort(bb * DAY_MS + off)
    bs = starts // DAY_MS
    rank = np.arange(starts.size, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    keep = (starts >= t0) & (starts < t1)
    return starts[keep], (bs * SID_BLOCK + rank)[keep]


@_wrapping
def _busy_np(s, core_count, load, diurnal, noise_amp, busy_key):
    h = (s // HOUR_MS) % 24
    noise = (_unit(_draw(busy_key, (s // WORKLOAD_STEP_MS).astype(np.uint64))) - 0.5) * (2.0 * noise_amp)
    u = np.clip(load * diurnal[h] + noise, 0.0, 1.0)
    return np.floor(core_count * u + 0.5).astype(np.int64)


def _admit_np(starts, lim, carry, slice_ms, cap, theta):
    """Indices of admitted candidates, tax per admitted slice and skip counts."""
    ok = lim > 0
    cand = np.flatnonzero(ok)
    e = np.concatenate((carry, starts[cand])).astype(np.int64)
    pos = np.arange(carry.size, e.size)
    s = starts[cand]
    active = pos - np.searchsorted(e + slice_ms, s, side="right")
    lo_idx = np.searchsorted(e.astype(np.float64), s + slice_ms - _DAY_F, side="left")
    tax = (pos - lo_idx + 1) * slice_ms / cap
    if np.all(active < lim[cand]) and np.all(tax <= theta):
        n_core = np.cumsum(~ok)
        return cand, tax, n_core, np.zeros(starts.size, dtype=np.int64)
    # contention: replay the admission rule in order
    ex = list(carry.tolist())
    act_ptr = lo_ptr = 0
    admitted, taxes = [], []
    core_skip = np.zeros(starts.size, dtype=np.int64)
    tax_skip = np.zeros(starts.size, dtype=np.int64)
    for i, si in enumerate(starts.tolist()):
        while act_ptr < len(ex) and ex[act_ptr] + slice_ms <= si:
            act_ptr += 1
        if len(ex) - act_ptr >= lim[i]:
            core_skip[i] = 1
            continue
        lo = si + slice_ms - _DAY_F
        while lo_ptr < len(ex) and ex[lo_ptr] < lo:
            lo_ptr += 1
        t = (len(ex) - lo_ptr + 1) * slice_ms / cap
        if t > theta:
            tax_skip[i] = 1
            continue
        ex.append(si)
        admitted.append(i)
        taxes.append(t)
    return (np.array(admitted, dtype=np.int64), np.array(taxes, dtype=np.float64),
            np.cumsum(core_skip), np.cumsum(tax_skip))


def _age_gate_np(age, onset, ramp):
    if math.isinf(onset):
        return np.ones_like(age)
    g = np.where(age < onset, 0.0, 1.0)
    if ramp > 0.0:
        mid = (age >= onset) & ~(age >= onset + ramp)
        g = np.where(mid, (age - onset) / ramp, g)
    return g


@_wrapping
def _first_hits_np(s, sid, pfam, pseed, piter, data_key, subset_key, thr, full, p0e, temps, tc,
                   gamma, age0, onset, ramp, s_min, dt_ms, exec_key, slice_ms, chunk=2048):
    """Earliest (row, pattern, iteration, seed) with a manifestation, or None."""
    step = np.minimum(s // ENV_STEP_MS, temps.size - 1)
    t = temps[step]
    th = np.where(t <= tc, 1.0, 1.0 + gamma * np.maximum(t - tc, 0.0))
    p = np.clip(p0e * th * _age_gate_np(age0 + s / _DAY_F, onset, ramp), 0.0, 1.0)
    usid = sid.astype(np.uint64)
    k = (_mix64(usid ^ data_key) % np.uint64(pfam.size)).astype(np.int64)
    seed = _draw(pseed[k] ^ data_key, usid)
    dur_s = slice_ms / 1000.0
    trans = dt_ms / 1000.0
    for lo in range(0, s.size, chunk):
        best = None
        for pat in range(pfam.size):
            rows = np.flatnonzero((k[lo:lo + chunk] == pat) & (p[lo:lo + chunk] > 0.0)) + lo
            if rows.size == 0:
                continue
            n = int(piter[pat])
            j = np.arange(n, dtype=np.int64)
            el = (j + 1) * dur_s / n
            ok_j = ~(el > trans) & (0.0 + el >= s_min)
            ln = lanes_np(int(pfam[pat]), seed[rows][:, None], j.astype(np.uint64)[None, :])
            ok = np.broadcast_to(ok_j, (rows.size, n)).copy()
            if not full:
                ok &= subset_hash_np(subset_key, int(pfam[pat]), ln) < thr
            ekey = _draw(exec_key, usid[rows])[:, None]
            ok &= _unit(_draw(ekey, j.astype(np.uint64)[None, :])) < p[rows][:, None]
            hit_rows = np.flatnonzero(ok.any(axis=1))
            if hit_rows.size:
                r = int(hit_rows[0])
                cand = (int(rows[r]), pat, int(np.argmax(ok[r])), seed[rows[r]])
                if best is None or cand[0] < best[0]:
                    best = cand
        if best is not None:
            return best
    return None


def _ripple_np(t0, t1, sched_key, off_key, cdf, slice_ms, core_count, max_cores, load, diurnal,
               noise_amp, busy_key, theta, carry, defective, pfam, pseed, piter, data_key,
               subset_key, thr, full, p0e, temps, tc, gamma, age0, onset, ramp, s_min, dt_ms,
               exec_key):
    starts, sids = _candidates_np(t0, t1, sched_key, off_key, cdf)
    busy = _busy_np(starts, core_count, load, diurnal, noise_amp, busy_key)
    lim = np.minimum(core_count - busy, max_cores)
    cap = _DAY_F * core_count
    adm, tax, core_cum, tax_cum = _admit_np(starts, lim, carry, slice_ms, cap, theta)
    hit = None
    if defective and adm.size:
        hit = _first_hits_np(starts[adm], sids[adm], pfam, pseed, piter, data_key, subset_key, thr,
                             full, p0e, temps, tc, gamma, age0, onset, ramp, s_min, dt_ms,
                             exec_key, slice_ms)
    if hit is None:
        last = starts.size - 1
        n_adm = adm.size
        out_hit = (np.int64(-1), np.int64(-1), np.int64(-1), np.int64(-1), np.uint64(0))
    else:
        row, pat, j, seed = hit
        last = int(adm[row])
        n_adm = row + 1
        out_hit = (np.int64(sids[last]), np.int64(starts[last]), np.int64(pat), np.int64(j), np.uint64(seed))
    n_cand = last + 1
    n_core = int(core_cum[last]) if n_cand else 0
    n_tax = int(tax_cum[last]) if n_cand else 0
    max_tax = float(tax[:n_adm].max()) if n_adm else 0.0
    return (starts[adm[:n_adm]], n_cand, n_core, n_tax, max_tax) + out_hit


# -- packed entry points -------------------------------------------------------------
# Scalars travel in two small arrays: numba's per-argument dispatch cost dominates short intervals.

@njit
def _ripple_packed_nb(t0, t1, cdf, diurnal, carry, pfam, pseed, piter, temps, fp, up):
    return _ripple_nb(t0, t1, up[0], up[1], cdf, fp[0], np.int64(up[7]), np.int64(up[8]), fp[1], diurnal,
                      fp[2], up[2], fp[3], carry, up[9] != 0, pfam, pseed, piter, up[3], up[4], up[5],
                      up[10] != 0, fp[4], temps, fp[5], fp[6], fp[7], fp[8], fp[9], fp[10], fp[11], up[6])


def _ripple_packed_np(t0, t1, cdf, diurnal, carry, pfam, pseed, piter, temps, fp, up):
    return _ripple_np(t0, t1, up[0], up[1], cdf, fp[0], np.int64(up[7]), np.int64(up[8]), fp[1], diurnal,
                      fp[2], up[2], fp[3], carry, bool(up[9]), pfam, pseed, piter, up[3], up[4], up[5],
                      bool(up[10]), fp[4], temps, fp[5], fp[6], fp[7], fp[8], fp[9], fp[10], fp[11], up[6])


# -- dispatch ----------------------------------------------------------------------

@dataclass
class SliceBatch:
    executed: np.ndarray
    candidates: int
    skipped_cores: int
    skipped_tax: int
    max_window_tax: float
    hit_sid: int = -1
    hit_start: int = -1
    hit_pattern: int = -1
    hit_iteration: int = -1
    hit_seed: int = 0

    @property
    def hit(self) -> bool:
        return self.hit_sid >= 0


@dataclass
class RippleMachineParams:
    sched_key: int
    off_key: int
    busy_key: int
    core_count: int
    load: float
    max_cores: int


@dataclass
class RippleDefectParams:
    pfam: np.ndarray
    pseed: np.ndarray
    piter: np.ndarray
    data_key: int
    subset_key: int
    thr: int
    full: bool
    p0e: float
    temps: np.ndarray
    tc: float
    gamma: float
    age0: float
    onset: float
    ramp: float
    s_min: float
    dt_ms: float
    exec_key: int


_EMPTY_I = np.zeros(1, dtype=np.int64)
_EMPTY_U = np.zeros(1, dtype=np.uint64)
_EMPTY_F = np.zeros(1, dtype=np.float64)
_NO_SLICES = np.zeros(0, dtype=np.int64)


def _packed(m: RippleMachineParams, slice_ms: float, noise_amp: float, theta: float,
            d: RippleDefectParams | None) -> tuple:
    if d is None:
        fp = np.array([slice_ms, m.load, noise_amp, theta, 0.0, 0.0, 0.0, 0.0, math.inf, 0.0, 0.0, math.inf])
        up = np.array([m.sched_key, m.off_key, m.busy_key, 0, 0, 0, 0, m.core_count, m.max_cores, 0, 0],
                      dtype=np.uint64)
        return _EMPTY_I, _EMPTY_U, _EMPTY_I, _EMPTY_F, fp, up
    fp = np.array([slice_ms, m.load, noise_amp, theta, d.p0e, d.tc, d.gamma, d.age0, d.onset, d.ramp, d.s_min,
                   d.dt_ms], dtype=np.float64)
    up = np.array([m.sched_key, m.off_key, m.busy_key, d.data_key, d.subset_key, d.thr, d.exec_key, m.core_count,
                   m.max_cores, 1, int(bool(d.full))], dtype=np.uint64)
    return d.pfam, d.pseed, d.piter, d.temps, fp, up


class SliceRunner:
    """Machine-bound ``run_slices``: argument packing is done once per machine and defect."""

    __slots__ = ("_impl", "_m", "_cdf", "_diurnal", "_fixed", "_cache")

    def __init__(self, m: RippleMachineParams, cdf: np.ndarray, slice_ms: float, diurnal: np.ndarray,
                 noise_amp: float, theta: float, use_numba: bool | None = None):
        self._impl = pick(_ripple_packed_nb, _ripple_packed_np, use_numba)
        self._m = m
        self._cdf = cdf
        self._diurnal = np.ascontiguousarray(diurnal, dtype=np.float64)
        self._fixed = (float(slice_ms), float(noise_amp), float(theta))
        self._cache: tuple = (None, _packed(m, *self._fixed, None))

    def __call__(self, t0: int, t1: int, carry: np.ndarray, defect: RippleDefectParams | None = None) -> SliceBatch:
        if t1 <= t0:
            return SliceBatch(_NO_SLICES, 0, 0, 0, 0.0)
        if carry.dtype != np.int64:
            carry = np.ascontiguousarray(carry, dtype=np.int64)
        if self._cache[0] is not defect:
            self._cache = (defect, _packed(self._m, *self._fixed, defect))
        pfam, pseed, piter, temps, fp, up = self._cache[1]
        ex, n_cand, n_core, n_tax, max_tax, sid, start, pat, it, seed = self._impl(
            np.int64(t0), np.int64(t1), self._cdf, self._diurnal, carry, pfam, pseed, piter, temps, fp, up)
        return SliceBatch(ex, int(n_cand), int(n_core), int(n_tax), float(max_tax), int(sid), int(start), int(pat),
                          int(it), int(seed))


# -- healthy-machine batches ---------------------------------------------------------
# Slices on a machine without a defect can only feed the totals, so a whole
# run's worth of such intervals is settled in one call.

@njit
def _healthy_batch_nb(t0s, t1s, rows, cdf, diurnal, fps, ups, carry_cap):
    n_ex = 0
    n_cand = 0
    n_core = 0
    n_tax = 0
    max_tax = 0.0
    carry = np.empty(0, np.int64)
    prev = -1
    for i in range(t0s.size):
        r = rows[i]
        if r != prev:
            carry = np.empty(0, np.int64)
            prev = r
        ex, c, nc, nt, mt, _, _, _, _, _ = _ripple_packed_nb(t0s[i], t1s[i], cdf, diurnal, carry, _EMPTY_I,
                                                             _EMPTY_U, _EMPTY_I, _EMPTY_F, fps[r], ups[r])
        n_ex += ex.size
        n_cand += c
        n_core += nc
        n_tax += nt
        if mt > max_tax:
            max_tax = mt
        if ex.size >= carry_cap:
            carry = ex[ex.size - carry_cap:].copy()
        elif ex.size:
            both = np.concatenate((carry, ex))
            carry = both[max(both.size - carry_cap, 0):].copy()
    return n_ex, n_cand, n_core, n_tax, max_tax


def _healthy_batch_np(t0s, t1s, rows, cdf, diurnal, fps, ups, carry_cap):
    n_ex = n_cand = n_core = n_tax = 0
    max_tax = 0.0
    carry = _NO_SLICES
    prev = -1
    for t0, t1, r in zip(t0s.tolist(), t1s.tolist(), rows.tolist()):
        if r != prev:
            carry, prev = _NO_SLICES, r
        ex, c, nc, nt, mt = _ripple_packed_np(np.int64(t0), np.int64(t1), cdf, diurnal, carry, _EMPTY_I, _EMPTY_U,
                                              _EMPTY_I, _EMPTY_F, fps[r], ups[r])[:5]
        n_ex += ex.size
        n_cand += int(c)
        n_core += int(nc)
        n_tax += int(nt)
        max_tax = max(max_tax, float(mt))
        if ex.size >= carry_cap:
            carry = ex[-carry_cap:]
        elif ex.size:
            carry = np.concatenate((carry, ex))[-carry_cap:]
    return n_ex, n_cand, n_core, n_tax, max_tax


def healthy_batch(intervals: list[tuple[int, int, int]], params: dict[int, tuple[RippleMachineParams, float]],
                  cdf: np.ndarray, slice_ms: float, diurnal: np.ndarray, noise_amp: float, carry_cap: int,
                  use_numba: bool | None = None) -> tuple[int, int, int, int, float]:
    """Totals ``(executed, candidates, skipped_cores, skipped_tax, max_tax)`` over healthy intervals.

    ``intervals`` holds ``(machine_id, t0, t1)`` and ``params`` maps each machine
    to ``(params, theta)``; each machine starts with an empty carry and its
    intervals are replayed in time order.
    """
    ivs = sorted(iv for iv in intervals if iv[2] > iv[1])
    if not ivs:
        return 0, 0, 0, 0, 0.0
    ids = sorted({iv[0] for iv in ivs})
    row_of = {mid: i for i, mid in enumerate(ids)}
    packed = [_packed(params[mid][0], slice_ms, noise_amp, params[mid][1], None) for mid in ids]
    fps = np.stack([p[4] for p in packed])
    ups = np.stack([p[5] for p in packed])
    arr = np.array(ivs, dtype=np.int64)
    rows = np.array([row_of[mid] for mid in arr[:, 0].tolist()], dtype=np.int64)
    impl = pick(_healthy_batch_nb, _healthy_batch_np, use_numba)
    out = impl(np.ascontiguousarray(arr[:, 1]), np.ascontiguousarray(arr[:, 2]), rows, cdf,
               np.ascontiguousarray(diurnal, dtype=np.float64), fps, ups, np.int64(carry_cap))
    return int(out[0]), int(out[1]), int(out[2]), int(out[3]), float(out[4])


def run_slices(t0: int, t1: int, m: RippleMachineParams, cdf: np.ndarray, slice_ms: float,
               diurnal: np.ndarray, noise_amp: float, theta: float, carry: np.ndarray,
               defect: RippleDefectParams | None = None, use_numba: bool | None = None) -> SliceBatch:
    """Process every candidate slice in ``[t0, t1)`` for one machine."""
    return SliceRunner(m, cdf, slice_ms, diurnal, noise_amp, theta, use_numba)(t0, t1, carry, defect)
