"""Numba vs pure-numpy timings for the hot kernels.

Both backends are called in the same process through their ``use_numba``
switch; each case first checks that the two produce identical output, then
reports the best of ``--repeat`` warm runs.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]
"""

import argparse
import time

import numpy as np

from sdcsim import config_from_dict, run
from sdcsim.dynamics import EnvironmentModel
from sdcsim.kernels import arith
from sdcsim.kernels import exposure as kexp
from sdcsim.kernels import patterns as kp
from sdcsim.kernels import ripple as kr
from sdcsim.model import DAY_MS, BitFlip, DefectSpec, EnvironmentState, Machine, OperatingPoint
from sdcsim.patterns import Family, selfcheck
from sdcsim.ripple import defect_params, diurnal_curve, machine_params


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def same(a, b):
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    if isinstance(a, kr.SliceBatch):
        return np.array_equal(a.executed, b.executed) and (a.hit_sid, a.hit_iteration) == (b.hit_sid, b.hit_iteration)
    return a == b


def cases(quick):
    days = 10 if quick else 60
    cfg = config_from_dict({"fleet_size": 200 if quick else 1000, "horizon_days": days, "defect_rate": 0.05})
    rc = cfg.ripple
    op = OperatingPoint(2.5, 1.0, 100.0)
    healthy = Machine(0, "bench", op, EnvironmentState(24.0, 40.0), 64, 200.0, op)
    sick = Machine(1, "bench", op, EnvironmentState(24.0, 40.0), 64, 200.0, op,
                   DefectSpec(0.02, 99, BitFlip(5), 2e-4))
    env = EnvironmentModel(cfg)
    cdf = kr.poisson_cdf_table(rc.trials_per_day)
    diurnal = diurnal_curve(cfg)
    empty = np.zeros(0, np.int64)
    args = (cdf, rc.slice_ms, diurnal, cfg.workload.noise, rc.tax_threshold, empty)
    mp_h, mp_s = machine_params(healthy, 0, cfg), machine_params(sick, 0, cfg)
    dp = defect_params(sick, 0, cfg.ripple_profile(), env)
    t1 = days * DAY_MS
    ivs = [(mid, 0, t1) for mid in range(200)]
    params = {mid: (kr.RippleMachineParams(mid * 7 + 1, mid * 7 + 2, mid * 7 + 3, 64, 0.5, 1), rc.tax_threshold)
              for mid in range(200)}
    n_lanes = 200_000 if quick else 1_000_000
    lanes = kp.pattern_lanes(int(Family.FmaFloat64), 12345, n_lanes, True)
    seg_s, seg_e = kexp.hour_segments(0, t1)
    rates = np.full(seg_s.size, 3.5)
    return [
        ("ripple slices, healthy machine", lambda nb: kr.run_slices(0, t1, mp_h, *args, None, nb)),
        ("ripple slices, defective machine", lambda nb: kr.run_slices(0, t1, mp_s, *args, dp, nb)),
        ("healthy batch, 200 machines", lambda nb: kr.healthy_batch(ivs, params, cdf, rc.slice_ms, diurnal,
                                                                    cfg.workload.noise, 10_000, nb)),
        (f"pattern lanes x{n_lanes:,}", lambda nb: kp.pattern_lanes(int(Family.FmaFloat64), 12345, n_lanes, nb)),
        (f"host FMA x{n_lanes:,}", lambda nb: arith.host_eval(int(Family.FmaFloat64), lanes, nb)),
        ("first hit, 10k iterations", lambda nb: kp.first_hit(int(Family.MulInt64), 7, 10_000, None, 99, 0.02,
                                                               1e-4, 1.0, 0.0, 0.0, float("inf"), 5, 0, 0, nb)),
        ("hourly exposure accrual", lambda nb: kexp.accrue(seg_s, seg_e, rates, 17, nb)),
        ("selfcheck 200k iterations", lambda nb: selfcheck(200_000, use_numba=nb).passed),
        (f"end-to-end run, {cfg.fleet_size} machines / {days} d",
         lambda nb: run(cfg, seed=0, use_numba=nb).to_dict()),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller inputs")
    args = ap.parse_args()

    print(f"{'case':<40} {'numba s':>10} {'numpy s':>10} {'speedup':>8}  match")
    for name, fn in cases(args.quick):
        ok = same(fn(True), fn(False))
        t_nb = best_of(lambda: fn(True), args.repeat)
        t_np = best_of(lambda: fn(False), max(1, args.repeat // 2))
        print(f"{name:<40} {t_nb:>10.4f} {t_np:>10.4f} {t_np / t_nb:>7.1f}x  {'yes' if ok else 'NO'}")


if __name__ == "__main__":
    main()
