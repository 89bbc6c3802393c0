import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from _helpers import make_machine, make_spec
from sdcsim import config_from_dict
from sdcsim.dynamics import EnvironmentModel
from sdcsim.kernels import ripple as kr
from sdcsim.kernels.rng import CounterStream
from sdcsim.model import DAY_MS, MachineState, sample_fleet
from sdcsim.patterns import Mode, TestProfile, generate_pattern
from sdcsim.ripple import (assign_cohort, compute_tax, cores_testable, defect_params, descale, diurnal_curve,
                           machine_params, max_window_tax, run_shadow_experiment, tick_schedule)


@pytest.fixture(scope="module")
def cfg():
    return config_from_dict({"fleet_size": 200, "horizon_days": 30})


# -- tax -----------------------------------------------------------------------------

def test_tax_arithmetic():
    # 40 slices of 40 ms in a day on 64 cores
    starts = np.arange(40) * 1_000_000.0
    tax = compute_tax(starts, 0, DAY_MS, 40.0, 64)
    assert tax == pytest.approx(40 * 40 / (86_400_000 * 64))
    assert f"{tax:.1e}" == "2.9e-07"


def test_tax_clips_slices_at_window_edges():
    assert compute_tax([-20.0, 90.0], 0, 100, 40.0, 1) == pytest.approx((20 + 10) / 100)
    with pytest.raises(ValueError):
        compute_tax([], 5, 5, 40.0, 1)


@given(st.lists(st.integers(0, 500), max_size=30), st.integers(1, 25), st.integers(30, 120), st.integers(1, 4))
def test_max_window_tax_against_brute_force(starts, slice_ms, window, cores):
    # with integer starts and lengths the covered time is linear between integer window positions
    brute = max((compute_tax(starts, w, w + window, slice_ms, cores)
                 for w in range(-window - 1, 500 + slice_ms + 2)), default=0.0) if starts else 0.0
    assert max_window_tax(starts, slice_ms, cores, window_ms=window) == pytest.approx(brute, abs=1e-12)


@given(st.integers(0, 128), st.integers(0, 128), st.integers(1, 128), st.integers(0, 8))
def test_descale_non_increasing_in_load(b1, b2, cores, ceiling):
    b1, b2 = sorted((min(b1, cores), min(b2, cores)))
    assert cores_testable(b2, cores, ceiling) <= cores_testable(b1, cores, ceiling)
    assert cores_testable(cores, cores, ceiling) == 0


def test_descale_uses_machine_load(cfg):
    assert descale(make_machine(cores_busy=64), cfg) == 0
    assert descale(make_machine(cores_busy=10), cfg) == cfg.ripple.max_test_cores


# -- batched kernel --------------------------------------------------------------------

def _runner_args(cfg, machine, theta=None):
    rc = cfg.ripple
    return (machine_params(machine, 7, cfg), kr.poisson_cdf_table(rc.trials_per_day), rc.slice_ms,
            diurnal_curve(cfg), cfg.workload.noise, rc.tax_threshold if theta is None else theta)


def test_slice_volume_matches_rate(cfg, use_numba):
    m = make_machine(load_level=0.3)
    mp, cdf, slice_ms, diurnal, noise, theta = _runner_args(cfg, m)
    b = kr.run_slices(0, 30 * DAY_MS, mp, cdf, slice_ms, diurnal, noise, theta, np.zeros(0, np.int64),
                      use_numba=use_numba)
    want = cfg.ripple.trials_per_day * 30
    assert b.skipped_cores == 0 and b.skipped_tax == 0
    assert abs(b.executed.size - want) <= 3 * math.sqrt(want)
    assert np.all(np.diff(b.executed) >= 0) and b.executed[0] >= 0 and b.executed[-1] < 30 * DAY_MS


def test_splitting_an_interval_changes_nothing(cfg, use_numba):
    m = make_machine()
    mp, cdf, slice_ms, diurnal, noise, theta = _runner_args(cfg, m)
    whole = kr.run_slices(0, 5 * DAY_MS, mp, cdf, slice_ms, diurnal, noise, theta, np.zeros(0, np.int64),
                          use_numba=use_numba)
    cut = 2 * DAY_MS + 12_345
    a = kr.run_slices(0, cut, mp, cdf, slice_ms, diurnal, noise, theta, np.zeros(0, np.int64), use_numba=use_numba)
    b = kr.run_slices(cut, 5 * DAY_MS, mp, cdf, slice_ms, diurnal, noise, theta, a.executed, use_numba=use_numba)
    assert np.array_equal(whole.executed, np.concatenate((a.executed, b.executed)))


def test_tax_guard_binds_under_stress(use_numba):
    cfg = config_from_dict({"fleet_size": 10, "ripple": {"trials_per_day": 2000, "slice_ms": 40,
                                                           "tax_threshold": 9.3e-4}})
    m = make_machine(core_count=1, load_level=0.01)
    mp, cdf, slice_ms, diurnal, noise, theta = _runner_args(cfg, m)
    b = kr.run_slices(0, 20 * DAY_MS, mp, cdf, slice_ms, diurnal, noise, theta, np.zeros(0, np.int64),
                      use_numba=use_numba)
    assert b.skipped_tax > 0
    assert max_window_tax(b.executed, slice_ms, 1) <= theta + slice_ms / DAY_MS


def test_saturated_machine_runs_nothing(cfg):
    m = make_machine(load_level=1.0)
    mp, cdf, slice_ms, diurnal, noise, theta = _runner_args(cfg, m)
    flat = np.ones(24)  # no diurnal trough, no noise: every core busy all day
    b = kr.run_slices(0, 3 * DAY_MS, mp, cdf, slice_ms, flat, 0.0, theta, np.zeros(0, np.int64))
    assert b.executed.size == 0 and b.skipped_cores == b.candidates > 0


def test_numba_numpy_parity_on_defective_machine(cfg):
    env = EnvironmentModel(cfg, 7)
    prof = cfg.ripple_profile()
    for spec in (make_spec(0.05, 0.02), make_spec(0.02, 0.05, transition_window=500.0),
                 make_spec(0.1, 0.3, soak_min=90.0), make_spec(0.3, 0.01, aging_onset=105.0, aging_ramp=3.0)):
        m = make_machine(defect=spec)
        env.refresh(m, 0)
        dp = defect_params(m, 7, prof, env)
        args = _runner_args(cfg, m)
        out = [kr.run_slices(0, 10 * DAY_MS, *args, np.zeros(0, np.int64), dp, use_numba=nb) for nb in (True, False)]
        assert np.array_equal(out[0].executed, out[1].executed)
        assert (out[0].hit_sid, out[0].hit_start, out[0].hit_pattern, out[0].hit_iteration, out[0].hit_seed) == \
               (out[1].hit_sid, out[1].hit_start, out[1].hit_pattern, out[1].hit_iteration, out[1].hit_seed)


def test_healthy_batch_equals_per_interval_runs(cfg):
    ms = [make_machine(mid=i, load_level=0.2 + 0.2 * i) for i in range(3)]
    mp = {m.id: (machine_params(m, 7, cfg), cfg.ripple.tax_threshold) for m in ms}
    ivs = [(0, 0, DAY_MS), (0, DAY_MS + 5000, 3 * DAY_MS), (1, 0, 2 * DAY_MS), (2, 100, 4 * DAY_MS)]
    args = _runner_args(cfg, ms[0])
    want = 0
    carry = {}
    for mid, t0, t1 in ivs:
        b = kr.run_slices(t0, t1, mp[mid][0], *args[1:], carry.get(mid, np.zeros(0, np.int64)))
        carry[mid] = np.concatenate((carry.get(mid, np.zeros(0, np.int64)), b.executed))
        want += b.executed.size
    for nb in (True, False):
        got = kr.healthy_batch(ivs, mp, args[1], args[2], args[3], args[4], 10_000, nb)
        assert got[0] == want


# -- single-slice path ----------------------------------------------------------------

def test_tick_schedule_refuses_non_production(cfg):
    prof = cfg.ripple_profile()
    with pytest.raises(ValueError):
        tick_schedule(make_machine(state=MachineState.DRAINING), cfg, 0, CounterStream(1), prof)


def test_tick_schedule_rate(cfg):
    prof = cfg.ripple_profile()
    m = make_machine()
    st_ = CounterStream(3)
    ticks = 1440 * 20  # 20 days of one-minute ticks
    ran = sum(tick_schedule(m, cfg, i * 60_000, st_, prof).executed for i in range(ticks))
    want = 20 * cfg.ripple.trials_per_day
    assert abs(ran - want) <= 4 * math.sqrt(want)


# -- shadow A/B ------------------------------------------------------------------------

def test_cohorts_are_deterministic_disjoint_and_balanced():
    a = [assign_cohort(i, 11) for i in range(4000)]
    assert a == [assign_cohort(i, 11) for i in range(4000)]
    assert abs(a.count("A") - 2000) <= 4 * math.sqrt(1000)
    assert a != [assign_cohort(i, 12) for i in range(4000)]


@pytest.fixture(scope="module")
def ab_fleet():
    cfg = config_from_dict({"fleet_size": 1200, "defect_rate": 0.5, "horizon_days": 30,
                            "defect_mix": {"BothDetectable": 1.0}})
    return cfg, [m for m in sample_fleet(cfg, 4) if m.defect is not None]


def _rates(rep):
    return [(c.detections, c.defective) for c in rep.cohorts]


def test_aa_experiment_shows_no_difference(ab_fleet):
    cfg, fleet = ab_fleet
    v = [generate_pattern(1, "MulInt64", 64, 40.0)]
    rep = run_shadow_experiment(cfg, fleet, (v, v), experiment_seed=5, duration_days=0.5)
    (da, na), (db, nb) = _rates(rep)
    pa, pb = da / na, db / nb
    pool = (da + db) / (na + nb)
    assert abs(pa - pb) <= 3 * math.sqrt(pool * (1 - pool) * (1 / na + 1 / nb))
    assert rep.verdict == "pass"


def test_doubling_iterations_detects_more(ab_fleet):
    cfg, fleet = ab_fleet
    va = [generate_pattern(1, "MulInt64", 32, 40.0)]
    vb = [generate_pattern(1, "MulInt64", 64, 40.0)]
    rep = run_shadow_experiment(cfg, fleet, (va, vb), experiment_seed=5, duration_days=0.5)
    (da, na), (db, nb) = _rates(rep)
    assert db / nb > da / na
    assert all(c.measured_tax <= rep.theta for c in rep.cohorts)
