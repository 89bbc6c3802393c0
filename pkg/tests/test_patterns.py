import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from _helpers import NOMINAL, make_machine, make_spec
from sdcsim.kernels import arith
from sdcsim.kernels import patterns as kp
from sdcsim.kernels.rng import MASK64, CounterStream
from sdcsim.model import BitFlip, ForcedConstant, MachineState, OffByDelta, OperatingPoint
from sdcsim.patterns import (Family, Mode, ModeStateMismatch, TestProfile, crafted_pattern, encode_operands,
                             execute_pattern, find_mismatch, generate_pattern, manifest_probability,
                             reference_bits, reference_eval, selfcheck)

FAMILIES = list(Family)
finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
i64 = st.integers(min_value=-(2**63), max_value=2**63 - 1)


def _signed(x):
    return x - (1 << 64) if x >> 63 else x


def ref_operands_mul(seed, n):
    """MulInt64 schedule re-derived from the keyed-hash definition."""
    def mix(z):
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
        return z ^ (z >> 31)

    def draw(k, c):
        return mix((k + (c + 1) * 0x9E3779B97F4A7C15) % 2**64)

    k = mix(seed ^ ((1 * kp.FAM_TAG_INT) % 2**64))
    return [(_signed(draw(k, 3 * i)), _signed(draw(k, 3 * i + 1))) for i in range(n)]


def scanner_profile(patterns, duration_s=60.0):
    return TestProfile(Mode.SCANNER, duration_s, tuple(patterns), 1.0, "t")


def ripple_profile(patterns):
    return TestProfile(Mode.RIPPLE, 0.04, tuple(patterns), 40.0, "r")


# -- generation --------------------------------------------------------------------

def test_generation_is_deterministic():
    a = generate_pattern(7, "MulInt64", 10, 50)
    b = generate_pattern(7, "MulInt64", 10, 50)
    assert a.operand_list() == b.operand_list()


def test_seed_changes_operands_and_matches_reference_hash():
    a = generate_pattern(7, "MulInt64", 10, 50).operand_list()
    b = generate_pattern(8, "MulInt64", 10, 50).operand_list()
    assert a == ref_operands_mul(7, 10)
    assert b == ref_operands_mul(8, 10)
    assert a != b


def test_single_iteration_boundary():
    p = generate_pattern(3, "FmaFloat64", 1, 1.0)
    assert len(p.operand_list()) == 1
    with pytest.raises(ValueError):
        generate_pattern(3, "FmaFloat64", 0, 1.0)


@pytest.mark.parametrize("family", FAMILIES)
def test_lane_lookup_matches_full_schedule(family, use_numba):
    p = generate_pattern(11, family, 300, 1.0)
    full = kp.pattern_lanes(int(family), p.seed, 300, use_numba)
    assert all(p.lane(j) == tuple(int(x) for x in full[j]) for j in range(300))


@pytest.mark.parametrize("family", FAMILIES)
def test_float_operands_are_finite_and_in_range(family):
    ops = generate_pattern(5, family, 2000, 1.0).operand_list()
    if family is Family.PowFloat64:
        assert all(0.5 <= b < 2.0 and 0 <= k <= 64 for b, k in ops)
    elif family is Family.FmaFloat64:
        assert all(-4.0 <= x < 4.0 for op in ops for x in op)
    elif family is Family.ShiftXorInt64:
        assert all(1 <= s <= 63 for _, s in ops)


# -- golden references ---------------------------------------------------------------

def test_mul_three_times_five():
    assert reference_eval(Family.MulInt64, (3, 5)) == 15


def test_pow_1_1_to_53_against_arbitrary_precision():
    with mpmath.workprec(400):
        exact = mpmath.mpf(1.1) ** 53  # 1.1 is the double nearest to 1.1
        want = float(exact)  # round-to-nearest from 400 bits
    got = reference_eval(Family.PowFloat64, (1.1, 53))
    assert got == want
    assert math.floor(got * 100) / 100 == 156.24  # 156.2472..., shown truncated


@given(i64)
def test_mul_identity(x):
    assert reference_eval(Family.MulInt64, (x, 1)) == x


@given(i64, i64)
def test_mul_wraps_like_two_complement(a, b):
    assert reference_eval(Family.MulInt64, (a, b)) == _signed((a * b) % 2**64)


@given(st.integers(min_value=0, max_value=MASK64), st.integers(min_value=1, max_value=63))
def test_shift_xor_is_xor_with_rotation(x, s):
    rot = ((x << s) | (x >> (64 - s))) % 2**64
    assert reference_eval(Family.ShiftXorInt64, (_signed(x), s)) == _signed(x ^ rot)


@given(finite, finite, finite)
def test_fma_single_rounding_against_mpmath(a, b, c):
    with mpmath.workprec(2200):
        exact = mpmath.mpf(a) * mpmath.mpf(b) + mpmath.mpf(c)
    want = float(Fraction(int(exact * 2**1100)) / 2**1100) if exact != 0 else 0.0
    got = reference_eval(Family.FmaFloat64, (a, b, c))
    assume(want != 0.0)
    assert got == want


@given(st.floats(min_value=0.5, max_value=2.0, exclude_max=True), st.integers(min_value=0, max_value=64))
def test_pow_against_mpmath(base, k):
    with mpmath.workprec(600):
        want = float(mpmath.mpf(base) ** k)
    assert reference_eval(Family.PowFloat64, (base, k)) == want


@pytest.mark.parametrize("family", FAMILIES)
def test_host_arithmetic_matches_golden(family, use_numba):
    p = generate_pattern(21, family, 3000, 1.0)
    lanes = p.lanes
    host = arith.host_eval(int(family), lanes, use_numba)
    gold = [reference_bits(family, tuple(int(x) for x in row)) for row in lanes]
    assert [int(x) for x in host] == gold


# -- manifestation -------------------------------------------------------------------

def test_nominal_conditions_give_exactly_p0():
    m = make_machine(defect=make_spec(p0=0.3, aging_onset=10.0, aging_ramp=5.0), age_days=100.0)
    assert manifest_probability(m.defect, m, Mode.RIPPLE, 0) == pytest.approx(0.3, abs=0)


def test_transition_gate_closed_in_scanner_mode():
    m = make_machine(defect=make_spec(transition_window=500.0))
    m.last_transition_ms = 0
    assert manifest_probability(m.defect, m, Mode.SCANNER, 100) == 0.0
    assert manifest_probability(m.defect, m, Mode.RIPPLE, 100) > 0.0


def test_voltage_acceleration_example():
    op = OperatingPoint(NOMINAL.frequency, 1.2, NOMINAL.current)
    m = make_machine(defect=make_spec(p0=0.4, elec_alpha=1.0), op=op)
    # independent scalar evaluation: p0 * (1 + alpha * |V - V0| / V0)
    assert manifest_probability(m.defect, m, Mode.SCANNER, 0) == pytest.approx(0.4 * (1 + 0.2 / 1.0), rel=1e-15)
    assert manifest_probability(m.defect, m, Mode.SCANNER, 0) == pytest.approx(0.48)


def test_soak_gate():
    m = make_machine(defect=make_spec(soak_min=120.0))
    assert manifest_probability(m.defect, m, Mode.SCANNER, 0) == 0.0
    m.continuous_test_seconds = 120.0
    assert manifest_probability(m.defect, m, Mode.SCANNER, 0) == 0.5


@given(st.floats(0, 0.3), st.floats(0, 0.3), st.floats(0, 0.3), st.floats(0, 0.3))
def test_probability_monotone_in_voltage_and_frequency(dv1, dv2, df1, df2):
    spec = make_spec(p0=0.01, elec_alpha=0.7, elec_beta=0.4)
    lo_v, hi_v = sorted((dv1, dv2))
    lo_f, hi_f = sorted((df1, df2))

    def p(dv, df):
        op = OperatingPoint(NOMINAL.frequency * (1 - df), NOMINAL.voltage * (1 + dv), NOMINAL.current)
        m = make_machine(defect=spec, op=op)
        return manifest_probability(spec, m, Mode.SCANNER, 0)

    assert p(lo_v, lo_f) <= p(hi_v, lo_f) <= p(hi_v, hi_f)


@given(st.floats(-10, 90), st.floats(-10, 90))
def test_probability_monotone_in_temperature(t1, t2):
    spec = make_spec(p0=0.01, thermal_threshold=30.0, thermal_gamma=0.05)
    lo, hi = sorted((t1, t2))
    pl = manifest_probability(spec, make_machine(defect=spec, temperature=lo), Mode.SCANNER, 0)
    ph = manifest_probability(spec, make_machine(defect=spec, temperature=hi), Mode.SCANNER, 0)
    assert pl <= ph


@given(st.floats(0, 400), st.floats(0, 400))
def test_probability_monotone_in_age(a1, a2):
    spec = make_spec(p0=0.2, aging_onset=100.0, aging_ramp=50.0)
    lo, hi = sorted((a1, a2))
    pl = manifest_probability(spec, make_machine(defect=spec, age_days=lo), Mode.SCANNER, 0)
    ph = manifest_probability(spec, make_machine(defect=spec, age_days=hi), Mode.SCANNER, 0)
    assert pl <= ph


def test_hotter_datacenter_manifests_more():
    spec = make_spec(p0=0.01, thermal_threshold=25.0, thermal_gamma=0.05)
    cool = manifest_probability(spec, make_machine(defect=spec, temperature=22.0), Mode.RIPPLE, 0)
    hot = manifest_probability(spec, make_machine(defect=spec, temperature=30.0), Mode.RIPPLE, 0)
    assert hot > cool


def test_subset_measure_matches_rho():
    rho = 0.2
    lanes = generate_pattern(99, Family.FmaFloat64, 100_000, 1.0).lanes
    frac = kp.faulty_mask(777, rho, int(Family.FmaFloat64), lanes).mean()
    assert abs(frac - rho) <= 3 * math.sqrt(rho * (1 - rho) / lanes.shape[0])


# -- execution -----------------------------------------------------------------------

@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("mode", [Mode.SCANNER, Mode.RIPPLE])
def test_defect_free_machine_always_passes(family, mode):
    state = MachineState.TESTING_SCANNER if mode is Mode.SCANNER else MachineState.PRODUCTION
    m = make_machine(state=state)
    prof = scanner_profile([]) if mode is Mode.SCANNER else ripple_profile([])
    st_ = CounterStream(5)
    for i in range(20):
        rec = execute_pattern(m, generate_pattern(i, family, 200, 1.0), prof, 1000 * i, st_)
        assert rec.passed


def test_forced_zero_on_pow_reports_the_motivating_example():
    spec = make_spec(rho=1.0, p0=1.0, corruption=ForcedConstant(0))
    m = make_machine(defect=spec, state=MachineState.TESTING_SCANNER)
    pat = crafted_pattern("PowFloat64", [(1.1, 53)], slice_budget_ms=1.0)
    rec = execute_pattern(m, pat, scanner_profile([pat]), 0, CounterStream(1))
    assert not rec.passed
    mm = rec.outcome
    assert mm.iteration_index == 0 and mm.observed == 0.0 and math.floor(mm.expected * 100) / 100 == 156.24
    assert mm.operands == (1.1, 53)


def test_transition_defect_never_fails_out_of_production(use_numba):
    spec = make_spec(rho=1.0, p0=1.0, transition_window=2000.0)
    m = make_machine(defect=spec, state=MachineState.TESTING_SCANNER)
    prof = scanner_profile([])
    st_ = CounterStream(2)
    for i in range(50):
        rec = execute_pattern(m, generate_pattern(i, Family.MulInt64, 500, 1000.0), prof, i, st_, use_numba)
        assert rec.passed


def test_execution_is_reproducible(use_numba):
    spec = make_spec(rho=0.3, p0=0.05, corruption=OffByDelta(3))
    pat = generate_pattern(4, Family.FmaFloat64, 400, 40.0)
    recs = []
    for _ in range(2):
        m = make_machine(defect=spec)
        recs.append(execute_pattern(m, pat, ripple_profile([pat]), 500, CounterStream(9, 3), use_numba))
    assert recs[0] == recs[1]


def test_mode_state_mismatch_is_an_error():
    m = make_machine(state=MachineState.PRODUCTION)
    pat = generate_pattern(1, Family.MulInt64, 10, 1.0)
    with pytest.raises(ModeStateMismatch):
        execute_pattern(m, pat, scanner_profile([pat]), 0, CounterStream(1))
    m.state = MachineState.MAINTENANCE
    with pytest.raises(ModeStateMismatch):
        execute_pattern(m, pat, ripple_profile([pat]), 0, CounterStream(1))


@given(st.integers(0, 2**32), st.sampled_from(FAMILIES), st.floats(0.01, 1.0), st.floats(0.001, 1.0),
       st.integers(0, 50))
def test_first_hit_numba_numpy_parity(seed, family, rho, p, start):
    args = (int(family), seed, 200, None, 4242, rho, p, 0.2, 0.0, 0.0, math.inf, 77, 5, start)
    assert kp.first_hit(*args, use_numba=True) == kp.first_hit(*args, use_numba=False)


def test_mismatch_observed_differs_from_expected():
    spec = make_spec(rho=1.0, p0=1.0, corruption=BitFlip(0))
    m = make_machine(defect=spec)
    pat = generate_pattern(3, Family.MulInt64, 10, 1.0)
    mm = find_mismatch(m, pat, Mode.RIPPLE, 0, 1, 0, 1.0, 0.0)
    assert mm is not None and mm.iteration_index == 0
    assert mm.observed == mm.expected ^ 1 or (mm.observed - mm.expected) % 2**64 in (1, 2**64 - 1)


def test_forced_constant_equal_to_golden_is_benign():
    # corruption to the value the golden result already has leaves nothing to detect
    spec = make_spec(rho=1.0, p0=1.0, corruption=ForcedConstant(15))
    m = make_machine(defect=spec)
    pat = crafted_pattern("MulInt64", [(3, 5)], iterations=4)
    assert find_mismatch(m, pat, Mode.RIPPLE, 0, 1, 0, 1.0, 0.0) is None


def test_encode_roundtrip_for_crafted_floats():
    enc = encode_operands(Family.PowFloat64, (1.1, 53))
    assert enc[0] == int(np.float64(1.1).view(np.uint64)) and enc[1] == 53


def test_selfcheck_small_run_passes(use_numba):
    rep = selfcheck(20_000, use_numba=use_numba)
    assert rep.passed and rep.iterations >= 20_000
    assert {f.family for f in rep.families} == {f.name for f in Family}
