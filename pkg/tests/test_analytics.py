import csv
import io
import json
import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from sdcsim.analytics import (NOT_REACHED, CoverageReport, DetectionSets, EmptyUnion, aggregate, build_report,
                              coverage_partition, emit_report, mean_ci, recall, time_to_fraction)
from sdcsim.model import DAY_MS, DefectClass
from sdcsim.sim import InvariantViolation, run

B = DefectClass.BOTH


def sets(scanner, ripple, extra=()):
    universe = set(scanner) | set(ripple) | set(extra)
    return DetectionSets({m: 0 for m in scanner}, {m: 0 for m in ripple}, {m: B for m in universe})


def brute_partition(a, b, universe):
    only_a = only_b = both = 0
    for x in universe:
        ina, inb = x in a, x in b
        only_a += ina and not inb
        only_b += inb and not ina
        both += ina and inb
    n = only_a + only_b + both
    return only_a / n, only_b / n, both / n


def test_worked_example():
    assert coverage_partition(sets({1, 2, 3}, {3, 4})) == (0.5, 0.25, 0.25)


def test_table_style_example():
    # 23 scanner-only, 7 ripple-only, 70 both
    s = sets(set(range(93)), set(range(23, 100)))
    assert coverage_partition(s) == pytest.approx((0.23, 0.07, 0.70), abs=0)


def test_empty_union():
    with pytest.raises(EmptyUnion):
        coverage_partition(sets(set(), set(), {1}))


def test_detection_outside_ground_truth_is_rejected():
    with pytest.raises(InvariantViolation):
        DetectionSets({5: 0}, {}, {1: B})


small_sets = st.sets(st.integers(0, 19), max_size=20)


@given(small_sets, small_sets)
def test_partition_matches_enumeration(a, b):
    if not a | b:
        return
    assert coverage_partition(sets(a, b)) == brute_partition(a, b, range(20))


@given(st.sets(st.integers(0, 10**6), max_size=300), st.sets(st.integers(0, 10**6), max_size=300))
def test_partition_sums_to_one(a, b):
    if not a | b:
        return
    assert abs(math.fsum(coverage_partition(sets(a, b))) - 1.0) <= 1e-12


# -- time to fraction ------------------------------------------------------------

def brute_time(times, ref, x):
    ref = set(ref)
    for t in sorted(set(times.values())):
        got = sum(1 for m, tm in times.items() if m in ref and tm <= t)
        if Fraction(got, len(ref)) >= Fraction(x):
            return t / DAY_MS
    return NOT_REACHED


def test_time_to_fraction_examples():
    times = {1: 1 * DAY_MS, 2: 2 * DAY_MS, 3: 10 * DAY_MS}
    assert time_to_fraction(times, {1, 2, 3, 4}, 0.5) == 2.0
    assert time_to_fraction(times, {1, 2, 3, 4}, 0.75) == 10.0
    assert time_to_fraction(times, {1, 2, 3, 4}, 1.0) == NOT_REACHED
    assert time_to_fraction(times, {3}, 0.7) == 10.0
    with pytest.raises(ValueError):
        time_to_fraction(times, {1}, 0.0)
    with pytest.raises(ValueError):
        time_to_fraction(times, set(), 0.5)


times_st = st.dictionaries(st.integers(0, 30), st.integers(0, 180 * DAY_MS), max_size=30)


@given(times_st, st.sets(st.integers(0, 30), min_size=1), st.sampled_from([0.1, 0.5, 0.7, 0.9, 0.95, 1.0]))
def test_time_to_fraction_matches_scan(times, ref, x):
    assert time_to_fraction(times, ref, x) == brute_time(times, ref, x)


@given(times_st, st.sets(st.integers(0, 30), min_size=1), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_time_to_fraction_monotone(times, ref, x1, x2):
    lo, hi = sorted((x1, x2))
    a, b = time_to_fraction(times, ref, lo), time_to_fraction(times, ref, hi)
    if a == NOT_REACHED:
        assert b == NOT_REACHED
    elif b != NOT_REACHED:
        assert a <= b


def test_recall():
    assert recall({1, 2}, {1, 2, 3, 4}) == 0.5
    assert recall({1}, set()) is None


# -- reports -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def result():
    from sdcsim import config_from_dict
    return run(config_from_dict({"fleet_size": 500, "horizon_days": 60, "defect_rate": 0.06}), seed=1)


def test_report_is_deterministic_in_every_format(result):
    for fmt in ("json", "csv", "md"):
        assert emit_report(build_report(result), fmt) == emit_report(build_report(result), fmt)


def test_json_report_fields(result):
    d = json.loads(emit_report(build_report(result), "json"))
    part = d["partition"]
    assert math.fsum(part.values()) == pytest.approx(1.0, abs=1e-12)
    assert d["totals"]["per_month"]["ripple_tests"] == pytest.approx(d["totals"]["raw"]["ripple_tests"] * 30 / 60)
    assert d["per_test_ratio"] > 100


def test_csv_report_parses(result):
    rows = list(csv.reader(io.StringIO(emit_report(build_report(result), "csv"))))
    assert rows[0] == ["metric", "value"]
    keys = {r[0] for r in rows[1:]}
    assert {"partition.common", "totals.raw.scanner_tests", "per_test_ratio"} <= keys


def test_markdown_table_rows(result):
    md = emit_report(build_report(result), "md").splitlines()
    assert md[0] == "| Metric | Fleetscanner | Ripple |"
    assert [r.split("|")[1].strip() for r in md[2:]] == [
        "Tests executed", "Testing time (fleet-seconds)", "Performance aware", "Unique SDC coverage",
        "Time to equivalent SDC coverage"]


def test_unknown_format(result):
    with pytest.raises(ValueError):
        emit_report(build_report(result), "xml")


def test_report_without_detections():
    from sdcsim import config_from_dict
    r = build_report(run(config_from_dict({"fleet_size": 30, "defect_rate": 0.0, "horizon_days": 2}), seed=0))
    assert r.partition is None and r.per_test_ratio is None or r.partition is None
    assert "no detections" in emit_report(r, "md")
    assert json.loads(emit_report(r, "json"))["partition"] == "no detections"


def test_aggregate_pools_counts(result):
    r1 = build_report(result)
    agg = aggregate([r1, r1])
    assert agg["pooled_counts"]["union"] == 2 * r1.counts["union"]
    assert agg["pooled_partition"]["common"] == pytest.approx(r1.common)


def test_mean_ci():
    assert mean_ci([]) == {"n": 0, "mean": None, "ci": None}
    assert mean_ci([2.0])["ci"] is None
    d = mean_ci([1.0, 3.0])
    assert d["mean"] == 2.0 and d["ci"] == pytest.approx(1.96 * math.sqrt(2 / 2))
