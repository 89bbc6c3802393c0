"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (printed in the terminal summary)
before asserting.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

from _helpers import make_machine, record
from oracles.detection_oracle import detection_probability
from sdcsim import config_from_dict, run
from sdcsim.analytics import NOT_REACHED, DetectionSets, aggregate, build_report, coverage_partition
from sdcsim.config import load_config
from sdcsim.kernels import patterns as kp
from sdcsim.kernels.rng import CounterStream
from sdcsim.model import BitFlip, DefectClass, DefectSpec, MachineState, OperatingPoint, sample_fleet
from sdcsim.patterns import (Family, Mode, TestProfile, execute_pattern, generate_pattern, manifest_probability,
                             selfcheck)
from sdcsim.replay import replay

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
SEEDS = range(20)


@pytest.fixture(scope="module")
def default_config():
    return load_config(SCENARIOS / "default.json")


@pytest.fixture(scope="module")
def sweep(default_config):
    t0 = time.perf_counter()
    reports = [build_report(run(default_config, seed=s)) for s in SEEDS]
    return reports, time.perf_counter() - t0


def _num(v):
    return None if v == NOT_REACHED else v


# -- 1-3: the calibrated default scenario ------------------------------------------------

def test_criterion_1_coverage_partition(sweep):
    reports, wall = sweep
    agg = aggregate(reports)
    part = agg["pooled_partition"]
    got = (part["unique_scanner"], part["unique_ripple"], part["common"])
    want = (0.23, 0.07, 0.70)
    ok = all(abs(g - w) <= 0.05 for g, w in zip(got, want)) and wall <= 300.0
    record(1, ok, f"pooled partition {tuple(round(g, 3) for g in got)} vs {want} +/-0.05 over "
                  f"{len(reports)} seeds; wall {wall:.0f} s <= 300 s")
    assert ok


def test_criterion_2_time_to_coverage(sweep):
    reports, _ = sweep
    good = 0
    for r in reports:
        rip = _num(r.time_to_common["ripple"]["0.70"])
        own = _num(r.time_to_own["scanner"]["0.95"])
        good += rip is not None and rip <= 20.0 and own is not None and 120.0 <= own <= 200.0
    ok = good >= math.ceil(0.9 * len(reports))
    record(2, ok, f"ripple t70(common) <= 20 d and scanner t95(own) in [120, 200] d in {good}/{len(reports)} seeds "
                  "(need >= 90%)")
    assert ok


def test_criterion_3_per_test_ratio(sweep):
    reports, _ = sweep
    ratios = [r.per_test_ratio for r in reports]
    ok = all(x is not None and 700.0 <= x <= 3000.0 for x in ratios)
    record(3, ok, f"scanner/ripple seconds per test in [{min(ratios):.0f}, {max(ratios):.0f}] (need [700, 3000])")
    assert ok


def test_ripple_reaches_common_coverage_first(sweep):
    reports, _ = sweep
    first = 0
    for r in reports:
        rip, scan = _num(r.time_to_common["ripple"]["0.70"]), _num(r.time_to_common["scanner"]["0.70"])
        first += rip is not None and (scan is None or rip < scan)
    assert first >= math.ceil(0.95 * len(reports))


# -- 4: soundness ---------------------------------------------------------------------------

def test_criterion_4_no_false_positives():
    cfg = config_from_dict({"fleet_size": 2000, "defect_rate": 0.0, "horizon_days": 180})
    fleet = sample_fleet(cfg, 0)
    ripple = cfg.ripple_profile()
    scanner = cfg.scanner_reference_profile()
    mismatches = executions = 0
    st = CounterStream(77)
    for i in range(1_000_000):
        m = fleet[i % len(fleet)]
        if i & 1:
            m.state, prof = MachineState.TESTING_SCANNER, scanner
        else:
            m.state, prof = MachineState.PRODUCTION, ripple
        pat = prof.patterns[(i >> 1) % len(prof.patterns)].reseeded(i)
        mismatches += not execute_pattern(m, pat, prof, i, st).passed
        executions += 1
    res = run(cfg, seed=0)
    detections = len(res.scanner_detected) + len(res.ripple_detected) + len(res.first_detection)
    ok = mismatches == 0 and detections == 0 and executions == 1_000_000
    record(4, ok, f"{executions:,} executions on a defect-free fleet -> {mismatches} mismatches; "
                  f"defect-free 180 d run ({res.totals.ripple_tests:,} slices) -> {detections} detections")
    assert ok


# -- 5: manifestation oracle -----------------------------------------------------------------

def _random_spec(rng, age):
    return DefectSpec(
        faulty_fraction=float(rng.uniform(0.05, 0.6)), subset_seed=int(rng.integers(0, 2**63)),
        corruption=BitFlip(int(rng.integers(0, 64))), base_prob=float(np.exp(rng.uniform(np.log(1e-3), np.log(0.3)))),
        elec_alpha=float(rng.uniform(0, 0.5)), elec_beta=float(rng.uniform(0, 0.5)),
        thermal_threshold=float(rng.uniform(20, 40)), thermal_gamma=float(rng.uniform(0, 0.05)),
        # onset already passed, so the age factor is continuous in (0, 1] rather than a gate
        aging_onset=age - float(rng.uniform(1, 300)), aging_ramp=float(rng.uniform(1, 400)))


def _random_machine(rng, spec, age):
    op = OperatingPoint(2.5 * (1 + rng.uniform(-0.05, 0.05)), 1.0 * (1 + rng.uniform(-0.05, 0.05)), 100.0)
    return make_machine(defect=spec, op=op, temperature=float(rng.uniform(15, 45)),
                        age_days=age)


def _single_trial_rate(spec, machine, seed, trials=100_000):
    """Mismatches per in-subset iteration, running patterns through the execution path."""
    prof = TestProfile(Mode.RIPPLE, 0.04, (generate_pattern(seed, Family.MulInt64, 2000, 1000.0),), 1.0)
    st = CounterStream(seed)
    n = hits = i = 0
    while n < trials:
        fam = list(Family)[i % 4]
        pat = generate_pattern(seed + i, fam, 2000, 1000.0)
        mask = kp.faulty_mask(spec.subset_seed, spec.faulty_fraction, int(fam), pat.lanes)
        rec = execute_pattern(machine, pat, prof, 0, st)
        if rec.passed:
            n += int(mask.sum())
        else:
            j = rec.outcome.iteration_index
            assert mask[j]
            n += int(mask[: j + 1].sum())
            hits += 1
        i += 1
    return hits, n


def _pattern_rate(machine, seed, n_iter=64, runs=20_000):
    prof = TestProfile(Mode.RIPPLE, 0.04, (generate_pattern(seed, Family.MulInt64, n_iter, 40.0),), 1.0)
    st = CounterStream(seed, 1)
    base = prof.patterns[0]
    det = sum(not execute_pattern(machine, base.reseeded(k), prof, 0, st).passed for k in range(runs))
    return det, runs


def test_criterion_5_manifestation_oracle():
    rng = np.random.default_rng(20240501)
    lines, ok = [], True
    for k in range(10):
        age = float(rng.uniform(300, 600))
        spec = _random_spec(rng, age)
        m = _random_machine(rng, spec, age)
        p = manifest_probability(spec, m, Mode.RIPPLE, 0)
        hits, n = _single_trial_rate(spec, m, 1000 * (k + 1))
        z1 = (hits / n - p) / math.sqrt(p * (1 - p) / n)
        det, runs = _pattern_rate(m, 7000 + k)
        q = float(detection_probability(spec.faulty_fraction, p, 64))
        z2 = (det / runs - q) / math.sqrt(q * (1 - q) / runs)
        ok &= abs(z1) <= 3 and abs(z2) <= 3
        lines.append(f"{z1:+.2f}/{z2:+.2f}")
    record(5, ok, "z (single trial / pattern level) for 10 specs: " + " ".join(lines) + "  (need |z| <= 3)")
    assert ok


# -- 6: transition gate -------------------------------------------------------------------

def test_criterion_6_transition_exclusivity():
    cfg = load_config(SCENARIOS / "transition_only.json")
    lines, ok = [], True
    for seed in range(3):
        res = run(cfg, seed=seed)
        gt = set(res.ground_truth)
        assert all(c is DefectClass.RIPPLE_TRANSITION for c in res.ground_truth.values())
        rec = len(set(res.ripple_detected) & gt) / len(gt)
        ok &= not res.scanner_detected and rec >= 0.95
        lines.append(f"seed {seed}: scanner {len(res.scanner_detected)}, ripple recall {rec:.3f}")
    record(6, ok, f"transition-only fleet over {cfg.horizon_days:g} d; " + "; ".join(lines))
    assert ok


# -- 7-8: determinism and tax bound on the default scenario ------------------------------------

@pytest.fixture(scope="module")
def logged_default(default_config, tmp_path_factory):
    d = tmp_path_factory.mktemp("logs")
    out = []
    for i in range(2):
        path = d / f"events{i}.jsonl"
        with open(path, "w") as fh:
            res = run(default_config, seed=0, log=fh)
        out.append((path, res))
    return out


def _sha(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def test_criterion_7_determinism(logged_default):
    (pa, ra), (pb, rb) = logged_default
    from sdcsim.analytics import emit_report

    log_a, log_b = _sha(pa), _sha(pb)
    rep_a = hashlib.sha256(emit_report(build_report(ra)).encode()).hexdigest()
    rep_b = hashlib.sha256(emit_report(build_report(rb)).encode()).hexdigest()
    ok = log_a == log_b and rep_a == rep_b
    record(7, ok, f"two runs of seed 0: log sha256 {log_a[:12]} / {log_b[:12]}, report {rep_a[:12]} / {rep_b[:12]}")
    assert ok


def test_criterion_8_tax_bound(default_config, logged_default):
    path, res = logged_default[0]
    with open(path) as fh:
        rep = replay(fh, default_config, seed=0)
    rc = default_config.ripple
    min_cores = min(mc.core_count for mc in default_config.machine_classes)
    fleet_limit = min(rc.theta_for(mc.workload) for mc in default_config.machine_classes) + rc.slice_ms / (
        86_400_000 * min_cores)
    worst = max(rep.tax.values())
    ok = rep.ok and res.totals.ripple_max_tax <= fleet_limit
    record(8, ok, f"replay of {rep.events:,} events: {len(rep.violations)} violations; max 24 h tax over "
                  f"{len(rep.tax)} traced machines {worst:.3g}; kernel max over all machines "
                  f"{res.totals.ripple_max_tax:.3g} <= {fleet_limit:.4g}")
    assert ok, rep.violations[:5]


# -- 9: partition identity ------------------------------------------------------------------

def test_criterion_9_partition_identity():
    rng = np.random.default_rng(99)
    worst_sum = 0.0
    exact = mismatched = 0
    for case in range(10_000):
        small = case % 2 == 0
        universe = 20 if small else int(rng.integers(1, 5000))
        size_a = int(rng.integers(0, min(universe, 20 if small else 2000) + 1))
        size_b = int(rng.integers(0, min(universe, 20 if small else 2000) + 1))
        a = set(rng.choice(universe, size_a, replace=False).tolist())
        b = set(rng.choice(universe, size_b, replace=False).tolist())
        if not a | b:
            continue
        gt = {m: DefectClass.BOTH for m in a | b}
        part = coverage_partition(DetectionSets({m: 0 for m in a}, {m: 0 for m in b}, gt))
        worst_sum = max(worst_sum, abs(math.fsum(part) - 1.0))
        if small:
            counts = [0, 0, 0]
            for x in range(universe):
                if x in a and x not in b:
                    counts[0] += 1
                elif x in b and x not in a:
                    counts[1] += 1
                elif x in a and x in b:
                    counts[2] += 1
            total = sum(counts)
            exact += 1
            mismatched += part != tuple(c / total for c in counts)
    ok = worst_sum <= 1e-12 and mismatched == 0
    record(9, ok, f"10,000 set pairs: max |sum - 1| = {worst_sum:.1e}; {mismatched}/{exact} small cases "
                  "differ from enumeration")
    assert ok


# -- 10: real host --------------------------------------------------------------------------

def test_criterion_10_selfcheck():
    t0 = time.perf_counter()
    rep = selfcheck(1_000_000)
    wall = time.perf_counter() - t0
    ok = rep.passed and rep.iterations >= 1_000_000 and wall <= 60.0 and len(rep.families) == len(Family)
    record(10, ok, f"selfcheck {rep.iterations:,} iterations over {len(rep.families)} families: "
                   f"{'Pass' if rep.passed else 'FAIL'} in {wall:.1f} s")
    assert ok
