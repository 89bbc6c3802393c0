"""In-production testing: millisecond slices co-located with the workload.

The simulator hands Ripple whole production intervals. For each one the
batched kernel decides which Poisson-scheduled slices run (free core, tax
guard) and where a defective machine first mismatches; a mismatch becomes a
``TestSliceDue`` event at the moment the failing iteration finishes and goes
through the same quarantine path as the scanner.

``tick_schedule`` is the one-slice-at-a-time form of the same policy, used for
direct experiments on a single machine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .config import SimConfig
from .kernels import patterns as kp
from .kernels import ripple as kr
from .kernels.rng import CounterStream, derive_key, mix64_int
from .model import DAY_MS, Machine, MachineState
from .patterns import (Mode, TestExecutionRecord, TestPattern, TestProfile, electrical_factor, execute_pattern,
                       mismatch_at)

if TYPE_CHECKING:
    from .dynamics import EnvironmentModel
    from .sim import Simulation


def diurnal_curve(config: SimConfig) -> np.ndarray:
    wl = config.workload
    return np.array([1.0 + wl.diurnal_amplitude * math.cos(2.0 * math.pi * (h - wl.diurnal_peak_hour) / 24.0)
                     for h in range(24)])


def cores_testable(busy: int, core_count: int, ceiling: int) -> int:
    return max(0, min(ceiling, core_count - busy))


def busy_at(machine: Machine, config: SimConfig, now_ms: int, seed: int) -> int:
    """Workload busy-core count at ``now_ms`` (15-minute noise steps on a diurnal curve)."""
    busy_key = derive_key(seed, machine.id, "busy")
    return int(kr.busy_cores(np.int64(now_ms), np.int64(machine.core_count), float(machine.load_level),
                             diurnal_curve(config), float(config.workload.noise), np.uint64(busy_key)))


def descale(machine: Machine, config: SimConfig, busy: int | None = None) -> int:
    """Max concurrent test cores; non-increasing in the busy count, 0 when saturated."""
    busy = machine.cores_busy if busy is None else busy
    return cores_testable(busy, machine.core_count, config.ripple.max_test_cores)


def compute_tax(slice_starts: Sequence[float] | np.ndarray, window_start: float, window_end: float,
                slice_ms: float, core_count: int, cores_per_slice: int = 1) -> float:
    """Slice time clipped to the window, times cores used, over window x cores."""
    if not window_end > window_start:
        raise ValueError("window must have positive length")
    s = np.asarray(slice_starts, dtype=np.float64)
    busy = np.clip(np.minimum(s + slice_ms, window_end) - np.maximum(s, window_start), 0.0, None).sum()
    return float(busy * cores_per_slice / ((window_end - window_start) * core_count))


def max_window_tax(slice_starts: Sequence[float] | np.ndarray, slice_ms: float, core_count: int,
                   window_ms: float = DAY_MS, cores_per_slice: int = 1) -> float:
    """Exact maximum of ``compute_tax`` over every placement of a sliding window.

    Covered time is piecewise linear in the window position, so the maximum
    sits where a window edge meets a slice edge.
    """
    s = np.sort(np.asarray(slice_starts, dtype=np.float64))
    if s.size == 0:
        return 0.0
    cum = np.concatenate(([0.0], np.cumsum(s)))

    def covered_before(x: np.ndarray) -> np.ndarray:
        a = np.searchsorted(s, x - slice_ms, side="right")  # finished by x
        b = np.searchsorted(s, x, side="left")  # started before x
        return slice_ms * a + (b - a) * x - (cum[b] - cum[a])

    w = np.concatenate((s, s + slice_ms - window_ms))
    busy = covered_before(w + window_ms) - covered_before(w)
    return float(busy.max() * cores_per_slice / (window_ms * core_count))


# -- single-slice path -----------------------------------------------------------

@dataclass
class SliceOutcome:
    executed: bool
    reason: str = ""
    record: TestExecutionRecord | None = None


def tick_schedule(machine: Machine, config: SimConfig, now: int, rng_stream: CounterStream,
                  profile: TestProfile, tick_ms: int = 60_000, use_numba: bool | None = None) -> SliceOutcome:
    """One scheduler tick: maybe run one slice (Poisson rate ``trials_per_day``)."""
    if machine.state is not MachineState.PRODUCTION:
        raise ValueError(f"ripple never runs outside Production (machine {machine.id} is {machine.state.value})")
    c = rng_stream.next_counter()
    p_tick = -math.expm1(-profile.trials_per_day * tick_ms / DAY_MS)
    if rng_stream.uniform(c, 0) >= p_tick:
        return SliceOutcome(False, "no_trial")
    if descale(machine, config) < 1:
        return SliceOutcome(False, "no_free_core")
    pat = profile.patterns[int(rng_stream.u64(c, 1) % len(profile.patterns))]
    rec = execute_pattern(machine, pat.reseeded(rng_stream.u64(c, 2)), profile, now, rng_stream, use_numba)
    return SliceOutcome(True, "", rec)


# -- batched orchestrator ----------------------------------------------------------

def _profile_arrays(profile: TestProfile) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pats = profile.patterns
    return (np.array([int(p.family) for p in pats], dtype=np.int64),
            np.array([p.seed for p in pats], dtype=np.uint64),
            np.array([p.iterations for p in pats], dtype=np.int64))


def machine_params(machine: Machine, seed: int, config: SimConfig) -> kr.RippleMachineParams:
    return kr.RippleMachineParams(derive_key(seed, machine.id, "ripple-schedule"),
                                  derive_key(seed, machine.id, "ripple-offsets"),
                                  derive_key(seed, machine.id, "busy"), machine.core_count,
                                  machine.load_level, config.ripple.max_test_cores)


def defect_params(machine: Machine, seed: int, profile: TestProfile, env: "EnvironmentModel",
                  tag: str = "ripple") -> kr.RippleDefectParams | None:
    spec = machine.defect
    if spec is None:
        return None
    pfam, pseed, piter = _profile_arrays(profile)
    thr, full = kp.subset_threshold(spec.faulty_fraction)
    # the kernel indexes temperature on a fixed 6 h grid
    temps = env.temperatures(machine)
    grid = np.arange(int(math.ceil(env.n_steps * env.step_ms / kr.ENV_STEP_MS)) + 1) * kr.ENV_STEP_MS
    temps = np.ascontiguousarray(temps[np.minimum(grid // env.step_ms, temps.size - 1)])
    p0e = spec.base_prob * electrical_factor(spec, machine, machine.nominal or machine.op_point)
    return kr.RippleDefectParams(pfam, pseed, piter, derive_key(seed, machine.id, tag, "data"),
                                 mix64_int(spec.subset_seed), thr, full, p0e, temps, spec.thermal_threshold,
                                 spec.thermal_gamma, machine.age_days, spec.aging_onset, spec.aging_ramp,
                                 spec.soak_min, spec.transition_window, derive_key(seed, machine.id, tag, "exec"))


@dataclass
class RippleHit:
    record: TestExecutionRecord
    detect_ms: int
    slice_id: int


def resolve_hits(machine: Machine, profile: TestProfile, dp: kr.RippleDefectParams | None, run, t0: int, t1: int,
                 carry: np.ndarray) -> tuple[list[kr.SliceBatch], RippleHit | None]:
    """Run batches from ``t0`` until a real mismatch or ``t1``.

    A manifestation whose corruption leaves the value unchanged is a pass;
    the scan resumes at the next slice.
    """
    batches = []
    while True:
        b = run(t0, t1, carry, dp)
        batches.append(b)
        if not b.hit:
            return batches, None
        pat = profile.patterns[b.hit_pattern]
        reseeded = TestPattern(pat.pattern_id, b.hit_seed, pat.family, pat.iterations, pat.slice_budget_ms)
        mm = mismatch_at(machine.defect, reseeded, b.hit_iteration)
        if mm is not None:
            dur = (b.hit_iteration + 1) * pat.slice_budget_ms / pat.iterations
            rec = TestExecutionRecord(machine.id, pat.pattern_id, Mode.RIPPLE, b.hit_start, dur, mm)
            return batches, RippleHit(rec, b.hit_start + int(math.ceil(dur)), b.hit_sid)
        carry = np.concatenate((carry, b.executed))
        t0 = b.hit_start + 1


@dataclass
class _MachineState:
    run: kr.SliceRunner
    carry: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    spec: object = None
    dp: kr.RippleDefectParams | None = None


class Ripple:
    """Event handlers for always-on slice testing."""

    def __init__(self, config: SimConfig, profile: TestProfile | None = None, enabled: bool = True):
        self.config = config
        self.enabled = enabled
        self.profile = profile or config.ripple_profile()
        rc = config.ripple
        self.slice_ms = rc.slice_ms
        self.guard_ms = int(math.ceil(rc.slice_ms)) + 1  # slices finish before a drain starts
        self.rollout_ms = int(round(rc.rollout_delay_days * DAY_MS))
        self.carry_cap = 4 * int(rc.trials_per_day + 50)
        self.cdf = kr.poisson_cdf_table(rc.trials_per_day)
        self.diurnal = diurnal_curve(config)
        self._mstate: dict[int, _MachineState] = {}
        self._deferred: list[tuple[int, int, int]] = []
        self._deferred_params: dict[int, tuple[kr.RippleMachineParams, float]] = {}

    def _state(self, sim: "Simulation", machine: Machine) -> _MachineState:
        ms = self._mstate.get(machine.id)
        if ms is None:
            run = kr.SliceRunner(machine_params(machine, sim.seed, self.config), self.cdf, self.slice_ms,
                                 self.diurnal, self.config.workload.noise,
                                 self.config.ripple.theta_for(machine.workload), sim.use_numba)
            ms = self._mstate[machine.id] = _MachineState(run)
        if ms.spec is not machine.defect:
            ms.spec = machine.defect
            ms.dp = defect_params(machine, sim.seed, self.profile, sim.env)
        return ms

    def on_interval(self, sim: "Simulation", machine: Machine, payload: dict) -> dict:
        if machine.state is not MachineState.PRODUCTION:
            return {"skipped": True, "state": machine.state.value}
        t0 = max(sim.now, self.rollout_ms)
        t1 = min(sim.next_arrival(machine.id), sim.horizon_ms) - self.guard_ms
        if sim.quiet and machine.id not in sim.ground_truth and not sim.traced(machine.id):
            # slices here can only add to the totals; settled in one batch by flush()
            if machine.id not in self._deferred_params:
                self._deferred_params[machine.id] = (machine_params(machine, sim.seed, self.config),
                                                     self.config.ripple.theta_for(machine.workload))
            self._deferred.append((machine.id, t0, t1))
            return {"t0": t0, "t1": t1, "deferred": True}
        ms = self._state(sim, machine)
        carry = ms.carry
        if carry.size and carry[0] <= t0 - DAY_MS:
            carry = carry[carry > t0 - DAY_MS]
        batches, hit = resolve_hits(machine, self.profile, ms.dp, ms.run, t0, t1, carry)
        if len(batches) == 1:
            b = batches[0]
            executed, cand, n_core, n_tax, mt = b.executed, b.candidates, b.skipped_cores, b.skipped_tax, b.max_window_tax
        else:
            executed = np.concatenate([b.executed for b in batches])
            cand = sum(b.candidates for b in batches)
            n_core = sum(b.skipped_cores for b in batches)
            n_tax = sum(b.skipped_tax for b in batches)
            mt = max(b.max_window_tax for b in batches)
        if executed.size >= self.carry_cap:
            ms.carry = executed[-self.carry_cap:]
        elif executed.size:
            ms.carry = np.concatenate((carry, executed))[-self.carry_cap:]
        else:
            ms.carry = carry
        n = int(executed.size)
        tot = sim.totals
        tot.ripple_tests += n
        tot.ripple_ms += n * self.slice_ms
        tot.ripple_candidates += cand
        tot.ripple_skipped_cores += n_core
        tot.ripple_skipped_tax += n_tax
        if mt > tot.ripple_max_tax:
            tot.ripple_max_tax = mt
        out = {"t0": t0, "t1": t1, "slices": n, "max_tax": mt, "skipped_no_core": n_core, "skipped_tax": n_tax}
        if sim.traced(machine.id):
            out["starts"] = executed.tolist()
        if hit is not None:
            sim.schedule(hit.detect_ms, "TestSliceDue", machine.id, {"record": hit.record, "slice_id": hit.slice_id})
            out["detect_ms"] = hit.detect_ms
        return out

    def flush(self, sim: "Simulation") -> None:
        """Settle deferred healthy intervals into ``sim.totals``."""
        if not self._deferred:
            return
        n, cand, n_core, n_tax, mt = kr.healthy_batch(
            self._deferred, self._deferred_params, self.cdf, self.slice_ms, self.diurnal,
            self.config.workload.noise, self.carry_cap, sim.use_numba)
        self._deferred.clear()
        tot = sim.totals
        tot.ripple_tests += n
        tot.ripple_ms += n * self.slice_ms
        tot.ripple_candidates += cand
        tot.ripple_skipped_cores += n_core
        tot.ripple_skipped_tax += n_tax
        if mt > tot.ripple_max_tax:
            tot.ripple_max_tax = mt

    def on_slice_due(self, sim: "Simulation", machine: Machine, payload: dict) -> dict:
        rec: TestExecutionRecord = payload["record"]
        machine.last_transition_ms = rec.start_time
        out = {"slice_id": payload["slice_id"], "record": rec.to_dict()}
        out.update(sim.scanner.handle_failure(sim, machine, rec, "ripple"))
        return out


# -- shadow A/B ------------------------------------------------------------------

def assign_cohort(machine_id: int, experiment_seed: int) -> str:
    return "A" if mix64_int(derive_key(experiment_seed, "ab-cohort") ^ machine_id) & 1 == 0 else "B"


@dataclass
class ABCohort:
    cohort_id: str
    machine_ids: list[int]
    variant: list[TestPattern]
    detections: int = 0
    defective: int = 0
    slices: int = 0
    measured_tax: float = 0.0

    def to_dict(self) -> dict:
        return {"cohort_id": self.cohort_id, "machines": len(self.machine_ids), "defective": self.defective,
                "detections": self.detections, "slices": self.slices, "measured_tax": self.measured_tax,
                "variant": [{"family": p.family.name, "iterations": p.iterations, "pattern_id": p.pattern_id}
                            for p in self.variant]}


@dataclass
class ABReport:
    experiment_seed: int
    duration_days: float
    theta: float
    cohorts: list[ABCohort]

    @property
    def verdict(self) -> str:
        return "pass" if all(c.measured_tax <= self.theta for c in self.cohorts) else "fail"

    def to_dict(self) -> dict:
        return {"experiment_seed": self.experiment_seed, "duration_days": self.duration_days, "theta": self.theta,
                "cohorts": [c.to_dict() for c in self.cohorts], "verdict": self.verdict}


def run_shadow_experiment(config: SimConfig, machines: Sequence[Machine],
                          variants: tuple[Sequence[TestPattern], Sequence[TestPattern]], experiment_seed: int,
                          duration_days: float, env: "EnvironmentModel | None" = None, seed: int | None = None, use_numba: bool | None = None) -> ABReport:
    """Each cohort runs its variant on its machines, continuously in Production, for ``duration_days``."""
    from .dynamics import EnvironmentModel

    if len(machines) < 2:
        raise ValueError("a shadow experiment needs at least two machines")
    va, vb = (list(v) for v in variants)
    if not va or not vb:
        raise ValueError("both variants need at least one pattern")
    seed = config.global_seed if seed is None else seed
    env = env or EnvironmentModel(config, seed)
    cohorts = {cid: ABCohort(cid, [], v) for cid, v in (("A", va), ("B", vb))}
    for m in machines:
        cohorts[assign_cohort(m.id, experiment_seed)].machine_ids.append(m.id)
    assert not set(cohorts["A"].machine_ids) & set(cohorts["B"].machine_ids)
    rc = config.ripple
    cdf = kr.poisson_cdf_table(rc.trials_per_day)
    diurnal = diurnal_curve(config)
    t1 = int(round(duration_days * DAY_MS))
    by_id = {m.id: m for m in machines}
    for cid, cohort in cohorts.items():
        prof = TestProfile(Mode.RIPPLE, rc.slice_ms / 1000.0, tuple(cohort.variant), rc.trials_per_day, f"ab-{cid}")
        for mid in cohort.machine_ids:
            m = by_id[mid]
            mp = machine_params(m, seed, config)
            theta = rc.theta_for(m.workload)
            dp = defect_params(m, seed, prof, env, tag=f"ab-{experiment_seed}")

            def run(a, b, carry, d, mp=mp, theta=theta):
                return kr.run_slices(a, b, mp, cdf, rc.slice_ms, diurnal, config.workload.noise, theta, carry, d,
                                     use_numba)
            batches, hit = resolve_hits(m, prof, dp, run, 0, t1, np.zeros(0, dtype=np.int64))
            executed = np.concatenate([b.executed for b in batches])
            cohort.slices += executed.size
            cohort.measured_tax = max(cohort.measured_tax, max_window_tax(executed, rc.slice_ms, m.core_count))
            cohort.defective += m.defect is not None
            cohort.detections += hit is not None
    return ABReport(experiment_seed, duration_days, rc.tax_threshold, [cohorts["A"], cohorts["B"]])


__all__ = ["ABCohort", "ABReport", "Ripple", "RippleHit", "SliceOutcome", "assign_cohort", "busy_at",
           "compute_tax", "cores_testable", "descale", "diurnal_curve", "max_window_tax", "run_shadow_experiment",
           "tick_schedule"]
