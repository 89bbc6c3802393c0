"""Out-of-production testing piggybacked on maintenance windows.

The flow per window is Production -> Draining -> Maintenance(kind) ->
TestingScanner -> Undraining -> Production. A mismatch moves the machine to
Quarantine instead; confirmation runs decide the repair kind, and the machine
comes back through Repair -> Undraining.

Handlers take the running simulation as their first argument and use only its
scheduling/logging surface (``schedule``, ``now``, ``detect``, streams, ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

from .config import SimConfig
from .dynamics import MaintenanceEvent
from .kernels.rng import CounterStream, derive_key, draw_int
from .model import Machine, MachineState
from .patterns import (Mode, TestExecutionRecord, TestProfile, accelerated_probability, execute_pattern,
                       find_mismatch)

if TYPE_CHECKING:
    from .sim import Simulation

S = MachineState


class RepairKind(str, Enum):
    SOFT = "SoftRepair"
    SWAP = "ComponentSwap"


@dataclass(frozen=True)
class ScannerPolicy:
    profile_by_window: tuple[tuple[float, TestProfile], ...]
    snapshot_fields: tuple[str, ...] = ("op_point", "temperature", "age_days")
    confirm_repro_runs: int = 3
    repair_kind_rule: dict[str, RepairKind] = field(
        default_factory=lambda: {"repro": RepairKind.SWAP, "non_repro": RepairKind.SOFT})
    repair_hours: dict[RepairKind, float] = field(
        default_factory=lambda: {RepairKind.SWAP: 48.0, RepairKind.SOFT: 4.0})

    def __post_init__(self) -> None:
        tiers = self.profile_by_window
        if not tiers:
            raise ValueError("scanner policy needs at least one tier")
        mins = [w for w, _ in tiers]
        if mins != sorted(mins):
            raise ValueError("profile_by_window must be sorted by min_window_s")
        for w, prof in tiers:
            if prof.mode is not Mode.SCANNER:
                raise ValueError(f"tier {prof.name!r} is not a scanner profile")
            if prof.test_duration_s > w:
                raise ValueError(f"tier {prof.name!r} runs {prof.test_duration_s} s but is eligible from {w} s")
        if self.confirm_repro_runs < 1:
            raise ValueError("confirm_repro_runs must be >= 1")
        if set(self.repair_kind_rule) != {"repro", "non_repro"}:
            raise ValueError("repair_kind_rule needs exactly 'repro' and 'non_repro'")

    @classmethod
    def from_config(cls, config: SimConfig) -> "ScannerPolicy":
        sc = config.scanner
        rule = {k: RepairKind(v) for k, v in sc.repair_rule.items()}
        hours = {RepairKind(k): v for k, v in sc.repair_hours.items()}
        return cls(tuple(config.scanner_tiers()), tuple(sc.snapshot_fields), sc.confirm_repro_runs, rule, hours)

    @property
    def reference_profile(self) -> TestProfile:
        return self.profile_by_window[-1][1]

    def covers(self, smallest_window_s: float) -> bool:
        return self.profile_by_window[0][0] <= smallest_window_s


def select_profile(policy: ScannerPolicy, window_s: float) -> TestProfile:
    """Largest tier whose ``min_window_s`` fits; the lowest tier is always eligible."""
    if not window_s > 0:
        raise ValueError("window_s must be > 0")
    chosen = policy.profile_by_window[0][1]
    for min_w, prof in policy.profile_by_window:
        if min_w <= window_s:
            chosen = prof
    return chosen


def snapshot(machine: Machine, now_ms: int, fields: tuple[str, ...]) -> dict:
    out = {}
    for f in fields:
        if f == "op_point":
            op = machine.op_point
            out[f] = {"frequency": op.frequency, "voltage": op.voltage, "current": op.current}
        elif f == "temperature":
            out[f] = machine.env.effective_temperature
        elif f == "age_days":
            out[f] = machine.age_at(now_ms)
        else:
            out[f] = getattr(machine, f)
    return out


def _ms(seconds: float) -> int:
    return int(math.ceil(seconds * 1000.0))


class Fleetscanner:
    """Event handlers for the maintenance/quarantine side of the lifecycle."""

    def __init__(self, policy: ScannerPolicy, config: SimConfig, enabled: bool = True):
        self.policy = policy
        self.enabled = enabled
        mt = config.maintenance
        self.drain_ms = _ms(mt.drain_minutes * 60.0)
        self.undrain_ms = _ms(mt.undrain_minutes * 60.0)
        self._streams: dict[int, CounterStream] = {}
        self._data_keys: dict[int, int] = {}

    def stream(self, sim: "Simulation", machine_id: int, tag: str = "scanner") -> CounterStream:
        key = machine_id if tag == "scanner" else (machine_id, tag)
        st = self._streams.get(key)
        if st is None:
            st = self._streams[key] = CounterStream(derive_key(sim.seed, machine_id, tag))
        return st

    def _data_key(self, sim: "Simulation", machine_id: int) -> int:
        k = self._data_keys.get(machine_id)
        if k is None:
            k = self._data_keys[machine_id] = derive_key(sim.seed, machine_id, "scanner-data")
        return k

    # -- maintenance flow --------------------------------------------------------

    def on_maintenance_window(self, sim: "Simulation", machine: Machine, event: MaintenanceEvent) -> dict:
        if machine.state is not S.PRODUCTION:
            return {"skipped": True, "state": machine.state.value}
        sim.close_production(machine)
        sim.transition(machine, S.DRAINING)
        sim.schedule(sim.now + self.drain_ms, "DrainComplete", machine.id,
                     {"kind": event.kind.value, "window_s": event.window_s})
        return {"state": S.DRAINING.value}

    def on_drain_complete(self, sim: "Simulation", machine: Machine, payload: dict) -> dict:
        from .model import MaintenanceKind

        sim.transition(machine, S.MAINTENANCE, MaintenanceKind(payload["kind"]))
        profile = select_profile(self.policy, payload["window_s"])
        if not self.enabled:
            # the window still keeps the machine out for the time testing would have taken
            sim.schedule(sim.now + _ms(profile.test_duration_s), "MaintenanceComplete", machine.id, {})
            return {"state": S.MAINTENANCE.value, "profile": profile.name, "testing": False}
        sim.transition(machine, S.TESTING_SCANNER)
        out = {"state": S.TESTING_SCANNER.value, "profile": profile.name}
        if machine.defect is not None or not sim.quiet:
            sim.env.refresh(machine, sim.now)
            out["snapshot"] = snapshot(machine, sim.now, self.policy.snapshot_fields)
        self._run_profile(sim, machine, profile)
        return out

    def _run_profile(self, sim: "Simulation", machine: Machine, profile: TestProfile) -> None:
        """Run the profile's patterns back to back, stopping at the first mismatch.

        One ScannerTestComplete carries every record; it fires when the last
        executed pattern ends.
        """
        st = self.stream(sim, machine.id)
        data_key = self._data_key(sim, machine.id)
        defective = machine.defect is not None
        t = sim.now
        records = []
        for pat in profile.patterns:
            pattern = pat
            if defective:
                pattern = pat.reseeded(draw_int(data_key, st.position))
                sim.env.refresh(machine, t)
            rec = execute_pattern(machine, pattern, profile, t, st, sim.use_numba)
            records.append(rec)
            sim.totals.scanner_tests += 1
            sim.totals.scanner_ms += rec.duration_ms
            t += _ms(rec.duration_ms / 1000.0)
            if not rec.passed:
                break
        sim.schedule(t, "ScannerTestComplete", machine.id, {"records": records})

    def on_test_complete(self, sim: "Simulation", machine: Machine, payload: dict) -> dict:
        records: list[TestExecutionRecord] = payload["records"]
        out = {"records": [r.to_dict() for r in records]}
        last = records[-1]
        if not last.passed:
            out.update(self.handle_failure(sim, machine, last, "scanner"))
            return out
        sim.transition(machine, S.UNDRAINING)
        sim.schedule(sim.now + self.undrain_ms, "UndrainComplete", machine.id, {})
        out["state"] = S.UNDRAINING.value
        return out

    def on_maintenance_complete(self, sim: "Simulation", machine: Machine, payload: dict) -> dict:
        sim.transition(machine, S.UNDRAINING)
        sim.schedule(sim.now + self.undrain_ms, "UndrainComplete", machine.id, {})
        return {"state": S.UNDRAINING.value}

    def on_undrain_complete(self, sim: "Simulation", machine: Machine, payload: dict) -> dict:
        sim.transition(machine, S.PRODUCTION)
        sim.open_production(machine)
        return {"state": S.PRODUCTION.value}

    # -- failures ------------------------------------------------------------------

    def handle_failure(self, sim: "Simulation", machine: Machine, record: TestExecutionRecord,
                       method: str) -> dict:
        """Quarantine on a mismatch; the first detection per machine wins attribution."""
        if record.passed:
            raise ValueError("handle_failure needs a Mismatch record")
        if machine.state is S.QUARANTINE:
            return {"duplicate": True}
        if machine.state is S.PRODUCTION:
            sim.close_production(machine)
        sim.transition(machine, S.QUARANTINE)
        first = sim.detect(machine, method)
        confirm_ms = _ms(self.policy.confirm_repro_runs * self.policy.reference_profile.test_duration_s)
        sim.schedule(sim.now + confirm_ms, "QuarantineConfirmDue", machine.id, {})
        return {"actions": [{"kind": "quarantine_enter", "method": method, "first_detection": first}],
                "state": S.QUARANTINE.value}

    def confirm_runs(self, sim: "Simulation", machine: Machine) -> list[bool]:
        """Back-to-back scanner executions of the reference profile; True = reproduced."""
        prof = self.policy.reference_profile
        spec = machine.defect
        if spec is None or spec.transition_gated:  # nothing can manifest out of production
            return [False] * self.policy.confirm_repro_runs
        st = self.stream(sim, machine.id, "confirm")
        data_key = derive_key(st.key, "data")
        p = accelerated_probability(spec, machine, sim.now)
        cts = 0.0
        out = []
        for _ in range(self.policy.confirm_repro_runs):
            hit = False
            for pat in prof.patterns:
                ctr = st.next_counter()
                pattern = pat.reseeded(draw_int(data_key, ctr))
                mm = find_mismatch(machine, pattern, Mode.SCANNER, sim.now, st.key, ctr, p, cts, sim.use_numba)
                if mm is not None:
                    hit = True
                    cts += (mm.iteration_index + 1) * pattern.slice_budget_ms / pattern.iterations / 1000.0
                    break
                cts += pattern.slice_budget_ms / 1000.0
            out.append(hit)
        return out

    def quarantine_confirm_and_repair(self, sim: "Simulation", machine: Machine, payload: dict | None = None) -> dict:
        if machine.state is not S.QUARANTINE:
            raise RuntimeError(f"machine {machine.id} is not in Quarantine")
        sim.env.refresh(machine, sim.now)
        runs = self.confirm_runs(sim, machine)
        outcome = "repro" if any(runs) else "non_repro"
        kind = self.policy.repair_kind_rule[outcome]
        sim.transition(machine, S.REPAIR)
        if kind is RepairKind.SWAP:
            machine.defect = None
        sim.schedule(sim.now + _ms(self.policy.repair_hours[kind] * 3600.0), "RepairComplete", machine.id,
                     {"repair": kind.value})
        return {"confirm_runs": runs, "outcome": outcome, "repair": kind.value, "state": S.REPAIR.value}

    def on_repair_complete(self, sim: "Simulation", machine: Machine, payload: dict) -> dict:
        sim.transition(machine, S.UNDRAINING)
        sim.schedule(sim.now + self.undrain_ms, "UndrainComplete", machine.id, {})
        return {"actions": [{"kind": "repair_done", "repair": payload["repair"]}], "state": S.UNDRAINING.value}
