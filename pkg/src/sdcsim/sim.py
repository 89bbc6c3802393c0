"""Deterministic discrete-event loop binding both orchestrators to the fleet.

Events are ordered by ``(time_ms, seq)``; ``seq`` is handed out when an
event is scheduled, so the order is total and reproducible. Periodic
processes that only feed probabilities (workload steps, hourly exposure
checks) are evaluated analytically over whole production intervals rather
than queued one tick at a time.

``run`` executes three arms that share every random stream:

* combined  - the whole fleet with both methods on; source of the event log,
  test totals, exposure and first-detection attribution;
* scanner   - defective machines only, Ripple off;
* ripple    - defective machines only, scanner testing off.

The per-method detection sets used for coverage come from the two isolated
arms, so a machine that one method would catch is not hidden by the other
method having repaired it first.
"""

from __future__ import annotations

import copy
import heapq
import json
import math
from dataclasses import dataclass, field
from typing import IO, Any, Callable, Iterable

from .config import SimConfig
from .dynamics import (EnvironmentModel, ExposureLedger, days_to_ms, generate_maintenance, maintenance_stream,
                       record_exposure, step_environment)
from .fleetscanner import Fleetscanner, ScannerPolicy
from .kernels.rng import derive_key
from .model import DefectClass, Machine, MachineState, MaintenanceKind, sample_fleet, transition
from .ripple import Ripple

EVENT_KINDS = ("MaintenanceArrival", "DrainComplete", "TestSliceDue", "ScannerTestComplete", "QuarantineConfirmDue",
               "RepairComplete", "UndrainComplete", "EnvStep", "WorkloadStep", "ExposureCheck",
               # bookkeeping kinds
               "RippleInterval", "MaintenanceComplete", "HorizonEnd")


class InvariantViolation(RuntimeError):
    pass


class SimulationError(RuntimeError):
    def __init__(self, event: "SimEvent", cause: BaseException):
        super().__init__(f"{type(cause).__name__} while handling {event.kind} at t={event.time} "
                         f"(machine {event.machine_id}): {cause}")
        self.event = event
        self.cause = cause


@dataclass(frozen=True, order=True)
class SimEvent:
    time: int
    seq: int
    kind: str = field(compare=False)
    machine_id: int | None = field(compare=False, default=None)
    payload: Any = field(compare=False, default=None)


@dataclass
class Totals:
    scanner_tests: int = 0
    scanner_ms: float = 0.0
    ripple_tests: int = 0
    ripple_ms: float = 0.0
    ripple_candidates: int = 0
    ripple_skipped_cores: int = 0
    ripple_skipped_tax: int = 0
    ripple_max_tax: float = 0.0

    def to_dict(self) -> dict:
        return {"scanner_tests": self.scanner_tests, "scanner_fleet_seconds": self.scanner_ms / 1000.0,
                "ripple_tests": self.ripple_tests, "ripple_fleet_seconds": self.ripple_ms / 1000.0,
                "ripple_candidates": self.ripple_candidates, "ripple_skipped_no_core": self.ripple_skipped_cores,
                "ripple_skipped_tax": self.ripple_skipped_tax, "ripple_max_window_tax": self.ripple_max_tax}


def _jsonable(obj):
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def log_line(event: SimEvent, payload: dict) -> str:
    return json.dumps(_jsonable({"t_ms": event.time, "seq": event.seq, "kind": event.kind,
                                 "machine_id": event.machine_id, "payload": payload}),
                      sort_keys=True, separators=(",", ":"), allow_nan=False)


class Simulation:
    def __init__(self, config: SimConfig, fleet: list[Machine] | None = None, *, seed: int | None = None,
                 scanner: bool | None = None, ripple: bool | None = None,
                 machine_ids: Iterable[int] | None = None, log: IO[str] | Callable[[str], Any] | None = None,
                 trace_ids: Iterable[int] | None = None, use_numba: bool | None = None,
                 env: EnvironmentModel | None = None):
        self.config = config
        self.seed = config.global_seed if seed is None else seed
        fleet = sample_fleet(config, self.seed) if fleet is None else fleet
        if machine_ids is not None:
            keep = set(machine_ids)
            fleet = [m for m in fleet if m.id in keep]
        # Machine's mutable fields are all rebound, never mutated in place, so a shallow copy isolates runs
        fleet = [copy.copy(m) for m in fleet]
        self.fleet = fleet
        self.machines = {m.id: m for m in fleet}
        self.ground_truth = {m.id: m.defect_class for m in fleet if m.defect is not None}
        self.use_numba = use_numba
        self.horizon_ms = days_to_ms(config.horizon_days)
        self.env = env if env is not None else EnvironmentModel(config, self.seed)
        self.scanner_enabled = config.scanner.enabled if scanner is None else scanner
        self.ripple_enabled = config.ripple.enabled if ripple is None else ripple
        self.scanner = Fleetscanner(ScannerPolicy.from_config(config), config, self.scanner_enabled)
        self.ripple = Ripple(config)
        self.totals = Totals()
        self.exposure = ExposureLedger()
        self.first_detection: dict[int, tuple[int, str]] = {}
        self.detected_by: dict[str, dict[int, int]] = {"scanner": {}, "ripple": {}}
        self.detections: list[tuple[int, int, str]] = []
        self.now = 0
        self.events_processed = 0
        self._seq = 0
        self._queue: list[tuple[int, int, str, int | None, Any]] = []
        self._maint: dict[int, Any] = {}
        self._next_arrival: dict[int, int] = {}
        self._prod_since: dict[int, int] = {}
        self._temps: dict[int, Any] = {}
        # without a log, work whose only product is log payload for healthy machines is skipped
        self.quiet = log is None
        self._moves: list[list[str]] = []
        if log is None:
            self._emit = None
        elif callable(log):
            self._emit = log
        else:
            self._emit = lambda line: log.write(line + "\n")
        if trace_ids is None:
            n = config.output.trace_healthy_sample
            trace_ids = [m.id for m in fleet if m.defect is None][:n]
        self._trace = set(trace_ids) | set(self.ground_truth)
        self._handlers = {
            "MaintenanceArrival": self._on_arrival,
            "DrainComplete": self.scanner.on_drain_complete,
            "ScannerTestComplete": self.scanner.on_test_complete,
            "MaintenanceComplete": self.scanner.on_maintenance_complete,
            "QuarantineConfirmDue": self.scanner.quarantine_confirm_and_repair,
            "RepairComplete": self.scanner.on_repair_complete,
            "UndrainComplete": self.scanner.on_undrain_complete,
            "RippleInterval": self.ripple.on_interval,
            "TestSliceDue": self.ripple.on_slice_due,
        }

    # -- surface used by the orchestrators ------------------------------------------

    def schedule(self, t: int, kind: str, machine_id: int | None = None, payload: Any = None) -> int:
        if t < self.now:
            raise InvariantViolation(f"{kind} scheduled in the past ({t} < {self.now})")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (int(t), seq, kind, machine_id, payload))
        return seq

    def next_arrival(self, machine_id: int) -> int:
        return self._next_arrival.get(machine_id, self.horizon_ms)

    def transition(self, machine: Machine, to: MachineState, kind: MaintenanceKind | None = None) -> None:
        """Lifecycle move at ``now``; logged runs record each ``[from, to]`` pair with the event."""
        src = machine.state
        transition(machine, to, self.now, kind)
        if self._emit is not None:
            self._moves.append([src.value, to.value])

    def traced(self, machine_id: int) -> bool:
        return machine_id in self._trace

    def open_production(self, machine: Machine) -> None:
        self._prod_since[machine.id] = self.now
        if self.ripple_enabled:
            self.schedule(self.now, "RippleInterval", machine.id)

    def close_production(self, machine: Machine) -> int:
        t0 = self._prod_since.pop(machine.id)
        if machine.defect is None or self.exposure.halted(machine.id):
            return 0
        temps = self._temps.get(machine.id)
        if temps is None:
            temps = self._temps[machine.id] = self.env.temperatures(machine)
        return record_exposure(self.exposure, machine, t0, self.now, derive_key(self.seed, machine.id, "exposure"),
                               temps, self.env.step_ms, self.config.workload.ops_per_hour, self.use_numba)

    def detect(self, machine: Machine, method: str) -> bool:
        """Record a detection; returns True when it is the machine's first."""
        if machine.defect is None or machine.id not in self.ground_truth:
            raise InvariantViolation(f"{method} flagged defect-free machine {machine.id}")
        self.detections.append((self.now, machine.id, method))
        self.detected_by[method].setdefault(machine.id, self.now)
        self.exposure.mark_detected(machine.id, self.now)
        if machine.id in self.first_detection:
            return False
        self.first_detection[machine.id] = (self.now, method)
        return True

    # -- loop --------------------------------------------------------------------

    def _schedule_next_arrival(self, mid: int) -> None:
        ev = next(self._maint[mid], None)
        if ev is None:
            self._next_arrival[mid] = self.horizon_ms
        else:
            self._next_arrival[mid] = ev.t_ms
            self.schedule(ev.t_ms, "MaintenanceArrival", mid, ev)

    def _on_arrival(self, sim: "Simulation", machine: Machine, event) -> dict:
        self._schedule_next_arrival(machine.id)
        out = {"maintenance": event.to_dict()}
        out.update(self.scanner.on_maintenance_window(self, machine, event))
        return out

    def _on_env_step(self, dc: int) -> dict:
        out = step_environment(self.env, dc, self.now)
        nxt = self.now + self.env.step_ms
        if nxt < self.horizon_ms:
            self.schedule(nxt, "EnvStep", None, dc)
        return out

    def _on_horizon(self) -> dict:
        self.ripple.flush(self)
        open_defective = 0
        for mid in sorted(self._prod_since):
            m = self.machines[mid]
            if m.defect is not None:
                open_defective += 1
                self.close_production(m)
        states: dict[str, int] = {}
        for m in self.fleet:
            states[m.state.value] = states.get(m.state.value, 0) + 1
        return {"states": dict(sorted(states.items())), "totals": self.totals.to_dict(),
                "exposure_total": self.exposure.total(), "detected": len(self.first_detection)}

    def _init(self) -> None:
        self.schedule(self.horizon_ms, "HorizonEnd")
        for dc in range(len(self.config.environment.datacenters)):
            self.schedule(0, "EnvStep", None, dc)
        for m in self.fleet:
            self._prod_since[m.id] = 0
            if self.ripple_enabled:
                self.schedule(0, "RippleInterval", m.id)
        for m in self.fleet:
            self._maint[m.id] = generate_maintenance(m.id, maintenance_stream(self.config, m.id, self.seed),
                                                     self.config, self.horizon_ms)
            self._schedule_next_arrival(m.id)

    def run(self) -> "Simulation":
        self._init()
        q = self._queue
        emit = self._emit
        while q:
            t, seq, kind, mid, payload = heapq.heappop(q)
            self.now = t
            self.events_processed += 1
            try:
                if kind == "HorizonEnd":
                    out = self._on_horizon()
                elif kind == "EnvStep":
                    out = self._on_env_step(payload)
                else:
                    out = self._handlers[kind](self, self.machines[mid], payload)
            except InvariantViolation:
                raise
            except Exception as exc:  # attach the offending event
                raise SimulationError(SimEvent(t, seq, kind, mid, payload), exc) from exc
            if emit is not None:
                if self._moves:
                    out["transitions"] = self._moves
                    self._moves = []
                emit(log_line(SimEvent(t, seq, kind, mid), out))
            if kind == "HorizonEnd":
                break
        return self

    def states(self) -> dict[int, MachineState]:
        return {m.id: m.state for m in self.fleet}


# -- the three arms -----------------------------------------------------------------

@dataclass
class ArmResult:
    name: str
    detected: dict[int, int]  # machine -> first detection ms by the arm's method(s)
    exposure: int
    exposure_by_machine: dict[int, int]

    def to_dict(self) -> dict:
        return {"name": self.name, "detected": {str(k): v for k, v in sorted(self.detected.items())},
                "exposure": self.exposure}


@dataclass
class RunResult:
    seed: int
    horizon_days: float
    fleet_size: int
    ground_truth: dict[int, DefectClass]
    scanner_detected: dict[int, int]
    ripple_detected: dict[int, int]
    first_detection: dict[int, tuple[int, str]]
    totals: Totals
    exposure: ExposureLedger
    arms: dict[str, ArmResult]
    events_processed: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "horizon_days": self.horizon_days, "fleet_size": self.fleet_size,
            "ground_truth": {str(k): v.value for k, v in sorted(self.ground_truth.items())},
            "scanner_detected": {str(k): v for k, v in sorted(self.scanner_detected.items())},
            "ripple_detected": {str(k): v for k, v in sorted(self.ripple_detected.items())},
            "first_detection": {str(k): {"t_ms": v[0], "method": v[1]} for k, v in sorted(self.first_detection.items())},
            "totals": self.totals.to_dict(),
            "exposure": {"total": self.exposure.total(),
                         "by_machine": {str(k): v for k, v in sorted(self.exposure.counts.items())},
                         "arms": {k: a.exposure for k, a in sorted(self.arms.items())}},
            "events_processed": self.events_processed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        exp = ExposureLedger(counts={int(k): v for k, v in d["exposure"]["by_machine"].items()})
        t = d["totals"]
        totals = Totals(t["scanner_tests"], t["scanner_fleet_seconds"] * 1000.0, t["ripple_tests"],
                        t["ripple_fleet_seconds"] * 1000.0, t["ripple_candidates"], t["ripple_skipped_no_core"],
                        t["ripple_skipped_tax"], t["ripple_max_window_tax"])
        arms = {k: ArmResult(k, {}, v, {}) for k, v in d["exposure"].get("arms", {}).items()}
        return cls(d["seed"], d["horizon_days"], d["fleet_size"],
                   {int(k): DefectClass(v) for k, v in d["ground_truth"].items()},
                   {int(k): v for k, v in d["scanner_detected"].items()},
                   {int(k): v for k, v in d["ripple_detected"].items()},
                   {int(k): (v["t_ms"], v["method"]) for k, v in d["first_detection"].items()},
                   totals, exp, arms, d["events_processed"])


def run(config: SimConfig, seed: int | None = None, *, log: IO[str] | Callable[[str], Any] | None = None,
        use_numba: bool | None = None, fleet: list[Machine] | None = None,
        trace_ids: Iterable[int] | None = None) -> RunResult:
    """Simulate the combined fleet plus the two single-method arms."""
    seed = config.global_seed if seed is None else seed
    fleet = sample_fleet(config, seed) if fleet is None else fleet
    env = EnvironmentModel(config, seed)
    combined = Simulation(config, fleet, seed=seed, log=log, use_numba=use_numba, env=env,
                          trace_ids=trace_ids).run()
    defective = sorted(combined.ground_truth)
    arms = {"combined": ArmResult("combined", {k: v[0] for k, v in combined.first_detection.items()},
                                  combined.exposure.total(), dict(combined.exposure.counts))}
    per_method: dict[str, dict[int, int]] = {}
    for name, sc, rp in (("scanner", True, False), ("ripple", False, True)):
        enabled = config.scanner.enabled if name == "scanner" else config.ripple.enabled
        if not enabled:
            per_method[name] = {}
            continue
        arm = Simulation(config, fleet, seed=seed, scanner=sc, ripple=rp, machine_ids=defective,
                         use_numba=use_numba, env=env).run()
        per_method[name] = dict(arm.detected_by[name])
        arms[name] = ArmResult(name, per_method[name], arm.exposure.total(), dict(arm.exposure.counts))
    return RunResult(seed, config.horizon_days, len(combined.fleet), dict(combined.ground_truth),
                     per_method["scanner"], per_method["ripple"], dict(combined.first_detection), combined.totals,
                     combined.exposure, arms, combined.events_processed)
