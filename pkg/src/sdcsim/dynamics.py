"""Maintenance arrivals, datacenter environment and application exposure.

Everything here is a pure function of ``(config, global_seed, machine, time)``.
The simulator samples these functions when it needs them instead of pushing
millions of periodic ticks through the event queue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .config import SimConfig
from .kernels import exposure as kexp
from .kernels.rng import CounterStream, _draw, _unit, _wrapping, derive_key
from .model import DAY_MS, EnvironmentState, Machine, MaintenanceKind

HOUR_MS = 3_600_000


def days_to_ms(days: float) -> int:
    return int(round(days * DAY_MS))


@dataclass(frozen=True)
class MaintenanceEvent:
    machine_id: int
    kind: MaintenanceKind
    window_s: float
    t_ms: int

    def __post_init__(self) -> None:
        if not self.window_s > 0:
            raise ValueError("maintenance window must be > 0")

    def to_dict(self) -> dict:
        return {"machine_id": self.machine_id, "kind": self.kind.value, "window_s": self.window_s}


def generate_maintenance(machine_id: int, rng_stream: CounterStream, config: SimConfig,
                         horizon_ms: int | None = None) -> Iterator[MaintenanceEvent]:
    """Poisson arrivals (exponential gaps) for one machine, stopping at the horizon."""
    mt = config.maintenance
    if math.isinf(mt.mean_interarrival_days):
        return
    horizon_ms = days_to_ms(config.horizon_days) if horizon_ms is None else horizon_ms
    kinds = [(MaintenanceKind(k), v) for k, v in sorted(mt.kinds.items())]
    total_w = sum(kc.weight for _, kc in kinds)
    t = 0.0
    i = 0
    while True:
        gap = -mt.mean_interarrival_days * math.log1p(-rng_stream.uniform(3 * i))
        t += gap
        t_ms = int(t * DAY_MS)
        if t_ms >= horizon_ms:
            return
        u = rng_stream.uniform(3 * i + 1)
        acc = 0.0
        kind, kc = kinds[-1]
        for k, cand in kinds:
            acc += cand.weight / total_w
            if u < acc:
                kind, kc = k, cand
                break
        lo, hi = kc.window_s
        window = lo + rng_stream.uniform(3 * i + 2) * (hi - lo)
        yield MaintenanceEvent(machine_id, kind, window, t_ms)
        i += 1


def maintenance_stream(config: SimConfig, machine_id: int, seed: int | None = None) -> CounterStream:
    return CounterStream.for_machine(config.global_seed if seed is None else seed, machine_id, "maintenance")


# -- environment ---------------------------------------------------------------------

class EnvironmentModel:
    """Seasonal datacenter temperature plus rare per-machine hotspot changes."""

    def __init__(self, config: SimConfig, seed: int | None = None):
        self.config = config
        env = config.environment
        self.seed = config.global_seed if seed is None else seed
        self.step_ms = int(round(env.step_hours * HOUR_MS))
        self.n_steps = days_to_ms(config.horizon_days) // self.step_ms + 2
        self.dc_temp = np.array([[self._dc_temperature(d, k) for k in range(self.n_steps)]
                                 for d in range(len(env.datacenters))])
        self._dc_list = self.dc_temp.tolist()
        self._hot: dict[int, np.ndarray] = {}

    def _dc_temperature(self, dc: int, step: int) -> float:
        env = self.config.environment
        d = env.datacenters[dc]
        day = step * self.step_ms / DAY_MS
        season = d.seasonal_amplitude_c * math.sin(2.0 * math.pi * (day - d.seasonal_phase_days) / env.seasonal_period_days)
        noise = d.noise_c * (2.0 * CounterStream(derive_key(self.seed, "env", dc)).uniform(step) - 1.0)
        return d.baseline_c + season + noise

    def step_index(self, now_ms: float) -> int:
        return min(int(now_ms // self.step_ms), self.n_steps - 1)

    def hotspots(self, machine_id: int) -> np.ndarray:
        """Hotspot factor of ``machine_id`` at every environment step."""
        got = self._hot.get(machine_id)
        if got is None:
            got = self._hot[machine_id] = self._hotspots(machine_id)
        return got

    @_wrapping
    def _hotspots(self, machine_id: int) -> np.ndarray:
        env = self.config.environment
        key = np.uint64(derive_key(self.seed, machine_id, "hotspot"))
        k = np.arange(self.n_steps, dtype=np.uint64)
        redraw = _unit(_draw(key, 2 * k)) < env.hotspot_redraw_prob
        redraw[0] = True
        u = _unit(_draw(key, 2 * k + np.uint64(1)))
        lo, hi = env.hotspot_range
        value = np.where(u < env.hotspot_prob, lo + (hi - lo) * (u / env.hotspot_prob), 1.0)
        last = np.maximum.accumulate(np.where(redraw, np.arange(self.n_steps), 0))
        return value[last]

    def temperatures(self, machine: Machine) -> np.ndarray:
        """Effective (hotspot-scaled) temperature per step for one machine."""
        return self.dc_temp[machine.datacenter] * self.hotspots(machine.id)

    def state(self, machine: Machine, now_ms: float) -> EnvironmentState:
        k = self.step_index(now_ms)
        dc = self.config.environment.datacenters[machine.datacenter]
        return EnvironmentState(self._dc_list[machine.datacenter][k], dc.humidity,
                                float(self.hotspots(machine.id)[k]))

    def refresh(self, machine: Machine, now_ms: float) -> Machine:
        machine.env = self.state(machine, now_ms)
        return machine


def step_environment(model: EnvironmentModel, datacenter: int, now_ms: float) -> dict:
    """Datacenter conditions at an EnvStep (hotspots are resolved per machine on demand)."""
    k = model.step_index(now_ms)
    d = model.config.environment.datacenters[datacenter]
    return {"datacenter": datacenter, "step": k, "temperature": float(model.dc_temp[datacenter, k]),
            "humidity": d.humidity}


# -- exposure ------------------------------------------------------------------------

@dataclass
class ExposureLedger:
    counts: dict[int, int] = field(default_factory=dict)
    detected_at: dict[int, int] = field(default_factory=dict)
    last_accrual_ms: dict[int, int] = field(default_factory=dict)

    def halted(self, machine_id: int) -> bool:
        return machine_id in self.detected_at

    def mark_detected(self, machine_id: int, t_ms: int) -> None:
        self.detected_at.setdefault(machine_id, t_ms)

    def add(self, machine_id: int, count: int, until_ms: int) -> None:
        if self.halted(machine_id) and until_ms > self.detected_at[machine_id]:
            raise AssertionError(f"exposure accrued on machine {machine_id} after its detection")
        self.counts[machine_id] = self.counts.get(machine_id, 0) + count
        self.last_accrual_ms[machine_id] = until_ms

    def total(self) -> int:
        return sum(self.counts.values())


def exposure_rates(machine: Machine, starts: np.ndarray, temps: np.ndarray, step_ms: int,
                   ops_per_hour: float) -> np.ndarray:
    """Mean corrupted results per hour at each segment start.

    In-workload conditions: the transition gate is open, the soak gate closed.
    """
    spec = machine.defect
    if spec is None or spec.soak_min > 0 or starts.size == 0:
        return np.zeros(starts.size)
    from .patterns import electrical_factor

    p0e = spec.base_prob * electrical_factor(spec, machine, machine.nominal or machine.op_point)
    t = temps[np.minimum(starts // step_ms, temps.size - 1)]
    # max(.., 0) keeps an infinite threshold from producing 0 * -inf
    th = np.where(t <= spec.thermal_threshold, 1.0,
                  1.0 + spec.thermal_gamma * np.maximum(t - spec.thermal_threshold, 0.0))
    age = machine.age_days + starts / float(DAY_MS)
    if math.isinf(spec.aging_onset):
        g = np.ones(starts.size)
    else:
        g = np.where(age < spec.aging_onset, 0.0, 1.0)
        if spec.aging_ramp > 0:
            mid = (age >= spec.aging_onset) & (age < spec.aging_onset + spec.aging_ramp)
            g = np.where(mid, (age - spec.aging_onset) / spec.aging_ramp, g)
    p = np.clip(p0e * th * g, 0.0, 1.0)
    return ops_per_hour * spec.faulty_fraction * p


def record_exposure(ledger: ExposureLedger, machine: Machine, t0: int, t1: int, key: int,
                    temps: np.ndarray, step_ms: int, ops_per_hour: float,
                    use_numba: bool | None = None) -> int:
    """Accrue hourly Poisson exposure for a Production stretch ``[t0, t1)``."""
    if machine.defect is None or ledger.halted(machine.id) or t1 <= t0:
        return 0
    starts, ends = kexp.hour_segments(t0, t1)
    rates = exposure_rates(machine, starts, temps, step_ms, ops_per_hour)
    n = kexp.accrue(starts, ends, rates, key, use_numba)
    ledger.add(machine.id, n, t1)
    return n
