"""Machines, defects and the machine lifecycle.

A defect is a :class:`DefectSpec`: a keyed-hash subset of operand space that
can be corrupted, a corruption function, and the gates/accelerants that
decide how often a computation in that subset actually comes out wrong.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Union

from .kernels.rng import CounterStream, MASK64, derive_key

if TYPE_CHECKING:  # pragma: no cover
    from .config import DefectTemplate, SimConfig
    from .patterns import TestProfile

DAY_MS = 86_400_000


class DefectClass(str, Enum):
    BOTH = "BothDetectable"
    SCANNER_ONLY = "ScannerOnly"
    RIPPLE_TRANSITION = "RippleTransition"
    RIPPLE_REPETITION = "RippleRepetition"


class MaintenanceKind(str, Enum):
    FIRMWARE = "FirmwareUpgrade"
    KERNEL = "KernelUpgrade"
    PROVISIONING = "Provisioning"
    REPAIR = "Repair"


class MachineState(str, Enum):
    PRODUCTION = "Production"
    DRAINING = "Draining"
    MAINTENANCE = "Maintenance"
    TESTING_SCANNER = "TestingScanner"
    QUARANTINE = "Quarantine"
    REPAIR = "Repair"
    UNDRAINING = "Undraining"


S = MachineState
LEGAL_TRANSITIONS: frozenset[tuple[MachineState, MachineState]] = frozenset({
    (S.PRODUCTION, S.DRAINING),
    (S.DRAINING, S.MAINTENANCE),
    (S.MAINTENANCE, S.TESTING_SCANNER),
    (S.MAINTENANCE, S.UNDRAINING),  # window testing disabled
    (S.TESTING_SCANNER, S.UNDRAINING),
    (S.UNDRAINING, S.PRODUCTION),
    (S.PRODUCTION, S.QUARANTINE),
    (S.TESTING_SCANNER, S.QUARANTINE),
    (S.QUARANTINE, S.REPAIR),
    (S.REPAIR, S.UNDRAINING),
})
del S


class IllegalTransition(RuntimeError):
    def __init__(self, machine_id: int, src: MachineState, dst: MachineState):
        super().__init__(f"machine {machine_id}: illegal transition {src.value} -> {dst.value}")
        self.machine_id = machine_id
        self.src = src
        self.dst = dst


# -- corruption kinds ------------------------------------------------------------

@dataclass(frozen=True)
class ForcedConstant:
    value: Union[int, float]


@dataclass(frozen=True)
class BitFlip:
    bit: int

    def __post_init__(self) -> None:
        if not 0 <= self.bit < 64:
            raise ValueError(f"bit index {self.bit} outside 0..63")


@dataclass(frozen=True)
class OffByDelta:
    delta: int

    def __post_init__(self) -> None:
        if self.delta % (1 << 64) == 0:
            raise ValueError("delta must be non-zero modulo 2**64")


CorruptionKind = Union[ForcedConstant, BitFlip, OffByDelta]


def corruption_to_dict(kind: CorruptionKind) -> dict:
    return {"kind": type(kind).__name__, **asdict(kind)}


def corruption_from_dict(d: dict) -> CorruptionKind:
    cls = {"ForcedConstant": ForcedConstant, "BitFlip": BitFlip, "OffByDelta": OffByDelta}[d["kind"]]
    return cls(**{k: v for k, v in d.items() if k != "kind"})


# -- value types ---------------------------------------------------------------

@dataclass(frozen=True)
class OperatingPoint:
    frequency: float  # GHz
    voltage: float  # V
    current: float  # A


@dataclass(frozen=True)
class Envelope:
    nominal: OperatingPoint
    low: OperatingPoint
    high: OperatingPoint

    def __post_init__(self) -> None:
        if not self.contains(self.nominal):
            raise ValueError("nominal operating point lies outside the envelope")

    def contains(self, op: OperatingPoint) -> bool:
        return (self.low.frequency < op.frequency < self.high.frequency
                and self.low.voltage < op.voltage < self.high.voltage
                and self.low.current <= op.current < self.high.current)


@dataclass
class EnvironmentState:
    temperature: float  # datacenter air temperature, deg C
    humidity: float
    hotspot_factor: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.humidity <= 100.0:
            raise ValueError(f"humidity {self.humidity} outside [0, 100]")
        if self.hotspot_factor < 1.0:
            raise ValueError(f"hotspot factor {self.hotspot_factor} < 1")

    @property
    def effective_temperature(self) -> float:
        return self.temperature * self.hotspot_factor


@dataclass(frozen=True)
class DefectSpec:
    faulty_fraction: float
    subset_seed: int
    corruption: CorruptionKind
    base_prob: float
    elec_alpha: float = 0.0
    elec_beta: float = 0.0
    thermal_threshold: float = math.inf
    thermal_gamma: float = 0.0
    aging_onset: float = math.inf  # machine age, days
    aging_ramp: float = 0.0
    soak_min: float = 0.0  # seconds
    transition_window: float = math.inf  # ms

    def __post_init__(self) -> None:
        if not 0.0 < self.faulty_fraction <= 1.0:
            raise ValueError(f"faulty_fraction {self.faulty_fraction} not in (0, 1]")
        if not 0.0 < self.base_prob <= 1.0:
            raise ValueError(f"base_prob {self.base_prob} not in (0, 1]")
        for name in ("elec_alpha", "elec_beta", "thermal_gamma", "aging_ramp", "soak_min"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.transition_window <= 0:
            raise ValueError("transition_window must be > 0")
        if self.soak_min > 0 and math.isfinite(self.transition_window):
            raise ValueError("a defect cannot be both soak-gated and transition-gated")
        if not 0 <= self.subset_seed <= MASK64:
            raise ValueError("subset_seed must be a 64-bit unsigned integer")

    @property
    def transition_gated(self) -> bool:
        return math.isfinite(self.transition_window)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corruption"] = corruption_to_dict(self.corruption)
        for k, v in d.items():
            if isinstance(v, float) and math.isinf(v):
                d[k] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DefectSpec":
        d = dict(d)
        d["corruption"] = corruption_from_dict(d["corruption"])
        for k, v in d.items():
            if v == "inf":
                d[k] = math.inf
        return cls(**d)


@dataclass(slots=True)
class Machine:
    id: int
    machine_class: str
    op_point: OperatingPoint
    env: EnvironmentState
    core_count: int
    age_days: float = 0.0  # age at t = 0
    nominal: OperatingPoint | None = None  # class nominal; defaults to op_point
    defect: DefectSpec | None = None
    defect_class: DefectClass | None = None
    datacenter: int = 0
    workload: str = "general"
    load_level: float = 0.5
    state: MachineState = MachineState.PRODUCTION
    cores_busy: int = 0
    continuous_test_seconds: float = 0.0
    last_transition_ms: float = -math.inf
    maintenance_kind: MaintenanceKind | None = None
    drain_started_ms: int | None = None

    def __post_init__(self) -> None:
        if self.core_count <= 0:
            raise ValueError("core_count must be positive")
        if not 0 <= self.cores_busy <= self.core_count:
            raise ValueError("cores_busy outside [0, core_count]")

    def age_at(self, now_ms: float) -> float:
        return self.age_days + now_ms / float(DAY_MS)


def transition(machine: Machine, to: MachineState, now_ms: int = 0,
               kind: MaintenanceKind | None = None) -> Machine:
    """Move ``machine`` along a legal lifecycle edge (in place; returned for chaining)."""
    src = machine.state
    if (src, to) not in LEGAL_TRANSITIONS:
        raise IllegalTransition(machine.id, src, to)
    machine.state = to
    if to is MachineState.DRAINING:
        machine.drain_started_ms = now_ms
    elif to is MachineState.MAINTENANCE:
        machine.maintenance_kind = kind
    elif to is MachineState.PRODUCTION:
        machine.continuous_test_seconds = 0.0
        machine.maintenance_kind = None
    if src is MachineState.TESTING_SCANNER:
        machine.continuous_test_seconds = 0.0
    return machine


# -- classification ------------------------------------------------------------

def detect_prob(x: float, n: float) -> float:
    """``1 - (1 - x)**n`` without cancellation."""
    if x >= 1.0:
        return 1.0 if n > 0 else 0.0
    return -math.expm1(n * math.log1p(-x))


def classify_defect(spec: DefectSpec, scanner_profile: "TestProfile", ripple_profile: "TestProfile",
                    horizon_days: float = 180.0) -> DefectClass:
    for prof in (scanner_profile, ripple_profile):
        if not prof.patterns or any(p.iterations <= 0 for p in prof.patterns):
            raise ValueError(f"{prof.mode.value} profile has a pattern with zero iterations")
    ripple_slice_s = max(p.slice_budget_ms for p in ripple_profile.patterns) / 1000.0
    if ripple_slice_s < spec.soak_min <= scanner_profile.test_duration_s:
        return DefectClass.SCANNER_ONLY
    if spec.transition_gated:
        return DefectClass.RIPPLE_TRANSITION
    if spec.soak_min == 0.0:
        x = spec.faulty_fraction * spec.base_prob
        n_scan = scanner_profile.trials_per_day * horizon_days * sum(p.iterations for p in scanner_profile.patterns)
        n_rip = (ripple_profile.trials_per_day * horizon_days
                 * sum(p.iterations for p in ripple_profile.patterns) / len(ripple_profile.patterns))
        if detect_prob(x, n_scan) < 0.5 and detect_prob(x, n_rip) >= 0.99:
            return DefectClass.RIPPLE_REPETITION
    return DefectClass.BOTH


# -- fleet sampling ----------------------------------------------------------------

class TemplateError(RuntimeError):
    pass


def _pick(weights: Iterable[tuple[object, float]], u: float):
    items = list(weights)
    total = sum(w for _, w in items)
    acc = 0.0
    for item, w in items:
        acc += w / total
        if u < acc:
            return item
    return items[-1][0]


def _draw_range(rng: CounterStream, ctr: int, bounds: tuple[float, float], log: bool = False) -> float:
    lo, hi = bounds
    u = rng.uniform(ctr)
    if lo == hi:
        return lo
    if log:
        return math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
    return lo + u * (hi - lo)


def sample_defect(template: "DefectTemplate", rng: CounterStream, age0: float, attempt: int,
                  horizon_days: float | None = None) -> DefectSpec:
    base = attempt * 32
    c = lambda i: base + i  # noqa: E731
    rho = _draw_range(rng, c(0), template.rho, log=True)
    p0 = _draw_range(rng, c(1), template.p0, log=True)
    if template.reference_horizon_days is not None and horizon_days:
        p0 = min(1.0, p0 * template.reference_horizon_days / horizon_days)
    kind_name = _pick(template.corruption.items(), rng.uniform(c(2)))
    if kind_name == "BitFlip":
        corruption: CorruptionKind = BitFlip(int(rng.u64(c(3)) % 64))
    elif kind_name == "OffByDelta":
        corruption = OffByDelta(int(rng.u64(c(3)) % 16) + 1)
    else:
        corruption = ForcedConstant(0)
    onset, ramp = math.inf, 0.0
    if template.aging_fraction > 0 and rng.uniform(c(4)) < template.aging_fraction:
        onset = age0 + _draw_range(rng, c(5), template.aging_onset_days)
        ramp = _draw_range(rng, c(6), template.aging_ramp_days)
    dt = math.inf
    if template.transition_window_ms is not None:
        dt = _draw_range(rng, c(7), template.transition_window_ms)
    return DefectSpec(
        faulty_fraction=rho,
        subset_seed=rng.u64(c(8)),
        corruption=corruption,
        base_prob=p0,
        elec_alpha=_draw_range(rng, c(9), template.elec_alpha),
        elec_beta=_draw_range(rng, c(10), template.elec_beta),
        thermal_threshold=_draw_range(rng, c(11), template.thermal_threshold),
        thermal_gamma=_draw_range(rng, c(12), template.thermal_gamma),
        aging_onset=onset,
        aging_ramp=ramp,
        soak_min=_draw_range(rng, c(13), template.soak_min_s),
        transition_window=dt,
    )


def sample_fleet(config: "SimConfig", seed: int | None = None, max_retries: int = 64) -> list[Machine]:
    """Deterministic synthetic fleet; defective machines carry a spec of their template's class."""
    seed = config.global_seed if seed is None else seed
    if not 0.0 <= config.defect_rate < 1.0:
        raise ValueError("defect_rate must be in [0, 1)")
    scanner_profile = config.scanner_reference_profile()
    ripple_profile = config.ripple_profile()
    classes = [(mc, mc.weight) for mc in config.machine_classes]
    mix = [(DefectClass(k), v) for k, v in sorted(config.defect_mix.items())]
    n_dc = len(config.environment.datacenters)
    fleet = []
    for mid in range(config.fleet_size):
        rng = CounterStream.for_machine(seed, mid, "fleet")
        mc = _pick(classes, rng.uniform(0))
        nominal = mc.nominal
        spread = mc.op_spread
        op = OperatingPoint(
            frequency=nominal.frequency * (1.0 + spread * (2.0 * rng.uniform(1) - 1.0)),
            voltage=nominal.voltage * (1.0 + spread * (2.0 * rng.uniform(2) - 1.0)),
            current=nominal.current * (1.0 + spread * (2.0 * rng.uniform(3) - 1.0)),
        )
        dc = mid % n_dc
        age0 = _draw_range(rng, 4, config.initial_age_days)
        load = _draw_range(rng, 5, config.workload.load_range)
        machine = Machine(
            id=mid, machine_class=mc.name, op_point=op,
            env=EnvironmentState(config.environment.datacenters[dc].baseline_c,
                                 config.environment.datacenters[dc].humidity),
            core_count=mc.core_count, age_days=age0, nominal=nominal, datacenter=dc, workload=mc.workload,
            load_level=load,
        )
        if rng.uniform(6) < config.defect_rate:
            cls = _pick(mix, rng.uniform(7))
            template = config.templates[cls.value]
            drng = CounterStream(derive_key(seed, mid, "defect"))
            for attempt in range(max_retries):
                spec = sample_defect(template, drng, age0, attempt, config.horizon_days)
                if classify_defect(spec, scanner_profile, ripple_profile, config.horizon_days) is cls:
                    break
            else:
                raise TemplateError(f"template {cls.value} did not yield its class in {max_retries} draws")
            machine.defect = spec
            machine.defect_class = cls
        fleet.append(machine)
    return fleet


@dataclass
class FleetSummary:
    size: int
    defective: int
    by_class: dict[str, int] = field(default_factory=dict)


def summarize_fleet(fleet: list[Machine]) -> FleetSummary:
    by: dict[str, int] = {}
    for m in fleet:
        if m.defect_class is not None:
            by[m.defect_class.value] = by.get(m.defect_class.value, 0) + 1
    return FleetSummary(len(fleet), sum(by.values()), dict(sorted(by.items())))
