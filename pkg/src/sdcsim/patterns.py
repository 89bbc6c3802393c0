"""Seeded test patterns, golden references and (simulated) execution.

Golden values come from exact arithmetic: integer families wrap modulo
2**64 on Python ints, float families are evaluated as exact rationals and
rounded once to the nearest double. They are therefore independent of the
FPU that :mod:`sdcsim.kernels.arith` exercises in the self-check.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from fractions import Fraction
from functools import cached_property
from typing import Union

import numpy as np

from .kernels import arith
from .kernels import patterns as kp
from .kernels.rng import MASK64, CounterStream, draw_int, mix64_int
from .model import BitFlip, DefectSpec, ForcedConstant, Machine, MachineState, OffByDelta

Value = Union[int, float]


class Family(IntEnum):
    MulInt64 = arith.FAM_MUL
    PowFloat64 = arith.FAM_POW
    FmaFloat64 = arith.FAM_FMA
    ShiftXorInt64 = arith.FAM_SHX

    @property
    def is_float(self) -> bool:
        return self in (Family.PowFloat64, Family.FmaFloat64)


class Mode(str, Enum):
    SCANNER = "Scanner"
    RIPPLE = "Ripple"


class ModeStateMismatch(RuntimeError):
    pass


# -- value <-> bits ------------------------------------------------------------------

def float_bits(x: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", x))[0]


def bits_float(b: int) -> float:
    return struct.unpack("<d", struct.pack("<Q", b & MASK64))[0]


def to_signed(b: int) -> int:
    b &= MASK64
    return b - (1 << 64) if b >> 63 else b


def value_bits(family: Family, v: Value) -> int:
    if Family(family).is_float:
        return float_bits(float(v))
    return int(v) & MASK64


def bits_value(family: Family, b: int) -> Value:
    return bits_float(b) if Family(family).is_float else to_signed(b)


_ARITY = {Family.MulInt64: 2, Family.PowFloat64: 2, Family.FmaFloat64: 3, Family.ShiftXorInt64: 2}


def encode_operands(family: Family, operands: tuple) -> tuple[int, int, int]:
    family = Family(family)
    if len(operands) != _ARITY[family]:
        raise ValueError(f"{family.name} takes {_ARITY[family]} operands, got {len(operands)}")
    if family is Family.PowFloat64:
        base, k = operands
        if k != int(k):
            raise ValueError("PowFloat64 exponent must be an integer")
        return float_bits(float(base)), int(k) & MASK64, 0
    if family is Family.FmaFloat64:
        a, b, c = (float_bits(float(x)) for x in operands)
        return a, b, c
    return int(operands[0]) & MASK64, int(operands[1]) & MASK64, 0


def decode_operands(family: Family, lanes: tuple[int, int, int]) -> tuple:
    family = Family(family)
    l0, l1, l2 = (int(x) for x in lanes)
    if family is Family.PowFloat64:
        return bits_float(l0), to_signed(l1)
    if family is Family.FmaFloat64:
        return bits_float(l0), bits_float(l1), bits_float(l2)
    return to_signed(l0), to_signed(l1)


# -- golden reference ----------------------------------------------------------------

def _round_fraction(q: Fraction) -> float:
    try:
        return float(q)
    except OverflowError:
        return math.copysign(math.inf, q)


def reference_eval(family: Family, operands: tuple) -> Value:
    """Correct result of one operation, independent of the host FPU."""
    family = Family(family)
    if family.is_float:
        floats = operands if family is Family.FmaFloat64 else operands[:1]
        if not all(math.isfinite(float(x)) for x in floats):
            raise ValueError(f"{family.name} requires finite operands")
    if family is Family.MulInt64:
        a, b = (int(x) & MASK64 for x in operands)
        return to_signed(a * b)
    if family is Family.ShiftXorInt64:
        x, s = int(operands[0]) & MASK64, int(operands[1]) & 63
        rot = ((x << s) | (x >> (64 - s))) & MASK64
        return to_signed(x ^ rot)
    if family is Family.PowFloat64:
        base, k = float(operands[0]), int(operands[1])
        if k == 0:
            return 1.0
        if base == 0.0:
            if k < 0:
                raise ValueError("zero base with negative exponent")
            return base if k % 2 else 0.0
        return _round_fraction(Fraction(base) ** k)
    a, b, c = (float(x) for x in operands)
    exact = Fraction(a) * Fraction(b) + Fraction(c)
    if exact == 0:
        prod_neg = math.copysign(1.0, a) * math.copysign(1.0, b) < 0
        if (a == 0.0 or b == 0.0) and c == 0.0 and prod_neg and math.copysign(1.0, c) < 0:
            return -0.0
        return 0.0
    return _round_fraction(exact)


def reference_bits(family: Family, lanes: tuple[int, int, int]) -> int:
    return value_bits(family, reference_eval(family, decode_operands(family, lanes)))


def apply_corruption(kind, family: Family, expected_bits: int) -> int:
    """Bit pattern a defective core returns instead of ``expected_bits``."""
    if isinstance(kind, ForcedConstant):
        return value_bits(family, kind.value)
    if isinstance(kind, BitFlip):
        return expected_bits ^ (1 << kind.bit)
    if isinstance(kind, OffByDelta):
        # integers: wrapping add; floats: move the bit pattern by delta ULPs
        return (expected_bits + kind.delta) & MASK64
    raise TypeError(f"unknown corruption kind {kind!r}")


# -- patterns and profiles -----------------------------------------------------

@dataclass(frozen=True)
class TestPattern:
    pattern_id: int
    seed: int
    family: Family
    iterations: int
    slice_budget_ms: float
    operands: tuple | None = None  # hand-crafted schedule; cycles if shorter than iterations

    __test__ = False

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.slice_budget_ms <= 0:
            raise ValueError("slice_budget_ms must be > 0")

    @cached_property
    def lanes(self) -> np.ndarray:
        if self.operands is None:
            return kp.pattern_lanes(int(self.family), self.seed, self.iterations)
        enc = [encode_operands(self.family, op) for op in self.operands]
        rows = [enc[i % len(enc)] for i in range(self.iterations)]
        return np.array(rows, dtype=np.uint64).reshape(self.iterations, 3)

    def lane(self, j: int) -> tuple[int, int, int]:
        """Lanes of iteration ``j`` without materializing the whole schedule."""
        if self.operands is None and "lanes" not in self.__dict__:
            return kp.lanes_int(int(self.family), self.seed, j)
        return tuple(int(x) for x in self.lanes[j])

    def operand_list(self) -> list[tuple]:
        return [decode_operands(self.family, tuple(row)) for row in self.lanes]

    def reseeded(self, nonce: int) -> "TestPattern":
        """Same family and length, fresh operand data (crafted schedules are kept)."""
        if self.operands is not None:
            return self
        return TestPattern(self.pattern_id, draw_int(self.seed, nonce), self.family,
                           self.iterations, self.slice_budget_ms)


def generate_pattern(seed: int, family: Family | str, iterations: int, slice_budget_ms: float,
                     pattern_id: int | None = None) -> TestPattern:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    fam = Family[family] if isinstance(family, str) else Family(family)
    pid = pattern_id if pattern_id is not None else mix64_int(seed ^ int(fam)) & 0x7FFFFFFF
    return TestPattern(pid, seed & MASK64, fam, int(iterations), float(slice_budget_ms))


def crafted_pattern(family: Family | str, operands: list[tuple], slice_budget_ms: float = 1.0,
                    iterations: int | None = None, pattern_id: int = 0) -> TestPattern:
    fam = Family[family] if isinstance(family, str) else Family(family)
    return TestPattern(pattern_id, 0, fam, iterations or len(operands), float(slice_budget_ms),
                       tuple(tuple(op) for op in operands))


@dataclass(frozen=True)
class TestProfile:
    mode: Mode
    test_duration_s: float
    patterns: tuple[TestPattern, ...]
    trials_per_day: float
    name: str = ""

    __test__ = False

    def __post_init__(self) -> None:
        if self.mode is Mode.RIPPLE and any(p.slice_budget_ms > 1000.0 for p in self.patterns):
            raise ValueError("ripple slices are bounded by 1000 ms")
        if self.test_duration_s <= 0:
            raise ValueError("test_duration_s must be > 0")


@dataclass(frozen=True)
class Mismatch:
    iteration_index: int
    operands: tuple
    expected: Value
    observed: Value

    def to_dict(self) -> dict:
        return {"iteration_index": self.iteration_index, "operands": list(self.operands),
                "expected": self.expected, "observed": self.observed}


PASS = "Pass"


@dataclass(frozen=True)
class TestExecutionRecord:
    machine_id: int
    pattern_id: int
    mode: Mode
    start_time: int
    duration_ms: float
    outcome: Union[str, Mismatch]

    __test__ = False

    @property
    def passed(self) -> bool:
        return self.outcome == PASS

    def to_dict(self) -> dict:
        out = self.outcome if self.passed else {"Mismatch": self.outcome.to_dict()}
        return {"machine_id": self.machine_id, "pattern_id": self.pattern_id, "mode": self.mode.value,
                "start_time": self.start_time, "duration_ms": self.duration_ms, "outcome": out}


# -- manifestation ---------------------------------------------------------------

def electrical_factor(spec: DefectSpec, machine: Machine, nominal) -> float:
    op = machine.op_point
    return (1.0 + spec.elec_alpha * abs(op.voltage - nominal.voltage) / nominal.voltage
            + spec.elec_beta * abs(op.frequency - nominal.frequency) / nominal.frequency)


def thermal_factor(spec: DefectSpec, temperature: float) -> float:
    if temperature <= spec.thermal_threshold:
        return 1.0
    return 1.0 + spec.thermal_gamma * (temperature - spec.thermal_threshold)


def age_factor(spec: DefectSpec, age_days: float) -> float:
    onset, ramp = spec.aging_onset, spec.aging_ramp
    if math.isinf(onset):
        return 1.0
    if age_days < onset:
        return 0.0
    if ramp <= 0.0 or age_days >= onset + ramp:
        return 1.0
    return (age_days - onset) / ramp


def accelerated_probability(spec: DefectSpec, machine: Machine, now: float, nominal=None) -> float:
    """``p0`` times every continuous factor, clamped; the 0/1 gates are left out."""
    nominal = nominal or machine.nominal or machine.op_point
    p = (spec.base_prob * electrical_factor(spec, machine, nominal)
         * thermal_factor(spec, machine.env.effective_temperature) * age_factor(spec, machine.age_at(now)))
    return min(1.0, max(0.0, p))


def soak_gate(spec: DefectSpec, continuous_test_seconds: float) -> float:
    return 1.0 if continuous_test_seconds >= spec.soak_min else 0.0


def transition_gate(spec: DefectSpec, mode: Mode, now: float, last_transition_ms: float) -> float:
    if not spec.transition_gated:
        return 1.0
    return 1.0 if (mode is Mode.RIPPLE and now - last_transition_ms <= spec.transition_window) else 0.0


def manifest_probability(spec: DefectSpec, machine: Machine, mode: Mode, now: float, nominal=None) -> float:
    return (accelerated_probability(spec, machine, now, nominal)
            * soak_gate(spec, machine.continuous_test_seconds)
            * transition_gate(spec, mode, now, machine.last_transition_ms))


# -- execution -----------------------------------------------------------------------

def _check_mode(machine: Machine, mode: Mode) -> None:
    if mode is Mode.SCANNER and machine.state is not MachineState.TESTING_SCANNER:
        raise ModeStateMismatch(f"scanner execution on machine {machine.id} in state {machine.state.value}")
    if mode is Mode.RIPPLE and (machine.state is not MachineState.PRODUCTION
                                or machine.cores_busy >= machine.core_count):
        raise ModeStateMismatch(f"ripple execution on machine {machine.id} needs Production with a free core")


def find_mismatch(machine: Machine, pattern: TestPattern, mode: Mode, now: float, key: int, ctr: int,
                  p: float, cts0: float, use_numba: bool | None = None) -> Mismatch | None:
    """First iteration whose observed bits differ from the golden bits, if any."""
    spec = machine.defect
    if spec is None or p <= 0.0:
        return None
    dur_s = pattern.slice_budget_ms / 1000.0
    if spec.transition_gated:
        if mode is not Mode.RIPPLE:
            return None  # no workload to transition from
        trans = (spec.transition_window - (now - machine.last_transition_ms)) / 1000.0
    else:
        trans = math.inf
    lanes = pattern.lanes if pattern.operands is not None else None
    start = 0
    while start < pattern.iterations:
        j = kp.first_hit(int(pattern.family), pattern.seed, pattern.iterations, lanes, spec.subset_seed,
                         spec.faulty_fraction, p, dur_s, cts0, spec.soak_min, trans, key, ctr, start,
                         use_numba=use_numba)
        if j < 0:
            return None
        mm = mismatch_at(spec, pattern, j)
        if mm is not None:
            return mm
        start = j + 1
    return None


def mismatch_at(spec: DefectSpec, pattern: TestPattern, j: int) -> Mismatch | None:
    """The corrupted result of iteration ``j``, or None when corruption leaves it unchanged."""
    fam = pattern.family
    operands = decode_operands(fam, pattern.lane(j))
    golden = reference_eval(fam, operands)
    expected = value_bits(fam, golden)
    observed = apply_corruption(spec.corruption, fam, expected)
    if observed == expected:
        return None
    return Mismatch(j, operands, golden, bits_value(fam, observed))


def execute_pattern(machine: Machine, pattern: TestPattern, profile: TestProfile, now: int,
                    rng_stream: CounterStream, use_numba: bool | None = None) -> TestExecutionRecord:
    mode = profile.mode
    _check_mode(machine, mode)
    ctr = rng_stream.next_counter()
    if mode is Mode.RIPPLE:
        machine.last_transition_ms = now
        cts0 = 0.0
    else:
        cts0 = machine.continuous_test_seconds
    mm = None
    if machine.defect is not None:
        p = accelerated_probability(machine.defect, machine, now)
        mm = find_mismatch(machine, pattern, mode, now, rng_stream.key, ctr, p, cts0, use_numba)
    if mm is None:
        duration = pattern.slice_budget_ms
    else:
        duration = (mm.iteration_index + 1) * pattern.slice_budget_ms / pattern.iterations
    if mode is Mode.SCANNER:
        machine.continuous_test_seconds = cts0 + duration / 1000.0
    else:
        machine.continuous_test_seconds = duration / 1000.0
    return TestExecutionRecord(machine.id, pattern.pattern_id, mode, int(now), duration,
                               PASS if mm is None else mm)


# -- real-host self-check ----------------------------------------------------------

@dataclass
class FamilyCheck:
    family: str
    iterations: int
    mismatches: int
    first_mismatch: dict | None = None


@dataclass
class SelfCheckReport:
    iterations: int
    seconds: float
    backend: str
    families: list[FamilyCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(f.mismatches == 0 for f in self.families)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "iterations": self.iterations, "seconds": round(self.seconds, 3),
                "backend": self.backend,
                "families": [{"family": f.family, "iterations": f.iterations, "mismatches": f.mismatches,
                              "first_mismatch": f.first_mismatch} for f in self.families]}


def _golden_block(family: Family, lanes: np.ndarray) -> np.ndarray:
    return np.array([reference_bits(family, (int(a), int(b), int(c))) for a, b, c in lanes], dtype=np.uint64)


def selfcheck(total_iterations: int = 1_000_000, seed: int = 0x5EED, use_numba: bool | None = None,
              golden_stride: int = 1, time_budget_s: float | None = None) -> SelfCheckReport:
    """Run every family on this host and compare with the exact references.

    ``golden_stride`` > 1 checks the exact reference on every k-th iteration
    only and cross-checks the rest against a second host evaluation path.
    """
    from ._accel import backend_name

    t0 = time.perf_counter()
    per_family = -(-total_iterations // len(Family))
    report = SelfCheckReport(0, 0.0, backend_name() if use_numba is None else ("numba" if use_numba else "numpy"))
    for fam in Family:
        lanes = kp.pattern_lanes(int(fam), mix64_int(seed ^ (int(fam) + 1)), per_family, use_numba)
        observed = arith.host_eval(int(fam), lanes, use_numba)
        check = FamilyCheck(fam.name, per_family, 0)
        idx = np.arange(0, per_family, max(1, golden_stride))
        golden = _golden_block(fam, lanes[idx])
        bad = np.flatnonzero(golden != observed[idx])
        if golden_stride > 1:
            twin = arith.host_eval(int(fam), lanes, not use_numba if use_numba is not None else False)
            bad = np.union1d(idx[bad], np.flatnonzero(twin != observed))
        else:
            bad = idx[bad]
        check.mismatches = int(bad.size)
        if bad.size:
            i = int(bad[0])
            row = tuple(int(x) for x in lanes[i])
            check.first_mismatch = {
                "iteration": i, "operands": list(decode_operands(fam, row)),
                "expected": bits_value(fam, reference_bits(fam, row)),
                "observed": bits_value(fam, int(observed[i])),
            }
        report.families.append(check)
        report.iterations += per_family
    report.seconds = time.perf_counter() - t0
    return report
