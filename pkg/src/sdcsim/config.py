"""Scenario configuration: a single JSON document mapped onto dataclasses.

Every field has a default, so ``{}`` is a valid scenario. Unknown keys are
rejected (a misspelled section would otherwise silently fall back to its
defaults). Ranges are ``[lo, hi]`` pairs; ``"inf"`` / ``null`` mean infinity
where a field allows it.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .kernels.rng import MASK64, derive_key
from .model import DefectClass, MaintenanceKind, OperatingPoint
from .patterns import Family, Mode, TestPattern, TestProfile, generate_pattern

Range = tuple[float, float]


class ConfigError(ValueError):
    pass


class ParseError(ConfigError):
    def __init__(self, msg: str, line: int, column: int, path: str = "<config>"):
        super().__init__(f"{path}:{line}:{column}: {msg}")
        self.line = line
        self.column = column


class ValidationError(ConfigError):
    def __init__(self, invariant: str, msg: str):
        super().__init__(f"{invariant}: {msg}")
        self.invariant = invariant


# -- sections ------------------------------------------------------------------

@dataclass
class DefectTemplate:
    rho: Range = (0.02, 0.06)
    p0: Range = (0.04, 0.05)
    elec_alpha: Range = (0.0, 0.0)
    elec_beta: Range = (0.0, 0.0)
    thermal_threshold: Range = (math.inf, math.inf)
    thermal_gamma: Range = (0.0, 0.0)
    soak_min_s: Range = (0.0, 0.0)
    transition_window_ms: Range | None = None
    aging_fraction: float = 0.0
    aging_onset_days: Range = (0.0, 0.0)  # relative to the machine's age at t = 0
    aging_ramp_days: Range = (0.0, 0.0)
    # p0 is calibrated at this horizon and scaled by reference / horizon_days (None: used as is)
    reference_horizon_days: float | None = None
    corruption: dict[str, float] = field(default_factory=lambda: {
        "BitFlip": 0.5, "OffByDelta": 0.3, "ForcedConstant": 0.2})


def default_templates() -> dict[str, DefectTemplate]:
    accel = dict(elec_alpha=(0.0, 0.5), elec_beta=(0.0, 0.5), thermal_threshold=(32.0, 40.0),
                 thermal_gamma=(0.0, 0.03))
    return {
        DefectClass.BOTH.value: DefectTemplate(rho=(0.02, 0.06), p0=(0.03, 0.05), **accel),
        DefectClass.SCANNER_ONLY.value: DefectTemplate(rho=(0.05, 0.1), p0=(0.2, 0.4), soak_min_s=(61.0, 180.0), **accel),
        DefectClass.RIPPLE_TRANSITION.value: DefectTemplate(rho=(0.02, 0.08), p0=(0.05, 0.2),
                                                            transition_window_ms=(100.0, 2000.0), **accel),
        DefectClass.RIPPLE_REPETITION.value: DefectTemplate(rho=(0.01, 0.02), p0=(1.2e-3, 1.5e-3),
                                                            reference_horizon_days=180.0),
    }


@dataclass
class MachineClassConfig:
    name: str = "std64"
    weight: float = 1.0
    core_count: int = 64
    workload: str = "general"
    nominal_ghz: float = 2.5
    nominal_volts: float = 1.0
    nominal_amps: float = 100.0
    envelope_frac: float = 0.10
    op_spread: float = 0.03

    @property
    def nominal(self) -> OperatingPoint:
        return OperatingPoint(self.nominal_ghz, self.nominal_volts, self.nominal_amps)


def default_machine_classes() -> list[MachineClassConfig]:
    return [
        MachineClassConfig("web32", 0.3, 32, "web", 3.0, 0.95, 80.0),
        MachineClassConfig("std64", 0.5, 64, "general", 2.5, 1.0, 100.0),
        MachineClassConfig("db96", 0.2, 96, "storage", 2.2, 1.05, 140.0),
    ]


@dataclass
class DatacenterConfig:
    baseline_c: float = 24.0
    humidity: float = 45.0
    seasonal_amplitude_c: float = 5.0
    seasonal_phase_days: float = 0.0
    noise_c: float = 1.0


def default_datacenters() -> list[DatacenterConfig]:
    return [DatacenterConfig(22.0, 40.0, 4.0, 0.0), DatacenterConfig(24.0, 45.0, 5.0, 30.0),
            DatacenterConfig(26.0, 50.0, 5.0, 60.0), DatacenterConfig(28.0, 55.0, 6.0, 90.0)]


@dataclass
class EnvironmentConfig:
    datacenters: list[DatacenterConfig] = field(default_factory=default_datacenters)
    seasonal_period_days: float = 365.0
    step_hours: float = 6.0
    hotspot_redraw_prob: float = 0.01
    hotspot_prob: float = 0.1  # chance a (re)draw lands on a hotspot rather than 1.0
    hotspot_range: Range = (1.05, 1.3)


@dataclass
class MaintenanceKindConfig:
    weight: float = 0.25
    window_s: Range = (60.0, 600.0)


def default_maintenance_kinds() -> dict[str, MaintenanceKindConfig]:
    return {
        MaintenanceKind.FIRMWARE.value: MaintenanceKindConfig(0.3, (120.0, 900.0)),
        MaintenanceKind.KERNEL.value: MaintenanceKindConfig(0.4, (60.0, 300.0)),
        MaintenanceKind.PROVISIONING.value: MaintenanceKindConfig(0.15, (600.0, 3600.0)),
        MaintenanceKind.REPAIR.value: MaintenanceKindConfig(0.15, (60.0, 600.0)),
    }


@dataclass
class MaintenanceConfig:
    mean_interarrival_days: float = 45.0
    kinds: dict[str, MaintenanceKindConfig] = field(default_factory=default_maintenance_kinds)
    drain_minutes: float = 30.0
    undrain_minutes: float = 10.0


@dataclass
class ScannerTierConfig:
    name: str = "quick"
    min_window_s: float = 60.0
    families: list[str] = field(default_factory=lambda: ["MulInt64"])


def default_tiers() -> list[ScannerTierConfig]:
    return [ScannerTierConfig("quick", 60.0, ["MulInt64"]),
            ScannerTierConfig("deep", 240.0, ["MulInt64", "PowFloat64", "FmaFloat64", "ShiftXorInt64"])]


@dataclass
class ScannerConfig:
    enabled: bool = True
    test_duration_s: float = 60.0
    iterations_per_test: int = 500
    tiers: list[ScannerTierConfig] = field(default_factory=default_tiers)
    confirm_repro_runs: int = 3
    repair_rule: dict[str, str] = field(default_factory=lambda: {"repro": "ComponentSwap", "non_repro": "SoftRepair"})
    repair_hours: dict[str, float] = field(default_factory=lambda: {"ComponentSwap": 48.0, "SoftRepair": 4.0})
    snapshot_fields: list[str] = field(default_factory=lambda: ["op_point", "temperature", "age_days"])


@dataclass
class ABConfig:
    experiment_seed: int = 1
    variant_a: list[str] = field(default_factory=lambda: ["MulInt64"])
    variant_b: list[str] = field(default_factory=lambda: ["MulInt64"])
    iterations_a: int = 64
    iterations_b: int = 64


@dataclass
class RippleConfig:
    enabled: bool = True
    trials_per_day: float = 40.0
    slice_ms: float = 40.0
    tax_threshold: float = 0.01
    tax_overrides: dict[str, float] = field(default_factory=dict)
    iterations_per_slice: int = 64
    families: list[str] = field(default_factory=lambda: ["MulInt64", "PowFloat64", "FmaFloat64", "ShiftXorInt64"])
    max_test_cores: int = 1
    rollout_delay_days: float = 0.0
    variant_assignment: ABConfig | None = None

    def theta_for(self, workload: str) -> float:
        return self.tax_overrides.get(workload, self.tax_threshold)


@dataclass
class WorkloadConfig:
    load_range: Range = (0.3, 0.7)
    diurnal_amplitude: float = 0.3
    diurnal_peak_hour: float = 14.0
    noise: float = 0.05
    ops_per_hour: float = 1e6


@dataclass
class OutputConfig:
    trace_healthy_sample: int = 100  # healthy machines whose slice starts are logged in full


@dataclass
class SimConfig:
    fleet_size: int = 10_000
    defect_rate: float = 0.02
    defect_mix: dict[str, float] = field(default_factory=lambda: {
        DefectClass.BOTH.value: 0.70, DefectClass.SCANNER_ONLY.value: 0.23,
        DefectClass.RIPPLE_TRANSITION.value: 0.04, DefectClass.RIPPLE_REPETITION.value: 0.03})
    horizon_days: float = 180.0
    global_seed: int = 0
    initial_age_days: Range = (30.0, 1095.0)
    maintenance: MaintenanceConfig = field(default_factory=MaintenanceConfig)
    scanner: ScannerConfig = field(default_factory=ScannerConfig)
    ripple: RippleConfig = field(default_factory=RippleConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    machine_classes: list[MachineClassConfig] = field(default_factory=default_machine_classes)
    templates: dict[str, DefectTemplate] = field(default_factory=default_templates)
    output: OutputConfig = field(default_factory=OutputConfig)

    # -- derived profiles ----------------------------------------------------

    def _pattern_seed(self, *parts) -> int:
        return derive_key(self.global_seed, "pattern", *parts)

    def scanner_tiers(self) -> list[tuple[float, TestProfile]]:
        sc = self.scanner
        tiers = []
        rate = 0.0 if math.isinf(self.maintenance.mean_interarrival_days) else 1.0 / self.maintenance.mean_interarrival_days
        for t_idx, tier in enumerate(sc.tiers):
            pats = tuple(
                generate_pattern(self._pattern_seed("scanner", tier.name, i), fam, sc.iterations_per_test,
                                 sc.test_duration_s * 1000.0, pattern_id=100 * (t_idx + 1) + i)
                for i, fam in enumerate(tier.families))
            tiers.append((tier.min_window_s, TestProfile(Mode.SCANNER, sc.test_duration_s * len(pats), pats,
                                                         rate, tier.name)))
        return tiers

    def scanner_reference_profile(self) -> TestProfile:
        """The largest tier; it sets the scanner's per-window budget for classification."""
        return self.scanner_tiers()[-1][1]

    def ripple_profile(self, families: list[str] | None = None, iterations: int | None = None,
                       tag: str = "ripple") -> TestProfile:
        rc = self.ripple
        fams = families or rc.families
        pats = tuple(generate_pattern(self._pattern_seed(tag, i), fam, iterations or rc.iterations_per_slice,
                                      rc.slice_ms, pattern_id=10 + i) for i, fam in enumerate(fams))
        return TestProfile(Mode.RIPPLE, rc.slice_ms / 1000.0, pats, rc.trials_per_day, tag)

    def to_dict(self) -> dict:
        return _to_jsonable(self)


# -- generic (de)serialisation -------------------------------------------------

def _to_jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _number(value: Any, where: str) -> float:
    if value is None or value == "inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(where, f"expected a number, got {value!r}")
    return float(value)


def _convert(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        non_none = [a for a in args if a is not type(None)]
        if value is None and len(non_none) < len(args):
            return None
        return _convert(non_none[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ValidationError(where, f"expected an object, got {type(value).__name__}")
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ValidationError(where, f"expected a list of {len(args)} numbers")
        out = tuple(_number(v, where) for v in value)
        if out[0] > out[1]:
            raise ValidationError(where, f"range lower bound {out[0]} exceeds upper bound {out[1]}")
        return out
    if origin is list:
        if not isinstance(value, list):
            raise ValidationError(where, "expected a list")
        return [_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ValidationError(where, "expected an object")
        return {str(k): _convert(args[1], v, f"{where}.{k}") for k, v in value.items()}
    if tp is float:
        return _number(value, where)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(where, f"expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ValidationError(where, f"expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ValidationError(where, f"expected a string, got {value!r}")
        return value
    return value


_HINTS: dict[type, dict] = {}


def _build(cls: type, data: dict, where: str):
    hints = _HINTS.get(cls)
    if hints is None:
        hints = _HINTS[cls] = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(f"{where}.{unknown[0]}" if where else unknown[0],
                              f"unknown key {unknown[0]!r} (allowed: {', '.join(sorted(names))})")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict, merge_templates: bool = True) -> SimConfig:
    if not isinstance(data, dict):
        raise ValidationError("config", "top level must be a JSON object")
    data = dict(data)
    templates = data.pop("templates", None)
    cfg = _build(SimConfig, data, "")
    if templates is not None:
        if not isinstance(templates, dict):
            raise ValidationError("templates", "expected an object")
        merged = default_templates() if merge_templates else {}
        for name, tdata in templates.items():
            if name not in {c.value for c in DefectClass}:
                raise ValidationError(f"templates.{name}", f"unknown defect class {name!r}")
            merged[name] = _convert(DefectTemplate, tdata, f"templates.{name}")
        cfg.templates = merged
    validate(cfg)
    return cfg


def validate(cfg: SimConfig) -> SimConfig:
    def need(cond: bool, invariant: str, msg: str) -> None:
        if not cond:
            raise ValidationError(invariant, msg)

    need(cfg.fleet_size >= 0, "fleet_size", "must be >= 0")
    need(0.0 <= cfg.defect_rate < 1.0, "defect_rate", "must be in [0, 1)")
    need(cfg.horizon_days > 0 and math.isfinite(cfg.horizon_days), "horizon_days", "must be positive and finite")
    need(0 <= cfg.global_seed <= MASK64, "global_seed", "must be a 64-bit unsigned integer")
    classes = {c.value for c in DefectClass}
    need(set(cfg.defect_mix) <= classes, "defect_mix", f"keys must be among {sorted(classes)}")
    need(all(v >= 0 for v in cfg.defect_mix.values()), "defect_mix", "fractions must be >= 0")
    need(abs(sum(cfg.defect_mix.values()) - 1.0) <= 1e-9, "defect_mix",
         f"fractions sum to {sum(cfg.defect_mix.values())!r}, expected 1")
    need(set(cfg.templates) >= {k for k, v in cfg.defect_mix.items() if v > 0}, "templates",
         "every class with a non-zero mix fraction needs a template")
    for name, t in cfg.templates.items():
        need(t.rho[0] > 0 and t.rho[1] <= 1.0, f"templates.{name}.rho", "must lie in (0, 1]")
        need(t.p0[0] > 0 and t.p0[1] <= 1.0, f"templates.{name}.p0", "must lie in (0, 1]")
        need(t.reference_horizon_days is None or t.reference_horizon_days > 0,
             f"templates.{name}.reference_horizon_days", "must be > 0")
        need(not (t.soak_min_s[1] > 0 and t.transition_window_ms is not None), f"templates.{name}",
             "a template cannot be both soak-gated and transition-gated")
        need(set(t.corruption) <= {"BitFlip", "OffByDelta", "ForcedConstant"} and sum(t.corruption.values()) > 0,
             f"templates.{name}.corruption", "weights over BitFlip/OffByDelta/ForcedConstant")
    mt = cfg.maintenance
    need(mt.mean_interarrival_days > 0, "maintenance.mean_interarrival_days", "must be > 0")
    need(set(mt.kinds) <= {k.value for k in MaintenanceKind}, "maintenance.kinds", "unknown maintenance kind")
    need(sum(k.weight for k in mt.kinds.values()) > 0, "maintenance.kinds", "weights must not all be zero")
    need(all(k.window_s[0] > 0 for k in mt.kinds.values()), "maintenance.kinds.window_s", "windows must be > 0")
    sc = cfg.scanner
    need(len(sc.tiers) >= 1, "scanner.tiers", "at least one tier")
    need(all(sc.tiers[i].min_window_s < sc.tiers[i + 1].min_window_s for i in range(len(sc.tiers) - 1)),
         "scanner.tiers", "profile_by_window must be sorted ascending by min_window_s")
    smallest = min(k.window_s[0] for k in mt.kinds.values())
    need(sc.tiers[0].min_window_s <= smallest, "scanner.tiers",
         f"lowest tier min_window_s {sc.tiers[0].min_window_s} exceeds smallest maintenance window {smallest}")
    for tier in sc.tiers:
        need(len(tier.families) >= 1 and all(f in Family.__members__ for f in tier.families),
             f"scanner.tiers.{tier.name}", "families must be known pattern families")
        need(sc.test_duration_s * len(tier.families) <= tier.min_window_s, f"scanner.tiers.{tier.name}",
             "total profile duration must fit its minimum window")
    need(sc.test_duration_s > 0 and sc.iterations_per_test >= 1, "scanner", "test duration and iterations must be positive")
    need(sc.confirm_repro_runs >= 1, "scanner.confirm_repro_runs", "must be >= 1")
    need(set(sc.repair_rule) == {"repro", "non_repro"}
         and set(sc.repair_rule.values()) <= {"ComponentSwap", "SoftRepair"}, "scanner.repair_rule",
         "maps repro/non_repro to ComponentSwap/SoftRepair")
    need(set(sc.repair_hours) >= set(sc.repair_rule.values()), "scanner.repair_hours", "missing repair duration")
    rc = cfg.ripple
    need(0 < rc.slice_ms <= 1000.0, "ripple.slice_ms", "must be in (0, 1000]")
    need(rc.trials_per_day >= 0, "ripple.trials_per_day", "must be >= 0")
    need(rc.trials_per_day <= 60_000, "ripple.trials_per_day", "at most 60000 slices per day are supported")
    need(rc.iterations_per_slice >= 1 and rc.max_test_cores >= 0, "ripple", "iterations >= 1, max_test_cores >= 0")
    need(len(rc.families) >= 1 and all(f in Family.__members__ for f in rc.families), "ripple.families",
         "families must be known pattern families")
    for wl in {"default", *rc.tax_overrides}:
        theta = rc.tax_threshold if wl == "default" else rc.tax_overrides[wl]
        need(0 < theta <= 1, "ripple.tax_threshold", "must be in (0, 1]")
        need(rc.trials_per_day * rc.slice_ms / 86.4e6 <= theta, "ripple.tax_threshold",
             f"implied steady-state tax {rc.trials_per_day * rc.slice_ms / 86.4e6:.3g} exceeds theta {theta}")
    env = cfg.environment
    need(len(env.datacenters) >= 1, "environment.datacenters", "at least one datacenter")
    need(all(0 <= d.humidity <= 100 for d in env.datacenters), "environment.datacenters.humidity", "must be in [0, 100]")
    need(env.hotspot_range[0] >= 1.0, "environment.hotspot_range", "hotspot factors must be >= 1")
    need(0 <= env.hotspot_redraw_prob <= 1 and 0 <= env.hotspot_prob <= 1, "environment", "probabilities in [0, 1]")
    need(env.step_hours > 0, "environment.step_hours", "must be > 0")
    need(len(cfg.machine_classes) >= 1, "machine_classes", "at least one machine class")
    for mc in cfg.machine_classes:
        need(mc.core_count >= 1 and mc.weight >= 0, f"machine_classes.{mc.name}", "core_count >= 1, weight >= 0")
        need(0 <= mc.op_spread < mc.envelope_frac, f"machine_classes.{mc.name}",
             "operating-point spread must stay inside the envelope")
    need(0 < cfg.workload.load_range[0] and cfg.workload.load_range[1] <= 1.0, "workload.load_range", "within (0, 1]")
    need(cfg.workload.ops_per_hour >= 0, "workload.ops_per_hour", "must be >= 0")
    return cfg


def load_config(path: str | os.PathLike, echo_dir: str | os.PathLike | None = None) -> SimConfig:
    p = Path(path)
    text = p.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno, str(p)) from None
    cfg = config_from_dict(data)
    if echo_dir is not None:
        write_effective_config(cfg, echo_dir)
    return cfg


def write_effective_config(cfg: SimConfig, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "effective_config.json"
    target.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return target
