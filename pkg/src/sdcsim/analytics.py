"""Coverage arithmetic and Table-style reports over completed runs.

Unique/common fractions are taken over the union of detected machines; recall
against the simulator's ground truth is reported next to them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .model import DAY_MS, DefectClass
from .sim import InvariantViolation, RunResult

NOT_REACHED = "not reached"
NO_DETECTIONS = "no detections"
DEFAULT_FRACTIONS = (0.5, 0.7, 0.9)
MONTH_DAYS = 30.0
METHODS = ("scanner", "ripple")


class EmptyUnion(ValueError):
    """Neither method detected anything, so there is nothing to partition."""


@dataclass(frozen=True)
class DetectionSets:
    scanner_detected: Mapping[int, int]  # machine -> first detection, ms
    ripple_detected: Mapping[int, int]
    ground_truth_defective: Mapping[int, DefectClass]

    def __post_init__(self) -> None:
        stray = (set(self.scanner_detected) | set(self.ripple_detected)) - set(self.ground_truth_defective)
        if stray:
            raise InvariantViolation(f"detections on defect-free machines: {sorted(stray)[:10]}")

    @classmethod
    def from_run(cls, result: RunResult) -> "DetectionSets":
        return cls(result.scanner_detected, result.ripple_detected, result.ground_truth)

    @property
    def scanner(self) -> set[int]:
        return set(self.scanner_detected)

    @property
    def ripple(self) -> set[int]:
        return set(self.ripple_detected)

    @property
    def union(self) -> set[int]:
        return self.scanner | self.ripple

    @property
    def common(self) -> set[int]:
        return self.scanner & self.ripple

    def times(self, method: str) -> Mapping[int, int]:
        return {"scanner": self.scanner_detected, "ripple": self.ripple_detected}[method]


def coverage_partition(sets: DetectionSets) -> tuple[float, float, float]:
    """``(unique_scanner, unique_ripple, common)`` as fractions of the union."""
    a, b = sets.scanner, sets.ripple
    n = len(a | b)
    if n == 0:
        raise EmptyUnion(NO_DETECTIONS)
    return len(a - b) / n, len(b - a) / n, len(a & b) / n


def time_to_fraction(detection_ms: Mapping[int, int], reference: Iterable[int], x: float) -> float | str:
    """Earliest simulated day by which a fraction ``x`` of ``reference`` is detected."""
    ref = set(reference)
    if not 0.0 < x <= 1.0:
        raise ValueError("x must be in (0, 1]")
    if not ref:
        raise ValueError("reference set is empty")
    # smallest k with k / |ref| >= x, in exact arithmetic
    need = math.ceil(Fraction(x) * len(ref))
    hits = sorted(t for m, t in detection_ms.items() if m in ref)
    if len(hits) < need:
        return NOT_REACHED
    return hits[need - 1] / DAY_MS


def recall(detected: Iterable[int], ground_truth: Iterable[int]) -> float | None:
    gt = set(ground_truth)
    if not gt:
        return None
    return len(set(detected) & gt) / len(gt)


# -- reports ------------------------------------------------------------------------

@dataclass
class CoverageReport:
    seed: int
    horizon_days: float
    fleet_size: int
    counts: dict[str, int]
    partition: tuple[float, float, float] | None
    recall: dict[str, float | None]
    totals: dict[str, float]
    time_to_common: dict[str, dict[str, float | str]]
    time_to_own: dict[str, dict[str, float | str]]
    exposure: dict[str, int]
    ground_truth_mix: dict[str, int] = field(default_factory=dict)

    @property
    def unique_scanner(self) -> float | None:
        return None if self.partition is None else self.partition[0]

    @property
    def unique_ripple(self) -> float | None:
        return None if self.partition is None else self.partition[1]

    @property
    def common(self) -> float | None:
        return None if self.partition is None else self.partition[2]

    def seconds_per_test(self, method: str) -> float | None:
        n = self.totals[f"{method}_tests"]
        return self.totals[f"{method}_fleet_seconds"] / n if n else None

    @property
    def per_test_ratio(self) -> float | None:
        s, r = self.seconds_per_test("scanner"), self.seconds_per_test("ripple")
        return s / r if s is not None and r else None

    def per_month(self) -> dict[str, float]:
        scale = MONTH_DAYS / self.horizon_days if self.horizon_days > 0 else 0.0
        return {k: v * scale for k, v in sorted(self.totals.items())
                if k.endswith("_tests") or k.endswith("_fleet_seconds")}

    def to_dict(self) -> dict:
        if self.partition is None:
            part: dict | str = NO_DETECTIONS
        else:
            part = {"unique_scanner": self.partition[0], "unique_ripple": self.partition[1],
                    "common": self.partition[2]}
        return {
            "seed": self.seed, "horizon_days": self.horizon_days, "fleet_size": self.fleet_size,
            "counts": dict(sorted(self.counts.items())), "partition": part, "recall": self.recall,
            "totals": {"raw": dict(sorted(self.totals.items())), "per_month": self.per_month(),
                       "normalization": f"raw totals x {MONTH_DAYS:g} / horizon_days; both methods run "
                                        "over the same simulated horizon"},
            "seconds_per_test": {m: self.seconds_per_test(m) for m in METHODS},
            "per_test_ratio": self.per_test_ratio,
            "time_to_common_days": self.time_to_common, "time_to_own_days": self.time_to_own,
            "exposure": dict(sorted(self.exposure.items())),
            "ground_truth_mix": dict(sorted(self.ground_truth_mix.items())),
        }


def _fraction_key(x: float) -> str:
    return f"{x:.2f}"


def build_report(result: RunResult, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                 own_fractions: Sequence[float] = (0.95,)) -> CoverageReport:
    sets = DetectionSets.from_run(result)
    try:
        part = coverage_partition(sets)
    except EmptyUnion:
        part = None
    common = sets.common
    t_common: dict[str, dict[str, float | str]] = {m: {} for m in METHODS}
    t_own: dict[str, dict[str, float | str]] = {m: {} for m in METHODS}
    for m in METHODS:
        times = sets.times(m)
        for x in fractions:
            t_common[m][_fraction_key(x)] = time_to_fraction(times, common, x) if common else NOT_REACHED
        for x in own_fractions:
            t_own[m][_fraction_key(x)] = time_to_fraction(times, times, x) if times else NOT_REACHED
    counts = {"scanner": len(sets.scanner), "ripple": len(sets.ripple), "union": len(sets.union),
              "common": len(common), "ground_truth": len(sets.ground_truth_defective)}
    gt = sets.ground_truth_defective
    mix: dict[str, int] = {}
    for cls in gt.values():
        mix[cls.value] = mix.get(cls.value, 0) + 1
    exposure = {"combined": result.exposure.total()}
    for name, arm in result.arms.items():
        exposure[name] = arm.exposure
    return CoverageReport(result.seed, result.horizon_days, result.fleet_size, counts, part,
                          {m: recall(getattr(sets, m), gt) for m in METHODS}, result.totals.to_dict(),
                          t_common, t_own, exposure, mix)


# -- serialization ------------------------------------------------------------------

def _flatten(prefix: str, obj, out: list[tuple[str, object]]) -> None:
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], out)
    else:
        out.append((prefix, obj))


def _days(v: float | str) -> str:
    return v if isinstance(v, str) else f"≈{v:.1f} days"


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100.0 * v:.1f}%"


def markdown_table(report: CoverageReport, fraction: float = 0.7) -> str:
    t = report.totals
    key = _fraction_key(fraction)
    pct = f"{100 * fraction:.0f}%"
    rows = [
        ("Tests executed", f"{int(t['scanner_tests']):,}", f"{int(t['ripple_tests']):,}"),
        ("Testing time (fleet-seconds)", f"{t['scanner_fleet_seconds']:,.0f}", f"{t['ripple_fleet_seconds']:,.0f}"),
        ("Performance aware", "No", "Yes"),
        ("Unique SDC coverage", _pct(report.unique_scanner) if report.partition else NO_DETECTIONS,
         _pct(report.unique_ripple) if report.partition else NO_DETECTIONS),
        ("Time to equivalent SDC coverage",
         f"{_days(report.time_to_common['scanner'][key])} ({pct})",
         f"{_days(report.time_to_common['ripple'][key])} ({pct})"),
    ]
    lines = ["| Metric | Fleetscanner | Ripple |", "| --- | --- | --- |"]
    lines += [f"| {a} | {b} | {c} |" for a, b, c in rows]
    return "\n".join(lines) + "\n"


def emit_report(report: CoverageReport, fmt: str = "json") -> str:
    """Serialize a report as ``json`` (canonical), ``csv`` (metric,value) or ``md``."""
    if fmt == "json":
        return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        rows: list[tuple[str, object]] = []
        _flatten("", report.to_dict(), rows)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, "" if v is None else v])
        return buf.getvalue()
    if fmt in ("md", "markdown", "markdown-table"):
        return markdown_table(report)
    raise ValueError(f"unknown report format {fmt!r}")


# -- multi-seed aggregation ---------------------------------------------------------

def mean_ci(values: Sequence[float], z: float = 1.96) -> dict[str, float | int | None]:
    """Mean with a normal-approximation confidence half-width."""
    n = len(values)
    if n == 0:
        return {"n": 0, "mean": None, "ci": None}
    mean = math.fsum(values) / n
    if n == 1:
        return {"n": 1, "mean": mean, "ci": None}
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return {"n": n, "mean": mean, "ci": z * math.sqrt(var / n)}


def aggregate(reports: Sequence[CoverageReport], fraction: float = 0.7) -> dict:
    """Pooled partition (union counts summed over seeds) plus per-seed mean/CI."""
    key = _fraction_key(fraction)
    pooled = {k: sum(r.counts[k] for r in reports) for k in ("scanner", "ripple", "union", "common")}
    if pooled["union"]:
        u = pooled["union"]
        pooled_part = {"unique_scanner": (pooled["scanner"] - pooled["common"]) / u,
                       "unique_ripple": (pooled["ripple"] - pooled["common"]) / u,
                       "common": pooled["common"] / u}
    else:
        pooled_part = NO_DETECTIONS
    with_part = [r for r in reports if r.partition is not None]

    def reached(method: str, table: str, k: str) -> list[float]:
        return [v for r in reports for v in [getattr(r, table)[method][k]] if not isinstance(v, str)]

    ratios = [r.per_test_ratio for r in reports if r.per_test_ratio is not None]
    return {
        "seeds": [r.seed for r in reports],
        "pooled_counts": pooled,
        "pooled_partition": pooled_part,
        "partition_mean": {name: mean_ci([r.partition[i] for r in with_part])
                           for i, name in enumerate(("unique_scanner", "unique_ripple", "common"))},
        "per_test_ratio": mean_ci(ratios),
        "time_to_common_days": {m: mean_ci(reached(m, "time_to_common", key)) for m in METHODS},
        "time_to_own_days": {m: mean_ci(reached(m, "time_to_own", "0.95")) for m in METHODS},
        "recall": {m: mean_ci([r.recall[m] for r in reports if r.recall[m] is not None]) for m in METHODS},
    }
