"""Independent checks over a JSONL event log.

The replay never calls back into the simulator: it rebuilds machine states
from the logged ``[from, to]`` pairs and re-derives the footprint tax of every
traced machine from its logged slice starts.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .config import SimConfig
from .model import DAY_MS, LEGAL_TRANSITIONS, Machine, MachineState, sample_fleet
from .ripple import max_window_tax

S = MachineState
_LEGAL = {(a.value, b.value) for a, b in LEGAL_TRANSITIONS}


@dataclass
class ReplayReport:
    events: int = 0
    violations: list[str] = field(default_factory=list)
    transitions: Counter = field(default_factory=Counter)
    tax: dict[int, float] = field(default_factory=dict)  # traced machine -> max 24 h tax
    tax_limit: dict[int, float] = field(default_factory=dict)
    slices: dict[int, int] = field(default_factory=dict)
    final_states: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def fail(self, msg: str) -> None:
        if len(self.violations) < 100:
            self.violations.append(msg)


def replay(lines: Iterable[str], config: SimConfig, seed: int | None = None,
           fleet: list[Machine] | None = None) -> ReplayReport:
    fleet = sample_fleet(config, config.global_seed if seed is None else seed) if fleet is None else fleet
    machines = {m.id: m for m in fleet}
    slice_ms = config.ripple.slice_ms
    rep = ReplayReport()
    state = {mid: S.PRODUCTION.value for mid in machines}
    history: dict[int, list[str]] = {}
    prod_since = {mid: 0 for mid in machines}
    maint_start: dict[int, int] = {}
    window_ms: dict[int, float] = {}
    open_slices: dict[int, list[int]] = {}  # starts logged during the current production stay
    starts: dict[int, list[int]] = {}
    last = (-1, -1)
    for raw in lines:
        ev = json.loads(raw)
        rep.events += 1
        t, seq, kind, mid, payload = ev["t_ms"], ev["seq"], ev["kind"], ev["machine_id"], ev["payload"]
        if (t, seq) <= last:
            rep.fail(f"event order: {(t, seq)} after {last}")
        last = (t, seq)
        if kind == "MaintenanceArrival" and not payload.get("skipped"):
            window_ms[mid] = payload["maintenance"]["window_s"] * 1000.0
        if kind == "RippleInterval" and "starts" in payload:
            if state[mid] != S.PRODUCTION.value:
                rep.fail(f"machine {mid}: ripple slices logged while {state[mid]}")
            ss = payload["starts"]
            if ss and (ss[0] < prod_since.get(mid, 0) or ss[0] < payload["t0"] or ss[-1] >= payload["t1"]):
                rep.fail(f"machine {mid}: slices outside their production interval at t={t}")
            open_slices.setdefault(mid, []).extend(ss)
            starts.setdefault(mid, []).extend(ss)
        if kind == "ScannerTestComplete":
            w0, w = maint_start.get(mid), window_ms.get(mid)
            for rec in payload["records"]:
                if w0 is None or w is None or rec["start_time"] < w0 or rec["start_time"] + rec["duration_ms"] > w0 + w:
                    rep.fail(f"machine {mid}: scanner test outside its maintenance window at t={t}")
        for src, dst in payload.get("transitions", ()):
            rep.transitions[(src, dst)] += 1
            if state[mid] != src:
                rep.fail(f"machine {mid}: logged move {src}->{dst} but replayed state is {state[mid]}")
            if (src, dst) not in _LEGAL:
                rep.fail(f"machine {mid}: illegal move {src}->{dst}")
            hist = history.setdefault(mid, [])
            if dst == S.TESTING_SCANNER.value and hist[-2:] != [S.PRODUCTION.value, S.DRAINING.value]:
                rep.fail(f"machine {mid}: TestingScanner entered without Draining -> Maintenance")
            if src == S.PRODUCTION.value:
                ss = open_slices.pop(mid, [])
                if any(s >= t for s in ss):
                    rep.fail(f"machine {mid}: slice started after leaving Production at t={t}")
                if kind != "TestSliceDue" and ss and max(ss) + slice_ms > t:
                    rep.fail(f"machine {mid}: slice overlaps {dst} at t={t}")
            if dst == S.PRODUCTION.value:
                prod_since[mid] = t
            if dst == S.MAINTENANCE.value:
                maint_start[mid] = t
            hist.append(src)
            del hist[:-3]
            state[mid] = dst
        if kind == "HorizonEnd":
            counts = Counter(state.values())
            rep.final_states = dict(sorted(counts.items()))
            if payload["states"] != rep.final_states:
                rep.fail(f"state census {payload['states']} != replayed {rep.final_states}")
    for mid, ss in sorted(starts.items()):
        m = machines[mid]
        rep.slices[mid] = len(ss)
        rep.tax[mid] = max_window_tax(ss, slice_ms, m.core_count)
        rep.tax_limit[mid] = config.ripple.theta_for(m.workload) + slice_ms / (DAY_MS * m.core_count)
        if rep.tax[mid] > rep.tax_limit[mid]:
            rep.fail(f"machine {mid}: 24 h tax {rep.tax[mid]:.3g} exceeds {rep.tax_limit[mid]:.3g}")
    return rep
