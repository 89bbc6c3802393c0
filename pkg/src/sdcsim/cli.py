"""Command line entry point: ``sdcsim run|report|sweep|selfcheck``.

Exit codes: 0 ok, 1 config/validation error, 2 simulator invariant violation,
3 the host failed its own selfcheck (a possible silent-corruption alarm).
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from pathlib import Path

from . import analytics
from .config import ConfigError, load_config, write_effective_config
from .model import IllegalTransition
from .patterns import selfcheck
from .sim import InvariantViolation, RunResult, SimulationError, run

OUT_ENV = "SDCSIM_OUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_HOST_SDC = 0, 1, 2, 3

EVENTS = "events.jsonl"
RESULT = "result.json"


def out_dir(arg: str | None, default: str = "out") -> Path:
    """``$SDCSIM_OUT_DIR`` wins over ``--out``; otherwise ``--out`` or ``default``."""
    env = os.environ.get(OUT_ENV)
    return Path(env or arg or default)


def parse_seeds(text: str) -> list[int]:
    m = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*", text)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        if b < a:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(a, b + 1))
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must look like 'a..b' or 'a,b,c', got {text!r}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _is_invariant(exc: BaseException) -> bool:
    if isinstance(exc, SimulationError):
        exc = exc.cause
    return isinstance(exc, (InvariantViolation, IllegalTransition, AssertionError))


def cmd_run(args) -> int:
    dest = out_dir(args.out)
    cfg = load_config(args.config)
    dest.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, dest)
    t0 = time.perf_counter()
    if args.no_log:
        result = run(cfg, seed=args.seed)
    else:
        with open(dest / EVENTS, "w") as fh:
            result = run(cfg, seed=args.seed, log=fh)
    report = analytics.build_report(result)
    _write_json(dest / RESULT, result.to_dict())
    (dest / "report.json").write_text(analytics.emit_report(report, "json"))
    (dest / "report.md").write_text(analytics.emit_report(report, "md"))
    print(f"seed {result.seed}: {result.events_processed} events in {time.perf_counter() - t0:.1f} s -> {dest}")
    print(analytics.emit_report(report, "md"), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.dir)
    src = path / RESULT if path.is_dir() else path
    result = RunResult.from_dict(json.loads(src.read_text()))
    sys.stdout.write(analytics.emit_report(analytics.build_report(result), args.format))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    reports = []
    t0 = time.perf_counter()
    for seed in args.seeds:
        rep = analytics.build_report(run(cfg, seed=seed))
        reports.append(rep)
        if args.verbose:
            part = "no detections" if rep.partition is None else " ".join(f"{v:.3f}" for v in rep.partition)
            print(f"seed {seed}: partition {part}", file=sys.stderr)
    agg = analytics.aggregate(reports)
    agg["wall_clock_s"] = round(time.perf_counter() - t0, 3)
    if args.out or os.environ.get(OUT_ENV):
        dest = out_dir(args.out)
        dest.mkdir(parents=True, exist_ok=True)
        write_effective_config(cfg, dest)
        _write_json(dest / "sweep.json", agg)
        for rep in reports:
            (dest / f"report_seed{rep.seed}.json").write_text(analytics.emit_report(rep, "json"))
    print(json.dumps(agg, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    rep = selfcheck(args.iterations)
    print(json.dumps(rep.to_dict(), sort_keys=True, indent=2))
    if not rep.passed:
        print("selfcheck FAILED: this host computed wrong results", file=sys.stderr)
        return EXIT_HOST_SDC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sdcsim", description="Fleet silent-data-corruption testing simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one seed, write event log and report")
    p.add_argument("config", help="JSON scenario file")
    p.add_argument("--seed", type=int, default=None, help="overrides global_seed")
    p.add_argument("--out", default=None, help=f"output directory (${OUT_ENV} takes precedence)")
    p.add_argument("--no-log", action="store_true", help="skip the event log")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="render the report of a finished run")
    p.add_argument("dir", help="run output directory or result.json")
    p.add_argument("--format", choices=("json", "csv", "md"), default="md")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="replicate a scenario over many seeds")
    p.add_argument("config")
    p.add_argument("--seeds", type=parse_seeds, default=parse_seeds("0..19"), help="'a..b' (inclusive) or 'a,b,c'")
    p.add_argument("--out", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selfcheck", help="run every pattern family on this host against exact references")
    p.add_argument("--iterations", type=int, default=1_000_000)
    p.set_defaults(func=cmd_selfcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, IllegalTransition, SimulationError, AssertionError) as exc:
        if not _is_invariant(exc):
            raise
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
