"""Command-line entry point: ``gridsec run|metrics|replay|guide``."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path
from typing import Iterable, TextIO

from . import guidelines as gl
from .engine import replay_alerts, run
from .metrics import compute_metrics, load_alerts, load_ground_truth
from .scenario import ScenarioError, load_scenario_file

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2


class InputError(Exception):
    """Bad user input: missing file, invalid scenario, malformed log."""


def _read_lines(path: str) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"file not found: {path}")
    return p.read_text().splitlines()


def cmd_run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.duration is not None:
        overrides["duration_ms"] = args.duration
    try:
        scenario = load_scenario_file(args.scenario, overrides)
    except ScenarioError as exc:
        raise InputError(f"invalid scenario {args.scenario}: {exc}") from None
    artifacts = run(scenario)
    paths = artifacts.write(args.out)
    m = artifacts.metrics
    print(f"scenario {scenario.name}: {len(artifacts.alert_log)} alerts, "
          f"precision {m['precision']}, recall {m['recall']}")
    for p in paths:
        print(f"  wrote {p}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    try:
        alerts = load_alerts(_read_lines(args.alerts))
        truths, period = load_ground_truth(_read_lines(args.events))
    except (ValueError, KeyError) as exc:
        raise InputError(f"malformed log: {exc}") from None
    print(json.dumps(compute_metrics(alerts, truths, period), indent=2))
    return EXIT_OK


def cmd_replay(args) -> int:
    lines = _read_lines(args.events)
    try:
        fresh = replay_alerts(lines)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot replay {args.events}: {exc}") from None
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in fresh))
    else:
        sys.stdout.write("".join(line + "\n" for line in fresh))
    reference = Path(args.alerts) if args.alerts else Path(args.events).with_name("alerts.jsonl")
    if not reference.is_file():
        if args.alerts:
            raise InputError(f"file not found: {args.alerts}")
        return EXIT_OK
    original = [line for line in reference.read_text().splitlines() if line.strip()]
    if original == fresh:
        print(f"replay matches {reference} ({len(fresh)} alerts)", file=sys.stderr)
        return EXIT_OK
    for i in range(max(len(original), len(fresh))):
        a = original[i] if i < len(original) else "<missing>"
        b = fresh[i] if i < len(fresh) else "<missing>"
        if a != b:
            print(f"replay diverges from {reference} at alert {i + 1}:\n  stored: {a}\n  replay: {b}",
                  file=sys.stderr)
            break
    return EXIT_INPUT


GUIDE_HELP = """commands:
  lookup [CATEGORY] KEYWORD...     rank observations
  start OBSERVATION [NOTE...]      begin a session
  do ACTION OBSERVATION [NOTE...]  record an action and what it showed
  do ACTION escalate [NOTE...]     record an escalating action and close
  show                             print the trace so far
  export PATH                      write the trace report
  quit                             save and exit"""


def _prompt_text(session: gl.GuidelineSession | None) -> str:
    if session is None or session.current is None:
        return "no session; use lookup or start"
    if session.closed:
        return "session closed; export or quit"
    graph = session.graph
    obs = graph.observations[session.current]
    out = [f"current: {obs.id}  {obs.description}"]
    for aid in obs.suggested_actions:
        act = graph.actions[aid]
        then = "escalate" if act.escalation else ", ".join(act.expected_observations)
        out.append(f"  {aid} [{act.required_role}] -> {then}")
    return "\n".join(out)


def guide_loop(graph: gl.GuidelineGraph, lines: Iterable[str], out: TextIO,
               trace_path: Path, echo: bool = False) -> gl.GuidelineSession | None:
    session: gl.GuidelineSession | None = None
    print(f"guidelines version {graph.version}; type help for commands", file=out)
    print(_prompt_text(session), file=out)
    for raw in lines:
        line = raw.strip()
        if echo:
            print(f"> {line}", file=out)
        if not line or line.startswith("#"):
            continue
        cmd, *rest = line.split()
        try:
            if cmd == "help":
                print(GUIDE_HELP, file=out)
                continue
            if cmd == "quit":
                break
            if cmd == "lookup":
                category = rest[0].upper() if rest and rest[0].upper() in gl.CATEGORIES else None
                words = rest[1:] if category else rest
                hits = gl.lookup(graph, category, words)
                for oid in hits:
                    print(f"  {oid}  {graph.observations[oid].description}", file=out)
                if not hits:
                    print("  no matching observation", file=out)
                continue
            if cmd == "start" and rest:
                session = gl.start_session(graph, rest[0].upper(), " ".join(rest[1:]))
            elif cmd == "do" and len(rest) >= 2:
                if session is None:
                    raise gl.InvalidTransition("start a session first")
                note = " ".join(rest[2:])
                if rest[1].lower() == "escalate":
                    session = gl.advance(session, rest[0], escalate=True, note=note)
                else:
                    session = gl.advance(session, rest[0], rest[1].upper(), note=note)
            elif cmd == "show":
                if session is not None:
                    out.write(gl.export_trace(session))
                continue
            elif cmd == "export" and rest:
                if session is not None:
                    Path(rest[0]).write_text(gl.export_trace(session))
                    print(f"  wrote {rest[0]}", file=out)
                continue
            else:
                print(f"  unrecognised input: {line!r}; type help", file=out)
                continue
        except gl.InvalidTransition as exc:
            print(f"  not accepted: {exc}", file=out)
        print(_prompt_text(session), file=out)
    if session is not None:
        trace_path.write_text(gl.export_trace(session))
        print(f"trace saved to {trace_path}", file=out)
    return session


def _stdin_lines():
    while True:
        try:
            yield input("guide> ")
        except EOFError:
            return


def cmd_guide(args) -> int:
    if args.file is not None and not Path(args.file).is_file():
        raise InputError(f"file not found: {args.file}")
    try:
        graph = gl.load_guidelines(args.file)
    except gl.GuidelineError as exc:
        raise InputError(f"invalid guideline file: {exc}") from None
    if args.script:
        lines, echo = _read_lines(args.script), True
    elif sys.stdin.isatty():
        lines, echo = _stdin_lines(), False
    else:
        lines, echo = sys.stdin.read().splitlines(), True
    guide_loop(graph, lines, sys.stdout, Path(args.trace), echo)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridsec", description="Grid OT security testbed.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write artifacts")
    p.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=int, help="simulated duration in ms")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("metrics", help="score an alert log against ground truth")
    p.add_argument("--alerts", required=True)
    p.add_argument("--events", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("replay", help="re-run the IDS over a stored event log")
    p.add_argument("--events", required=True)
    p.add_argument("--alerts", help="alert log to compare against (default: alerts.jsonl beside the events)")
    p.add_argument("--out", help="write the replayed alert log here instead of stdout")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("guide", help="step through the incident-response guidelines")
    p.add_argument("--file", help="guideline file (default: bundled)")
    p.add_argument("--script", help="read commands from this file instead of stdin")
    p.add_argument("--trace", default="guideline-trace.txt", help="where the trace is saved on exit")
    p.set_defaults(func=cmd_guide)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"gridsec: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
