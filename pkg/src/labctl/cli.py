"""Command-line entry point.

Exit codes: 0 success, 1 validation findings, 2 run failed, 3 usage error.
"""

import argparse
import json
import logging
import sys
import threading
from pathlib import Path

from . import __version__
from .cloud import plan_cloud
from .drivers import FaultInjector
from .engine import ExperimentRun, RunState, load_report, read_events
from .errors import LabError, ValidationFailed
from .inventory import load_testbed
from .iplayer import plan_ip
from .logsink import start_sink
from .phys import plan_physical
from .scenario import parse_scenario, validate_against
from .scheduler import Scheduler
from .world import SimulatedTestbed

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FINDINGS, EXIT_FAILED, EXIT_USAGE = 0, 1, 2, 3
DOWN_SENTINEL = "DOWN"
SINK_DIR = ".sink"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="labctl", description="Run layered testbed experiments against a simulated testbed.")
    p.add_argument("--version", action="version", version=f"labctl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def files(sp, many=False):
        sp.add_argument("--inventory", required=True, help="testbed inventory YAML")
        if many:
            sp.add_argument("--scenario", required=True, action="append", help="scenario YAML (repeatable)")
        else:
            sp.add_argument("--scenario", required=True, help="scenario YAML")
        sp.add_argument("--json", action="store_true", help="machine-readable stdout")

    files(sub.add_parser("validate", help="check a scenario against the inventory"))
    files(sub.add_parser("plan", help="print VLAN, IP and cloud plans without applying"))
    for name, helptext in (("run", "execute a scenario end to end"),
                           ("up", "bring a scenario up and hold it until `down`")):
        sp = sub.add_parser(name, help=helptext)
        files(sp, many=(name == "run"))
        sp.add_argument("--output", help="artifact directory (default: scenario output_dir)")
        sp.add_argument("--timeout", type=int, default=600, help="await timeout in logical seconds")
        if name == "run":
            sp.add_argument("--queue", action="store_true", help="run scenarios through the scheduler")
    for name, helptext in (("down", "force unwind of a running run"),
                           ("status", "show a run's state"),
                           ("logs", "list or print a run's collected logs")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("run_id")
        sp.add_argument("--output", default="runs", help="artifact directory (default: runs)")
        sp.add_argument("--json", action="store_true", help="machine-readable stdout")
        if name == "logs":
            sp.add_argument("--tag", help="print this tag's log file")
    return p


def _read(path):
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _load(args, scenario_path=None):
    testbed = load_testbed(_read(args.inventory))
    scenario = parse_scenario(_read(scenario_path or args.scenario))
    return testbed, scenario


def _emit(args, data, text):
    if args.json:
        print(json.dumps(data, indent=2, sort_keys=True))
    else:
        print(text)


def cmd_validate(args):
    testbed, scenario = _load(args)
    report = validate_against(scenario, testbed)
    _emit(args, {"findings": [vars(f) for f in report.findings]}, str(report))
    return EXIT_OK if report.ok else EXIT_FINDINGS


def plan_document(scenario, testbed):
    phys = plan_physical(scenario, testbed)
    cloud = plan_cloud(scenario, testbed)
    cloud_hosts = [f"cloud-{n}" for n in range(1, cloud.count + 1)] if cloud else []
    ip = plan_ip(scenario, phys, cloud_hosts, testbed)
    return {
        "scenario": scenario.name,
        "physical": phys.to_dict(),
        "cloud": None if cloud is None else {
            "region": cloud.region, "count": cloud.count, "key_name": cloud.key_name, "network": cloud.network,
            "rules": [{"protocol": r.protocol, "port": r.port, "description": r.description} for r in cloud.rules],
        },
        "ip": ip.to_dict(),
    }


def cmd_plan(args):
    testbed, scenario = _load(args)
    report = validate_against(scenario, testbed)
    if not report.ok:
        print(str(report), file=sys.stderr)
        return EXIT_FINDINGS
    print(json.dumps(plan_document(scenario, testbed), indent=2, sort_keys=True))
    return EXIT_OK


def _watch_sentinel(run, done, on_down):
    """Poll for a DOWN file in the run directory."""
    sentinel = run.run_dir / DOWN_SENTINEL
    while not done.wait(0.1):
        if sentinel.exists():
            try:
                on_down(run)
            except LabError:
                pass
            return


def _execute(world, sink, testbed, scenario, args, hold=False, announce=None):
    faults = FaultInjector.from_env()
    drivers = world.drivers(faults=faults)
    run = ExperimentRun(scenario, testbed, drivers, sink, output_dir=args.output or scenario.output_dir,
                        await_timeout=args.timeout, hold=hold)
    if announce:
        announce(run)
    done = threading.Event()
    watcher = threading.Thread(target=_watch_sentinel, daemon=True,
                               args=(run, done, (lambda r: r.release()) if hold else (lambda r: r.abort())))
    watcher.start()
    try:
        return run.execute()
    finally:
        done.set()
        drivers.close()


def _print_reports(args, reports):
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    else:
        for r in reports:
            line = f"{r.run_id}: {r.outcome_label}"
            if not r.ok:
                line += f" ({r.failure_reason})"
            print(line)
    return EXIT_OK if all(r.ok for r in reports) else EXIT_FAILED


def _sink_for(output):
    return start_sink(("127.0.0.1", 0), Path(output) / SINK_DIR)


def cmd_run(args, hold=False):
    scenarios_paths = args.scenario if isinstance(args.scenario, list) else [args.scenario]
    testbed = load_testbed(_read(args.inventory))
    scenarios = [parse_scenario(_read(p)) for p in scenarios_paths]
    if len(scenarios) > 1 and not getattr(args, "queue", False):
        raise UsageError("several --scenario values need --queue")
    for sc in scenarios:
        report = validate_against(sc, testbed)
        if not report.ok:
            print(f"{sc.name}: {report}", file=sys.stderr)
            return EXIT_FINDINGS
    try:
        FaultInjector.from_env()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    output = args.output or scenarios[0].output_dir
    sink = _sink_for(output)
    world = SimulatedTestbed(testbed)
    try:
        if getattr(args, "queue", False):
            reports = _run_queue(world, sink, testbed, scenarios, args)
        else:
            announce = (lambda run: print(f"{run.run_id}: up; `labctl down {run.run_id} --output {run.output_dir}` "
                                          "to tear down", flush=True)) if hold else None
            reports = [_execute(world, sink, testbed, scenarios[0], args, hold=hold, announce=announce)]
    finally:
        world.close()
        sink.stop()
    return _print_reports(args, reports)


def _run_queue(world, sink, testbed, scenarios, args):
    sched = Scheduler(testbed)
    try:
        tickets = [sched.submit(sc) for sc in scenarios]
    except ValidationFailed as exc:
        raise UsageError(str(exc.report)) from None
    cond = threading.Condition()
    results = {}

    def work(ticket):
        report = _execute(world, sink, testbed, ticket.scenario, args)
        with cond:
            sched.complete(ticket, report)
            results[ticket.id] = report
            cond.notify_all()

    threads = []
    with cond:
        while len(results) < len(tickets):
            for ticket in sched.dispatch_all():
                log.info("dispatching ticket %d (%s)", ticket.id, ticket.scenario.name)
                t = threading.Thread(target=work, args=(ticket,), name=f"ticket-{ticket.id}")
                t.start()
                threads.append(t)
            cond.wait(0.5)
    for t in threads:
        t.join()
    return [results[t.id] for t in tickets]


def _run_dir(args):
    run_dir = Path(args.output) / args.run_id
    if not run_dir.is_dir():
        raise UsageError(f"no run {args.run_id} under {args.output}")
    return run_dir


def cmd_down(args):
    run_dir = _run_dir(args)
    if (run_dir / "report.json").exists():
        print(f"{args.run_id}: already finished")
        return EXIT_OK
    (run_dir / DOWN_SENTINEL).touch()
    print(f"{args.run_id}: unwind requested")
    return EXIT_OK


def cmd_status(args):
    run_dir = _run_dir(args)
    events = read_events(run_dir)
    if (run_dir / "report.json").exists():
        report = load_report(run_dir)
        data = {"run_id": args.run_id, "state": RunState.DONE.value if report.ok else RunState.FAILED.value,
                "outcome": report.outcome_label, "failure_reason": report.failure_reason,
                "stage_timings": report.stage_timings, "teardown_errors": report.teardown_errors}
        text = f"{args.run_id}: {report.outcome_label}"
        if report.failure_reason:
            text += f"\n  reason: {report.failure_reason}"
        for stage, t in report.stage_timings.items():
            text += f"\n  {stage:<9} t={t['start']}..{t['end']}"
    else:
        last = events[-1] if events else None
        data = {"run_id": args.run_id, "state": "running",
                "last_event": None if last is None else {"stage": last.stage, "event": last.event}}
        text = f"{args.run_id}: running" + (f" ({last.stage} {last.event})" if last else "")
    _emit(args, data, text)
    return EXIT_OK


def cmd_logs(args):
    run_dir = _run_dir(args)
    logs_dir = run_dir / "logs"
    files = sorted(p.name for p in logs_dir.glob("*.log")) if logs_dir.is_dir() else []
    if args.tag:
        path = logs_dir / f"{args.tag}.log"
        if not path.is_file():
            raise UsageError(f"no log for tag {args.tag}")
        sys.stdout.write(path.read_text(encoding="utf-8"))
        return EXIT_OK
    _emit(args, {"run_id": args.run_id, "files": files}, "\n".join(files) if files else "(no logs)")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "plan": cmd_plan,
    "run": cmd_run,
    "up": lambda args: cmd_run(args, hold=True),
    "down": cmd_down,
    "status": cmd_status,
    "logs": cmd_logs,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"labctl: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LabError as exc:
        print(f"labctl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
