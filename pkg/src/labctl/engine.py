"""Experiment lifecycle: bring layers up bottom-up, run, collect, unwind.

Each successfully (or partially) applied layer pushes a handle on the
teardown stack; on success or failure the stack is unwound in reverse, so
the testbed always ends where it started.
"""

import enum
import json
import logging
import re
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .cloud import plan_cloud, provision, terminate_all, with_key
from .errors import Aborted, AlreadyTerminal, InvalidTransition, LabError
from .iplayer import apply_ip, plan_ip, teardown_ip
from .phys import apply_physical, plan_physical, teardown_physical
from .workload import await_completion, deploy, teardown_workload

log = logging.getLogger(__name__)

DEFAULT_AWAIT_TIMEOUT = 600


class RunState(str, enum.Enum):
    PENDING = "pending"
    PHYS_UP = "phys-up"
    CLOUD_UP = "cloud-up"
    IP_UP = "ip-up"
    WORKLOAD_RUNNING = "workload-running"
    COLLECTING = "collecting"
    TEARING_DOWN = "tearing-down"
    DONE = "done"
    FAILED = "failed"


_FORWARD = {
    RunState.PENDING: {RunState.PHYS_UP},
    RunState.PHYS_UP: {RunState.CLOUD_UP, RunState.IP_UP},
    RunState.CLOUD_UP: {RunState.IP_UP},
    RunState.IP_UP: {RunState.WORKLOAD_RUNNING},
    RunState.WORKLOAD_RUNNING: {RunState.COLLECTING},
    RunState.COLLECTING: {RunState.TEARING_DOWN},
    RunState.TEARING_DOWN: {RunState.DONE, RunState.FAILED},
}
TERMINAL = (RunState.DONE, RunState.FAILED)


def allowed_transition(src, dst):
    if src in TERMINAL:
        return False
    if dst == RunState.TEARING_DOWN:
        return True
    return dst in _FORWARD.get(src, set())


@dataclass(frozen=True)
class RunEvent:
    time: int
    seq: int
    stage: str
    event: str
    detail: str = ""


@dataclass
class RunReport:
    run_id: str
    scenario: str
    outcome: str  # done | failed
    failure_stage: Optional[str] = None
    failure_reason: Optional[str] = None
    stage_timings: dict = field(default_factory=dict)
    exit_report: Optional[dict] = None
    logs: list = field(default_factory=list)
    initial_hash: Optional[str] = None
    final_hash: Optional[str] = None
    applied_stages: list = field(default_factory=list)
    teardown_stages: list = field(default_factory=list)
    teardown_errors: list = field(default_factory=list)

    @property
    def ok(self):
        return self.outcome == "done"

    @property
    def outcome_label(self):
        return "done" if self.ok else f"failed({self.failure_stage})"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


_RUN_ID_RE = re.compile(r"^(?P<name>.+)-(?P<seq>\d{4,})$")


def allocate_run_id(output_dir, scenario_name):
    """Reserve ``<output_dir>/<scenario>-NNNN`` with the next free sequence."""
    root = Path(output_dir)
    root.mkdir(parents=True, exist_ok=True)
    seqs = [int(m.group("seq")) for p in root.iterdir()
            if (m := _RUN_ID_RE.match(p.name)) and m.group("name") == scenario_name]
    n = max(seqs, default=0) + 1
    while True:
        run_id = f"{scenario_name}-{n:04d}"
        try:
            (root / run_id).mkdir()
            return run_id
        except FileExistsError:
            n += 1


class _AbortedRun(LabError):
    pass


class ExperimentRun:
    """One execution of a scenario; :meth:`execute` never raises for run
    failures, which are encoded in the returned :class:`RunReport`."""

    def __init__(self, scenario, testbed, drivers, sink, run_id=None, output_dir=None,
                 on_stage: Optional[Callable] = None, await_timeout=DEFAULT_AWAIT_TIMEOUT, psk=None,
                 hold=False):
        self.scenario = scenario
        self.testbed = testbed
        self.drivers = drivers
        self.sink = sink
        self.output_dir = Path(output_dir if output_dir is not None else scenario.output_dir)
        self.run_id = run_id or allocate_run_id(self.output_dir, scenario.name)
        self.run_dir = self.output_dir / self.run_id
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.on_stage = on_stage
        self.await_timeout = await_timeout
        self.psk = psk
        # hold: keep the workload up until release() instead of the stop condition
        self.hold = hold
        self._release = threading.Event()
        self.state = RunState.PENDING
        self.teardown_stack = []  # (stage, handle, teardown callable)
        self.events = []
        self.report = None
        self._lock = threading.Lock()
        self._timings = {}
        self._applied = []
        self._torn = []
        self._teardown_errors = []
        self._exit_report = None
        self._deployment = None
        self._logs = []

    # -- bookkeeping -------------------------------------------------------

    def _now(self):
        return self.drivers.clock.now()

    def _event(self, stage, event, detail=""):
        ev = RunEvent(self._now(), len(self.events) + 1, stage, event, detail)
        self.events.append(ev)
        with open(self.run_dir / "events.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(ev), sort_keys=True) + "\n")
        log.debug("%s %s %s %s", self.run_id, stage, event, detail)
        if self.on_stage is not None:
            self.on_stage(self, stage, event)

    def _set_state(self, new):
        with self._lock:
            if not allowed_transition(self.state, new):
                raise InvalidTransition(f"{self.state.value} -> {new.value}")
            self.state = new

    def _begin(self, stage):
        self._timings[stage] = {"start": self._now(), "end": None}
        self.drivers.ctx.enter(stage)
        self.drivers.ctx.check_abort()
        self._event(stage, "start")

    def _end(self, stage, state=None):
        self._timings[stage]["end"] = self._now()
        if state is not None:
            self._set_state(state)
        self._event(stage, "up")

    def _push(self, stage, handle, undo):
        self.teardown_stack.append((stage, handle, undo))
        self._applied.append(stage)

    def _apply(self, stage, undo, fn, *args, **kwargs):
        try:
            handle = fn(*args, **kwargs)
        except (LabError, Aborted) as exc:
            partial = getattr(exc, "handle", None)
            if partial is not None:
                self._push(stage, partial, lambda: undo(partial))
            raise
        self._push(stage, handle, lambda: undo(handle))
        return handle

    # -- public -------------------------------------------------------------

    def abort(self):
        """Cancel at the next cancellation point; no-op while unwinding."""
        with self._lock:
            if self.state in TERMINAL:
                raise AlreadyTerminal(f"run {self.run_id} is {self.state.value}")
            if self.state == RunState.TEARING_DOWN:
                return
            self.drivers.ctx.request_abort()

    def release(self):
        """End a held run's workload stage normally."""
        self._release.set()

    def execute(self):
        d = self.drivers
        sc = self.scenario
        self.initial_hash = d.state_hash()
        sink_base = self._sink_mark()
        stage = "plan"
        failure = None
        try:
            self._begin("plan")
            cloud_plan = plan_cloud(sc, self.testbed)
            plan_physical(sc, self.testbed)
            self._end("plan")

            stage = "phys"
            self._begin(stage)
            with d.phys_lock:
                phys_plan = plan_physical(sc, self.testbed, exclude_vlans=d.switch.vlans())
                self._apply(stage, lambda h: teardown_physical(h, d.switch, d.radio),
                            apply_physical, phys_plan, d.switch, d.radio)
            self._end(stage, RunState.PHYS_UP)

            cloud_hosts = []
            if cloud_plan is not None:
                stage = "cloud"
                self._begin(stage)
                handle = self._apply(stage, lambda h: terminate_all(h, d.cloud),
                                     provision, with_key(cloud_plan, f"labctl-{self.run_id}"), d.cloud)
                cloud_hosts = handle.hostnames
                self._end(stage, RunState.CLOUD_UP)

            stage = "ip"
            self._begin(stage)
            ip_plan = plan_ip(sc, phys_plan, cloud_hosts, self.testbed)
            self._apply(stage, lambda h: teardown_ip(h, d.host), apply_ip, ip_plan, d.host, self.psk)
            self._end(stage, RunState.IP_UP)

            stage = "workload"
            self._begin(stage)
            self._deployment = self._apply(stage, lambda h: teardown_workload(h, d.engine_client),
                                           deploy, sc, self.testbed, d.engine_client, self.sink.address,
                                           cloud_hosts)
            self._end(stage, RunState.WORKLOAD_RUNNING)

            stage = "await"
            self._begin(stage)
            exit_report = await_completion(self._deployment, sc.stop, d.engine_client, d.clock,
                                           self.await_timeout, ctx=d.ctx,
                                           hold=self._release if self.hold else None)
            self._exit_report = exit_report
            if exit_report.aborted:
                raise _AbortedRun("aborted")
            self._end(stage)

            stage = "collect"
            self._begin(stage)
            self._set_state(RunState.COLLECTING)
            self._logs = self._collect(sink_base)
            self._end(stage)
        except (LabError, Aborted) as exc:
            reason = "aborted" if isinstance(exc, (Aborted, _AbortedRun)) else f"{type(exc).__name__}: {exc}"
            failure = (stage, reason)
            self._event(stage, "failed", reason)
            log.warning("run %s failed at %s: %s", self.run_id, stage, reason)

        self._unwind()
        return self._finish(failure)

    # -- unwinding and artifacts ------------------------------------------------

    def _unwind(self):
        self._set_state(RunState.TEARING_DOWN)
        while self.teardown_stack:
            stage, _, undo = self.teardown_stack[-1]
            self.drivers.ctx.enter(stage, teardown=True)
            self._event(stage, "teardown-start")
            try:
                undo()
            except LabError as exc:
                self._teardown_errors.append(f"{stage}: {exc}")
                log.error("teardown of %s: %s", stage, exc)
            self.teardown_stack.pop()
            self._torn.append(stage)
            self._event(stage, "teardown-done")

    def _finish(self, failure):
        self._set_state(RunState.FAILED if failure else RunState.DONE)
        report = RunReport(
            run_id=self.run_id,
            scenario=self.scenario.name,
            outcome="failed" if failure else "done",
            failure_stage=failure[0] if failure else None,
            failure_reason=failure[1] if failure else None,
            stage_timings=self._timings,
            exit_report=self._exit_report.to_dict() if self._exit_report else None,
            logs=list(self._logs),
            initial_hash=self.initial_hash,
            final_hash=self.drivers.state_hash(),
            applied_stages=list(self._applied),
            teardown_stages=list(self._torn),
            teardown_errors=list(self._teardown_errors),
        )
        self.report = report
        self._write(report)
        return report

    def _write(self, report):
        with open(self.run_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def _sink_mark(self):
        return self.sink.offsets(), self.sink.records, self.drivers.logs_sent()

    def _collect(self, mark):
        """Copy this run's sink output into ``<run dir>/logs``."""
        offsets, records, sent = mark
        expected = records + (self.drivers.logs_sent() - sent)
        if not self.sink.wait_for_records(expected, timeout=5.0):
            log.warning("log sink has %d of %d expected records", self.sink.records, expected)
        hosts = set(self._deployment.hosts()) if self._deployment else set()
        logs_dir = self.run_dir / "logs"
        logs_dir.mkdir(exist_ok=True)
        files = []
        for tag, size in sorted(self.sink.offsets().items()):
            parts = tag.split(".")
            if len(parts) < 2 or parts[0] != "host" or parts[1] not in hosts:
                continue
            start = offsets.get(tag, 0)
            if size <= start:
                continue
            with open(self.sink.output_dir / f"{tag}.log", "rb") as src, open(logs_dir / f"{tag}.log", "wb") as dst:
                src.seek(start)
                dst.write(src.read(size - start))
            files.append(f"logs/{tag}.log")
        return files


def run_experiment(scenario, testbed, drivers, sink, **kwargs):
    """Execute a run and return its :class:`RunReport` (never raises for
    run failures)."""
    return ExperimentRun(scenario, testbed, drivers, sink, **kwargs).execute()


def load_report(run_dir):
    with open(Path(run_dir) / "report.json", encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))


def read_events(run_dir):
    path = Path(run_dir) / "events.jsonl"
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [RunEvent(**json.loads(line)) for line in fh if line.strip()]


def find_runs(output_dir):
    root = Path(output_dir)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "report.json").exists() or _RUN_ID_RE.match(p.name))
