"""Workload layer: manager election, placement, deployment, await, teardown.

Orchestration semantics (placement, overlay naming, scaling) are performed
here against each host's container-engine API rather than delegated to a
cluster manager.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

from .errors import Aborted, EngineError, LabError, NoEligibleHost, PlacementError, TeardownErrors, TeardownStatus
from .inventory import WORKLOAD_ROLES, Role
from .scenario import Placement, StopKind
from .simnet.engine_api import FORWARDER_ROLE

log = logging.getLogger(__name__)

FORWARDER_IMAGE = "labctl/log-forwarder:1"
STORAGE_IMAGE = "labctl/storage:1"
STORAGE_ROLE = "storage"
EXPORT_ROOT = "/exports"


class DeploymentState(str, enum.Enum):
    DEPLOYING = "deploying"
    RUNNING = "running"
    DRAINING = "draining"
    DONE = "done"


@dataclass(frozen=True)
class Task:
    service: str
    replica: int
    host: str
    container_id: str


@dataclass
class StorageService:
    server: str
    volumes: tuple
    export_path: str = EXPORT_ROOT


@dataclass
class Deployment:
    scenario: str
    manager: str
    workers: list = field(default_factory=list)
    networks: list = field(default_factory=list)  # (host, name)
    volumes: list = field(default_factory=list)  # (host, name)
    images: list = field(default_factory=list)  # (host, ref) pulled by this deployment
    tasks: dict = field(default_factory=dict)  # service -> [Task]
    forwarders: dict = field(default_factory=dict)  # host -> container id
    storage: Optional[StorageService] = None
    state: DeploymentState = DeploymentState.DEPLOYING
    created: list = field(default_factory=list)  # (kind, host, ref) in creation order
    torn_down: bool = False

    def all_tasks(self):
        return [t for svc in sorted(self.tasks) for t in self.tasks[svc]]

    def hosts(self):
        return sorted({h for _, h, _ in self.created})


def elect_manager(scenario, testbed):
    """Edge server if the scenario has one, else the smallest workload host."""
    candidates = [testbed.host(m) for m in scenario.members() if testbed.has_host(m)]
    candidates = [h for h in candidates if h.role in WORKLOAD_ROLES]
    edges = sorted(h.name for h in candidates if h.role == Role.EDGE)
    if edges:
        return edges[0]
    if candidates:
        return min(h.name for h in candidates)
    raise NoEligibleHost("no workload host in scenario")


def eligible_hosts(scenario, testbed, placement, cloud_hosts=()):
    if placement == Placement.CLOUD:
        return sorted(cloud_hosts)
    role = Role(placement.value)
    return sorted(m for m in scenario.members() if testbed.has_host(m) and testbed.host(m).role == role)


def place_replicas(replicas, hosts):
    """Round-robin over ascending host names starting at replica 0."""
    if not hosts:
        raise PlacementError("no eligible host")
    hosts = sorted(hosts)
    return [hosts[i % len(hosts)] for i in range(replicas)]


def overlay_name(scenario_name, network):
    return f"{scenario_name}_{network}"


def volume_name(scenario_name, volume):
    return f"{scenario_name}_{volume}"


@dataclass(frozen=True)
class HostWork:
    networks: tuple
    volumes: tuple
    images: tuple
    storage: bool


def plan_deployment(scenario, testbed, cloud_hosts=()):
    """Pure placement: ``(manager, placements, per-host work)``.

    ``placements`` maps service name to the host of each replica.
    """
    manager = elect_manager(scenario, testbed)
    placements = {}
    for svc in scenario.services:
        hosts = eligible_hosts(scenario, testbed, svc.placement_role, cloud_hosts)
        if not hosts:
            raise PlacementError(f"service {svc.name}: no host with role {svc.placement_role.value}")
        placements[svc.name] = place_replicas(svc.replicas, hosts)
    storage_host = manager if scenario.shared_volumes else None
    per_host = {}
    hosts = sorted({h for hs in placements.values() for h in hs} | ({storage_host} if storage_host else set()))
    for host in hosts:
        svcs = [s for s in scenario.services if host in placements[s.name]]
        nets = sorted({n for s in svcs for n in s.networks})
        vols = set(m.volume for s in svcs for m in s.volumes)
        if host == storage_host:
            vols |= set(scenario.shared_volumes)
        images = [FORWARDER_IMAGE]
        if host == storage_host:
            images.append(STORAGE_IMAGE)
        for s in svcs:
            if s.image not in images:
                images.append(s.image)
        per_host[host] = HostWork(tuple(nets), tuple(sorted(vols)), tuple(images), host == storage_host)
    return manager, placements, per_host


def deploy(scenario, testbed, engines, sink_address, cloud_hosts=()):
    """Create networks, volumes, images, log forwarder and services.

    ``engines`` maps host name to an engine client.  On failure the raised
    error carries ``handle``: the partial :class:`Deployment`.
    """
    manager, placements, per_host = plan_deployment(scenario, testbed, cloud_hosts)
    dep = Deployment(scenario.name, manager, workers=[h for h in per_host if h != manager])
    if scenario.shared_volumes:
        dep.storage = StorageService(manager, tuple(volume_name(scenario.name, v) for v in scenario.shared_volumes))
    sink = f"{sink_address[0]}:{sink_address[1]}"
    base_labels = {"labctl.scenario": scenario.name}
    try:
        for host in sorted(per_host):
            work = per_host[host]
            eng = engines(host)
            for net in work.networks:
                name = overlay_name(scenario.name, net)
                eng.create_network(name, "overlay")
                dep.networks.append((host, name))
                dep.created.append(("network", host, name))
            for vol in work.volumes:
                name = volume_name(scenario.name, vol)
                if host == manager and dep.storage is not None:
                    eng.create_volume(name, "local", {"export": f"{EXPORT_ROOT}/{vol}"})
                else:
                    eng.create_volume(name, "remote", {"server": manager, "export": f"{EXPORT_ROOT}/{vol}"})
                dep.volumes.append((host, name))
                dep.created.append(("volume", host, name))
            for ref in work.images:
                if eng.pull(ref):
                    dep.images.append((host, ref))
                    dep.created.append(("image", host, ref))
            cid = eng.create_container({
                "name": "log-forwarder", "image": FORWARDER_IMAGE,
                "env": {"LOG_SINK": sink}, "labels": {**base_labels, "labctl.role": FORWARDER_ROLE},
                "log_tag": f"host.{host}",
            })
            dep.created.append(("container", host, cid))
            eng.start(cid)
            dep.forwarders[host] = cid
            if work.storage:
                mounts = [{"volume": volume_name(scenario.name, v), "path": f"{EXPORT_ROOT}/{v}"}
                          for v in scenario.shared_volumes]
                cid = eng.create_container({
                    "name": "storage", "image": STORAGE_IMAGE, "mounts": mounts,
                    "labels": {**base_labels, "labctl.role": STORAGE_ROLE, "labctl.service": "storage"},
                    "log_tag": "storage",
                })
                dep.created.append(("container", host, cid))
                eng.start(cid)
        for svc in scenario.services:
            dep.tasks[svc.name] = []
            for replica, host in enumerate(placements[svc.name]):
                eng = engines(host)
                cid = eng.create_container({
                    "name": f"{svc.name}.{replica}", "image": svc.image, "command": list(svc.command),
                    "env": {**svc.env, "REPLICA": str(replica)},
                    "labels": {**base_labels, "labctl.service": svc.name, "labctl.replica": str(replica)},
                    "networks": [overlay_name(scenario.name, n) for n in svc.networks],
                    "mounts": [{"volume": volume_name(scenario.name, m.volume), "path": m.path} for m in svc.volumes],
                    "log_tag": svc.log_tag,
                })
                dep.created.append(("container", host, cid))
                eng.start(cid)
                dep.tasks[svc.name].append(Task(svc.name, replica, host, cid))
    except (LabError, Aborted) as exc:
        exc.handle = dep
        raise
    dep.state = DeploymentState.RUNNING
    log.info("deployed %d tasks on %d hosts (manager %s)", len(dep.all_tasks()), len(per_host), manager)
    return dep


@dataclass
class ContainerExit:
    service: str
    replica: int
    host: str
    container_id: str
    state: str
    exit_code: Optional[int]
    stopped: bool


@dataclass
class ExitReport:
    condition_met: bool
    timed_out: bool
    elapsed: int
    containers: list
    aborted: bool = False

    def exits(self):
        return [c for c in self.containers if c.state == "exited"]

    def to_dict(self):
        return {
            "condition_met": self.condition_met, "timed_out": self.timed_out, "aborted": self.aborted,
            "elapsed": self.elapsed,
            "containers": [vars(c) for c in self.containers],
        }


def _status(dep, engines):
    out = []
    for t in dep.all_tasks():
        info = engines(t.host).inspect(t.container_id)["State"]
        out.append(ContainerExit(t.service, t.replica, t.host, t.container_id,
                                 info["Status"], info["ExitCode"], bool(info["Stopped"])))
    return out


def _condition(stop, status, elapsed):
    if stop.kind == StopKind.AFTER_DURATION:
        return elapsed >= (stop.seconds or 0)
    exited = [c for c in status if c.state == "exited"]
    if stop.kind == StopKind.FIRST_EXIT:
        return bool(exited)
    return len(exited) == len(status)


def await_completion(dep, stop, engines, clock, timeout=600, poll=1, ctx=None, hold=None):
    """Advance logical time until the stop condition holds or ``timeout``.

    Timeouts are reported, not raised.  An abort request stops the service
    containers and returns a report with ``aborted`` set.  With ``hold`` (a
    threading.Event) the stop condition is replaced by that event, and
    time advances in step with the wall clock.
    """
    start = clock.now()
    while True:
        # engine requests are cancellation points too
        try:
            elapsed = clock.now() - start
            status = _status(dep, engines)
            if hold is not None:
                if hold.wait(0.05):
                    return ExitReport(True, False, elapsed, status)
            elif _condition(stop, status, elapsed):
                return ExitReport(True, False, elapsed, status)
            elif elapsed >= timeout:
                return ExitReport(False, True, elapsed, status)
            if ctx is not None:
                ctx.check_abort()
            clock.advance(poll)
        except Aborted:
            for t in dep.all_tasks():
                engines(t.host).stop(t.container_id)
            return ExitReport(False, False, clock.now() - start, _status(dep, engines), aborted=True)


def teardown_workload(dep, engines):
    """Remove everything the deployment created, newest first.

    Services go before the storage container and log forwarders; then
    images, volumes and networks.  Failures are collected and the rest
    still runs.
    """
    if dep.torn_down:
        return TeardownStatus.ALREADY_TORN_DOWN
    dep.state = DeploymentState.DRAINING
    errors = []
    for kind, host, ref in reversed(dep.created):
        eng = engines(host)
        try:
            if kind == "container":
                eng.stop(ref)
                eng.remove_container(ref)
            elif kind == "image":
                eng.remove_image(ref)
            elif kind == "volume":
                eng.remove_volume(ref)
            elif kind == "network":
                eng.remove_network(ref)
        except EngineError as exc:
            if exc.status == 404:
                continue
            errors.append(exc)
        except LabError as exc:
            errors.append(exc)
    dep.torn_down = True
    dep.state = DeploymentState.DONE
    if errors:
        raise TeardownErrors(errors)
    return TeardownStatus.DONE
