"""Declarative experiment description: parsing, serialization and validation.

A scenario file is one YAML document.  The ``services`` section is a subset
of the Docker Compose service schema (image, command, environment, deploy,
networks, volumes, logging).
"""

import enum
import ipaddress
import re
import shlex
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .errors import ParseError, SchemaError, UnknownPhy
from .inventory import WORKLOAD_ROLES, Capability, InterfaceKind, Role

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_-]*$")
DEFAULT_OUTPUT_DIR = "runs"


class Phy(str, enum.Enum):
    ETHERNET = "ethernet"
    WIFI = "wifi"
    LTE = "lte"


class Placement(str, enum.Enum):
    CLIENT = "workload-client"
    EDGE = "edge-server"
    CLOUD = "cloud"


class StopKind(str, enum.Enum):
    FIRST_EXIT = "first-service-exit"
    ALL_EXIT = "all-services-exit"
    AFTER_DURATION = "after-duration"


@dataclass(frozen=True)
class StopCondition:
    kind: StopKind = StopKind.FIRST_EXIT
    seconds: Optional[int] = None


@dataclass(frozen=True)
class NetworkDef:
    name: str
    subnet: str
    members: tuple


@dataclass(frozen=True)
class LinkDef:
    client: str
    phy: Phy
    network: str


@dataclass(frozen=True)
class CloudDef:
    region: str
    count: int
    network: str


@dataclass(frozen=True)
class VolumeMount:
    volume: str
    path: str


@dataclass(frozen=True)
class ServiceDef:
    name: str
    image: str
    command: tuple = ()
    env: dict = field(default_factory=dict)
    replicas: int = 1
    placement_role: Placement = Placement.CLIENT
    networks: tuple = ()
    volumes: tuple = ()
    log_tag: str = ""


@dataclass(frozen=True)
class Scenario:
    name: str
    networks: tuple
    links: tuple = ()
    cloud: Optional[CloudDef] = None
    services: tuple = ()
    shared_volumes: tuple = ()
    stop: StopCondition = StopCondition()
    output_dir: str = DEFAULT_OUTPUT_DIR

    def network(self, name):
        for n in self.networks:
            if n.name == name:
                return n
        raise KeyError(name)

    def members(self):
        """All host names appearing in any network, sorted."""
        return sorted({m for n in self.networks for m in n.members})

    def link_for(self, network, client):
        for link in self.links:
            if link.network == network and link.client == client:
                return link
        return None


# -- parsing ---------------------------------------------------------------


def _mapping(value, path):
    if not isinstance(value, dict):
        raise SchemaError(path, "expected a mapping")
    return value


def _list(value, path):
    if not isinstance(value, list):
        raise SchemaError(path, "expected a list")
    return value


def _required(mapping, key, path):
    if key not in mapping:
        raise SchemaError(f"{path}.{key}" if path else key, "required key missing")
    return mapping[key]


def _int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise SchemaError(path, f"must be >= {minimum}")
    return value


def _name(value, path):
    value = str(value)
    if not _NAME_RE.match(value):
        raise SchemaError(path, f"invalid name {value!r}")
    return value


def _parse_stop(raw):
    if raw is None:
        return StopCondition()
    if isinstance(raw, str):
        if raw in (StopKind.FIRST_EXIT.value, StopKind.ALL_EXIT.value):
            return StopCondition(StopKind(raw))
        raise SchemaError("stop", f"unknown stop condition {raw!r}")
    if isinstance(raw, dict) and set(raw) == {"after-duration"}:
        return StopCondition(StopKind.AFTER_DURATION, _int(raw["after-duration"], "stop.after-duration", 0))
    raise SchemaError("stop", "expected first-service-exit, all-services-exit or {after-duration: N}")


def _parse_service(name, raw):
    path = f"services.{name}"
    raw = _mapping(raw, path)
    command = raw.get("command", [])
    if isinstance(command, str):
        command = shlex.split(command)
    command = tuple(str(c) for c in _list(command, f"{path}.command"))
    env = raw.get("environment", {})
    if isinstance(env, list):
        pairs = {}
        for item in env:
            key, _, value = str(item).partition("=")
            pairs[key] = value
        env = pairs
    env = {str(k): str(v) for k, v in _mapping(env, f"{path}.environment").items()}
    deploy = _mapping(raw.get("deploy", {}), f"{path}.deploy")
    placement = deploy.get("placement", Placement.CLIENT.value)
    try:
        placement = Placement(placement)
    except ValueError:
        raise SchemaError(f"{path}.deploy.placement", f"unknown placement role {placement!r}") from None
    mounts = []
    for n, spec in enumerate(_list(raw.get("volumes", []), f"{path}.volumes")):
        vol, sep, mount_path = str(spec).partition(":")
        if not sep or not vol or not mount_path:
            raise SchemaError(f"{path}.volumes[{n}]", "expected '<volume>:<path>'")
        mounts.append(VolumeMount(vol, mount_path))
    logging_cfg = _mapping(raw.get("logging", {}), f"{path}.logging")
    log_tag = str(logging_cfg.get("tag", name))
    if not log_tag:
        raise SchemaError(f"{path}.logging.tag", "must be non-empty")
    return ServiceDef(
        name=name,
        image=str(_required(raw, "image", path)),
        command=command,
        env=env,
        replicas=_int(deploy.get("replicas", 1), f"{path}.deploy.replicas", 1),
        placement_role=placement,
        networks=tuple(str(n) for n in _list(raw.get("networks", []), f"{path}.networks")),
        volumes=tuple(mounts),
        log_tag=log_tag,
    )


def parse_scenario(text):
    """Parse scenario YAML into a :class:`Scenario` satisfying all type invariants."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(str(getattr(exc, "problem", None) or exc),
                         mark.line + 1 if mark else None,
                         mark.column + 1 if mark else None) from None
    doc = _mapping(doc, "scenario")
    known = {"name", "networks", "links", "cloud", "services", "volumes", "stop", "output_dir"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise SchemaError(unknown[0], "unknown top-level key")

    name = _name(_required(doc, "name", ""), "name")

    networks = []
    for net_name, raw in _mapping(_required(doc, "networks", ""), "networks").items():
        path = f"networks.{net_name}"
        raw = _mapping(raw, path)
        subnet = str(_required(raw, "subnet", path))
        try:
            ipaddress.IPv4Network(subnet, strict=True)
        except ValueError:
            raise SchemaError(f"{path}.subnet", f"invalid IPv4 CIDR {subnet!r}") from None
        members = tuple(str(m) for m in _list(_required(raw, "members", path), f"{path}.members"))
        if not members:
            raise SchemaError(f"{path}.members", "at least one member required")
        if len(set(members)) != len(members):
            raise SchemaError(f"{path}.members", "duplicate member")
        networks.append(NetworkDef(_name(net_name, path), subnet, members))
    if not networks:
        raise SchemaError("networks", "at least one network required")
    for i, a in enumerate(networks):
        for b in networks[i + 1:]:
            if ipaddress.IPv4Network(a.subnet).overlaps(ipaddress.IPv4Network(b.subnet)):
                raise SchemaError(f"networks.{b.name}.subnet", f"overlaps {a.name}")
    by_name = {n.name: n for n in networks}

    links = []
    seen = set()
    for n, raw in enumerate(_list(doc.get("links") or [], "links")):
        path = f"links[{n}]"
        raw = _mapping(raw, path)
        phy = str(_required(raw, "phy", path))
        try:
            phy = Phy(phy)
        except ValueError:
            raise UnknownPhy(f"{path}.phy", f"unknown phy {phy!r}") from None
        link = LinkDef(str(_required(raw, "client", path)), phy, str(_required(raw, "network", path)))
        if link.network not in by_name:
            raise SchemaError(f"{path}.network", f"undeclared network {link.network!r}")
        if link.client not in by_name[link.network].members:
            raise SchemaError(f"{path}.client", f"{link.client} is not a member of {link.network}")
        if (link.network, link.client) in seen:
            raise SchemaError(path, "duplicate link")
        seen.add((link.network, link.client))
        links.append(link)

    cloud = None
    if doc.get("cloud") is not None:
        raw = _mapping(doc["cloud"], "cloud")
        cloud = CloudDef(
            region=str(_required(raw, "region", "cloud")),
            count=_int(raw.get("count", 1), "cloud.count", 0),
            network=str(_required(raw, "network", "cloud")),
        )
        if cloud.network not in by_name:
            raise SchemaError("cloud.network", f"undeclared network {cloud.network!r}")

    volumes = tuple(_name(v, "volumes") for v in _list(doc.get("volumes") or [], "volumes"))
    if len(set(volumes)) != len(volumes):
        raise SchemaError("volumes", "duplicate volume")

    services = []
    for svc_name, raw in _mapping(doc.get("services") or {}, "services").items():
        svc = _parse_service(_name(svc_name, "services"), raw)
        for net in svc.networks:
            if net not in by_name:
                raise SchemaError(f"services.{svc.name}.networks", f"undeclared overlay network {net!r}")
        for mount in svc.volumes:
            if mount.volume not in volumes:
                raise SchemaError(f"services.{svc.name}.volumes", f"undeclared shared volume {mount.volume!r}")
        services.append(svc)

    return Scenario(
        name=name,
        networks=tuple(networks),
        links=tuple(links),
        cloud=cloud,
        services=tuple(services),
        shared_volumes=volumes,
        stop=_parse_stop(doc.get("stop")),
        output_dir=str(doc.get("output_dir", DEFAULT_OUTPUT_DIR)),
    )


def scenario_to_dict(sc):
    doc = {"name": sc.name, "networks": {}}
    for net in sc.networks:
        doc["networks"][net.name] = {"subnet": net.subnet, "members": list(net.members)}
    if sc.links:
        doc["links"] = [{"client": l.client, "phy": l.phy.value, "network": l.network} for l in sc.links]
    if sc.cloud is not None:
        doc["cloud"] = {"region": sc.cloud.region, "count": sc.cloud.count, "network": sc.cloud.network}
    if sc.services:
        doc["services"] = {}
        for svc in sc.services:
            doc["services"][svc.name] = {
                "image": svc.image,
                "command": list(svc.command),
                "environment": dict(svc.env),
                "deploy": {"replicas": svc.replicas, "placement": svc.placement_role.value},
                "networks": list(svc.networks),
                "volumes": [f"{m.volume}:{m.path}" for m in svc.volumes],
                "logging": {"tag": svc.log_tag},
            }
    if sc.shared_volumes:
        doc["volumes"] = list(sc.shared_volumes)
    if sc.stop.kind == StopKind.AFTER_DURATION:
        doc["stop"] = {"after-duration": sc.stop.seconds}
    else:
        doc["stop"] = sc.stop.kind.value
    doc["output_dir"] = sc.output_dir
    return doc


def dump_scenario(sc):
    return yaml.safe_dump(scenario_to_dict(sc), sort_keys=False)


# -- feasibility against a testbed -----------------------------------------


class LinkMode(str, enum.Enum):
    ETHERNET = "ethernet"
    WIFI_ONBOARD = "wifi-onboard"
    WIFI_STA = "wifi-sta"
    LTE = "lte"


@dataclass(frozen=True)
class Attachment:
    """Which interface a host uses to join a workload network."""
    network: str
    host: str
    iface: str
    kind: InterfaceKind
    port: Optional[int] = None
    mode: LinkMode = LinkMode.ETHERNET


@dataclass(frozen=True)
class Finding:
    code: str
    subject: str
    detail: str = ""

    def __str__(self):
        return f"{self.code}({self.subject})" + (f": {self.detail}" if self.detail else "")


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple = ()

    @property
    def ok(self):
        return not self.findings

    def codes(self):
        return [f.code for f in self.findings]

    def __str__(self):
        lines = [f"{len(self.findings)} findings"]
        lines.extend(f"  {f}" for f in self.findings)
        return "\n".join(lines)


def resolve_attachments(scenario, testbed):
    """Map each (network, host) membership onto a concrete interface.

    Wifi links prefer an on-board wifi interface and fall back to a
    wifi-sta radio bridged over the client's ethernet port.  Hosts unknown
    to the testbed are skipped.  Returns ``(attachments, short)`` where
    ``short`` lists hosts that ran out of interfaces.
    """
    attachments, short = {}, []
    memberships = {}
    for net in sorted(scenario.networks, key=lambda n: n.name):
        for member in net.members:
            memberships.setdefault(member, []).append(net.name)
    gateway = None
    if scenario.cloud is not None and scenario.cloud.count > 0:
        gateway = testbed.gateway(Role.GATEWAY_WORKLOAD).name
        memberships.setdefault(gateway, []).append(scenario.cloud.network)

    for host_name in sorted(memberships):
        if not testbed.has_host(host_name):
            continue
        host = testbed.host(host_name)
        wifi = [i for i in host.interfaces_of(InterfaceKind.WIFI)]
        eth = [i for i in host.interfaces_of(InterfaceKind.ETHERNET)]
        ok = True
        for net_name in sorted(memberships[host_name]):
            link = scenario.link_for(net_name, host_name) if host_name != gateway else None
            phy = link.phy if link else Phy.ETHERNET
            if phy == Phy.WIFI and wifi:
                iface = wifi.pop(0)
                attachments[(net_name, host_name)] = Attachment(
                    net_name, host_name, iface.name, iface.kind, None, LinkMode.WIFI_ONBOARD)
                continue
            if not eth:
                ok = False
                continue
            iface = eth.pop(0)
            mode = {Phy.ETHERNET: LinkMode.ETHERNET, Phy.WIFI: LinkMode.WIFI_STA, Phy.LTE: LinkMode.LTE}[phy]
            attachments[(net_name, host_name)] = Attachment(
                net_name, host_name, iface.name, iface.kind, iface.switch_port, mode)
        if not ok:
            short.append(host_name)
    return attachments, short


def radio_needs(scenario, attachments):
    """Ordered radio requirements as ``[(key, capability)]``."""
    needs = []
    for net in sorted(scenario.networks, key=lambda n: n.name):
        if any(a.network == net.name and a.mode in (LinkMode.WIFI_ONBOARD, LinkMode.WIFI_STA)
               for a in attachments.values()):
            needs.append((("ap", net.name), Capability.WIFI_AP))
    for (net_name, host), att in sorted(attachments.items()):
        if att.mode == LinkMode.WIFI_STA:
            needs.append((("sta", net_name, host), Capability.WIFI_STA))
        elif att.mode == LinkMode.LTE:
            needs.append((("enb", net_name, host), Capability.LTE_ENB))
            needs.append((("ue", net_name, host), Capability.LTE_UE))
    return needs


def match_radios(needs, radios, exclude=()):
    """Deterministic bipartite matching of needs onto radios.

    Needs are processed in order and candidate radios tried by ascending id
    (augmenting paths), so single-capability inventories get the greedy
    lowest-id assignment.  Returns ``(assignment, unmatched)``.
    """
    pool = sorted((r for r in radios if r.id not in set(exclude)), key=lambda r: r.id)
    owner = {}  # radio id -> need index

    def augment(i, seen):
        cap = needs[i][1]
        for radio in pool:
            if cap not in radio.capabilities or radio.id in seen:
                continue
            seen.add(radio.id)
            if radio.id not in owner or augment(owner[radio.id], seen):
                owner[radio.id] = i
                return True
        return False

    unmatched = [needs[i] for i in range(len(needs)) if not augment(i, set())]
    assignment = {needs[i][0]: rid for rid, i in owner.items()}
    return assignment, unmatched


def vlan_demand(scenario, attachments):
    extra = sum(1 for a in attachments.values() if a.mode in (LinkMode.WIFI_STA, LinkMode.LTE))
    return len(scenario.networks) + extra


def validate_against(scenario, testbed):
    """Pure realizability check; findings are data, never exceptions."""
    findings = []
    for net in scenario.networks:
        for member in net.members:
            if not testbed.has_host(member):
                findings.append(Finding("UnknownHost", member, f"member of {net.name}"))
            elif testbed.host(member).role not in WORKLOAD_ROLES:
                findings.append(Finding("InvalidRole", member, testbed.host(member).role.value))

    if scenario.cloud is not None and scenario.cloud.region not in testbed.cloud_regions:
        findings.append(Finding("UnknownRegion", scenario.cloud.region))

    attachments, short = resolve_attachments(scenario, testbed)
    for host in short:
        findings.append(Finding("InsufficientInterfaces", host))

    _, unmatched = match_radios(radio_needs(scenario, attachments), testbed.radios)
    missing = {}
    for _, cap in unmatched:
        missing[cap] = missing.get(cap, 0) + 1
    for cap in Capability:
        if cap in missing:
            findings.append(Finding("InsufficientRadios", cap.value, f"{missing[cap]} more required"))

    available = len(testbed.switch.workload_vlan_ids())
    demand = vlan_demand(scenario, attachments)
    if demand > available:
        findings.append(Finding("InsufficientVlans", str(demand), f"{available} available"))

    roles = {testbed.host(m).role for m in scenario.members() if testbed.has_host(m)}
    for svc in scenario.services:
        if svc.placement_role == Placement.CLOUD:
            eligible = scenario.cloud is not None and scenario.cloud.count > 0
        else:
            eligible = Role(svc.placement_role.value) in roles
        if not eligible:
            findings.append(Finding("NoEligibleHost", svc.name, svc.placement_role.value))
    return ValidationReport(tuple(findings))
