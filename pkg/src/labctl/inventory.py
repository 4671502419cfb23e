"""Static testbed inventory: hosts, interfaces, switch, radios and gateways.

The inventory is always declared in a YAML file and validated on load; a
:class:`Testbed` that escapes :func:`load_testbed` satisfies every rule below.
"""

import enum
import ipaddress
import re
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .errors import InvariantViolation, ParseError, UnknownHost

DEFAULT_ENGINE_PORT = 2375
DEFAULT_VLAN_RANGE = (100, 999)
DEFAULT_MGMT_VLAN = 4000
DEFAULT_CONTROL_SUBNET = "172.16.0.0/24"
DEFAULT_CONTROL_VPN_SUBNET = "10.10.0.0/24"
DEFAULT_WORKLOAD_VPN_SUBNET = "10.11.0.0/24"

_LABEL_RE = re.compile(r"^[A-Za-z0-9](?:[A-Za-z0-9-]{0,61}[A-Za-z0-9])?$")
_MAC_RE = re.compile(r"^[0-9a-f]{2}(?::[0-9a-f]{2}){5}$")
_CLOUD_NAME_RE = re.compile(r"^cloud-\d+$")


class InterfaceKind(str, enum.Enum):
    ETHERNET = "ethernet"
    WIFI = "wifi"
    MANAGEMENT = "management"


class Role(str, enum.Enum):
    CONTROL = "control"
    CLIENT = "workload-client"
    EDGE = "edge-server"
    GATEWAY_CONTROL = "gateway-control-vpn"
    GATEWAY_WORKLOAD = "gateway-workload-vpn"
    SDR = "sdr-compute"


WORKLOAD_ROLES = (Role.CLIENT, Role.EDGE)
GATEWAY_ROLES = (Role.GATEWAY_CONTROL, Role.GATEWAY_WORKLOAD)


class Capability(str, enum.Enum):
    WIFI_AP = "wifi-ap"
    WIFI_STA = "wifi-sta"
    LTE_ENB = "lte-enb"
    LTE_UE = "lte-ue"


@dataclass(frozen=True)
class Interface:
    name: str
    kind: InterfaceKind
    mac: str
    switch_port: Optional[int] = None


@dataclass(frozen=True)
class HostSpec:
    name: str
    role: Role
    interfaces: tuple
    engine_port: int = DEFAULT_ENGINE_PORT

    def interfaces_of(self, kind):
        return [i for i in self.interfaces if i.kind == kind]

    def interface(self, name):
        for iface in self.interfaces:
            if iface.name == name:
                return iface
        raise KeyError(f"{self.name} has no interface {name}")

    @property
    def management(self):
        return self.interfaces_of(InterfaceKind.MANAGEMENT)[0]


@dataclass(frozen=True)
class RadioSpec:
    id: str
    capabilities: frozenset
    attached_host: str
    # uplink interface on the attached sdr-compute host
    interface: str


@dataclass(frozen=True)
class SwitchSpec:
    port_count: int
    mgmt_port: int
    vlan_id_range: tuple = DEFAULT_VLAN_RANGE
    mgmt_vlan_id: int = DEFAULT_MGMT_VLAN

    def workload_vlan_ids(self):
        lo, hi = self.vlan_id_range
        return [v for v in range(lo, hi + 1) if v != self.mgmt_vlan_id]


@dataclass(frozen=True)
class Testbed:
    hosts: tuple
    switch: SwitchSpec
    radios: tuple
    public_ip: str
    control_vpn_udp_port: int
    workload_vpn_udp_port: int
    control_subnet: str = DEFAULT_CONTROL_SUBNET
    cloud_regions: tuple = ()
    control_vpn_subnet: str = DEFAULT_CONTROL_VPN_SUBNET
    workload_vpn_subnet: str = DEFAULT_WORKLOAD_VPN_SUBNET
    _by_name: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_name", {h.name: h for h in self.hosts})

    def host(self, name):
        return resolve_hostname(self, name)

    def has_host(self, name):
        return name in self._by_name

    def hosts_with_role(self, role):
        return sorted((h for h in self.hosts if h.role == role), key=lambda h: h.name)

    def gateway(self, role):
        return self.hosts_with_role(role)[0]

    @property
    def control_host(self):
        return self.hosts_with_role(Role.CONTROL)[0]

    def radio(self, radio_id):
        for r in self.radios:
            if r.id == radio_id:
                return r
        raise KeyError(radio_id)

    def radio_port(self, radio_id):
        r = self.radio(radio_id)
        return self.host(r.attached_host).interface(r.interface).switch_port


def resolve_hostname(testbed, name):
    """Case-sensitive host lookup."""
    try:
        return testbed._by_name[name]
    except KeyError:
        raise UnknownHost(name) from None


# -- loading ---------------------------------------------------------------


def _require(mapping, key, where):
    if not isinstance(mapping, dict):
        raise ParseError(f"{where}: expected a mapping")
    if key not in mapping:
        raise ParseError(f"{where}: missing key '{key}'")
    return mapping[key]


def _as_int(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{where}: expected an integer, got {value!r}")
    return value


def _enum(cls, value, where):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ParseError(f"{where}: {value!r} is not one of {allowed}") from None


def _parse_interface(raw, where):
    name = _require(raw, "name", where)
    kind = _enum(InterfaceKind, _require(raw, "kind", where), f"{where}.kind")
    mac = str(_require(raw, "mac", where)).lower()
    port = raw.get("switch_port")
    if port is not None:
        port = _as_int(port, f"{where}.switch_port")
    return Interface(name=str(name), kind=kind, mac=mac, switch_port=port)


def _parse_host(raw, where, role=None):
    name = _require(raw, "name", where)
    if role is None:
        role = _enum(Role, _require(raw, "role", where), f"{where}.role")
    ifaces = raw.get("interfaces") or []
    if not isinstance(ifaces, list):
        raise ParseError(f"{where}.interfaces: expected a list")
    return HostSpec(
        name=str(name),
        role=role,
        interfaces=tuple(_parse_interface(i, f"{where}.interfaces[{n}]") for n, i in enumerate(ifaces)),
        engine_port=_as_int(raw.get("engine_port", DEFAULT_ENGINE_PORT), f"{where}.engine_port"),
    )


def load_testbed(text):
    """Parse inventory YAML and return a validated :class:`Testbed`."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(str(getattr(exc, "problem", exc)),
                         mark.line + 1 if mark else None,
                         mark.column + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise ParseError("inventory must be a YAML mapping")
    known = {"hosts", "switch", "radios", "gateways", "cloud_regions", "public_ip",
             "vpn_ports", "control_subnet", "vpn_subnets"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ParseError(f"unknown top-level key(s): {', '.join(unknown)}")

    raw_hosts = _require(doc, "hosts", "inventory")
    if not isinstance(raw_hosts, list):
        raise ParseError("hosts: expected a list")
    hosts = [_parse_host(h, f"hosts[{n}]") for n, h in enumerate(raw_hosts)]

    gateways = _require(doc, "gateways", "inventory")
    for key, role in (("control", Role.GATEWAY_CONTROL), ("workload", Role.GATEWAY_WORKLOAD)):
        hosts.append(_parse_host(_require(gateways, key, "gateways"), f"gateways.{key}", role))

    sw = _require(doc, "switch", "inventory")
    port_count = _as_int(_require(sw, "ports", "switch"), "switch.ports")
    vrange = sw.get("vlan_range", list(DEFAULT_VLAN_RANGE))
    if not (isinstance(vrange, list) and len(vrange) == 2):
        raise ParseError("switch.vlan_range: expected [low, high]")
    switch = SwitchSpec(
        port_count=port_count,
        mgmt_port=_as_int(sw.get("mgmt_port", port_count), "switch.mgmt_port"),
        vlan_id_range=(_as_int(vrange[0], "switch.vlan_range"), _as_int(vrange[1], "switch.vlan_range")),
        mgmt_vlan_id=_as_int(sw.get("mgmt_vlan", DEFAULT_MGMT_VLAN), "switch.mgmt_vlan"),
    )

    host_by_name = {h.name: h for h in hosts}
    radios = []
    for n, raw in enumerate(doc.get("radios") or []):
        where = f"radios[{n}]"
        caps = _require(raw, "capabilities", where)
        if not isinstance(caps, list):
            raise ParseError(f"{where}.capabilities: expected a list")
        attached = str(_require(raw, "host", where))
        iface = raw.get("interface")
        if iface is None and attached in host_by_name:
            eth = host_by_name[attached].interfaces_of(InterfaceKind.ETHERNET)
            iface = eth[0].name if eth else ""
        radios.append(RadioSpec(
            id=str(_require(raw, "id", where)),
            capabilities=frozenset(_enum(Capability, c, f"{where}.capabilities") for c in caps),
            attached_host=attached,
            interface=str(iface or ""),
        ))

    vpn_ports = _require(doc, "vpn_ports", "inventory")
    subnets = doc.get("vpn_subnets") or {}
    testbed = Testbed(
        hosts=tuple(hosts),
        switch=switch,
        radios=tuple(radios),
        public_ip=str(_require(doc, "public_ip", "inventory")),
        control_vpn_udp_port=_as_int(_require(vpn_ports, "control", "vpn_ports"), "vpn_ports.control"),
        workload_vpn_udp_port=_as_int(_require(vpn_ports, "workload", "vpn_ports"), "vpn_ports.workload"),
        control_subnet=str(doc.get("control_subnet", DEFAULT_CONTROL_SUBNET)),
        cloud_regions=tuple(str(r) for r in (doc.get("cloud_regions") or [])),
        control_vpn_subnet=str(subnets.get("control", DEFAULT_CONTROL_VPN_SUBNET)),
        workload_vpn_subnet=str(subnets.get("workload", DEFAULT_WORKLOAD_VPN_SUBNET)),
    )
    check_testbed(testbed)
    return testbed


def _check_network(value, rule):
    try:
        return ipaddress.IPv4Network(value, strict=True)
    except ValueError:
        raise InvariantViolation(rule, value) from None


def check_testbed(tb):
    """Raise :class:`InvariantViolation` for the first broken rule."""
    sw = tb.switch
    lo, hi = sw.vlan_id_range
    if not (1 <= lo <= hi <= 4094):
        raise InvariantViolation("vlan range", f"{lo}-{hi}")
    if not 1 <= sw.mgmt_vlan_id <= 4094:
        raise InvariantViolation("mgmt vlan", str(sw.mgmt_vlan_id))
    if not 1 <= sw.mgmt_port <= sw.port_count:
        raise InvariantViolation("port out of range", f"mgmt port {sw.mgmt_port}")

    try:
        ipaddress.IPv4Address(tb.public_ip)
    except ValueError:
        raise InvariantViolation("public ip", tb.public_ip) from None
    subnets = [_check_network(tb.control_subnet, "control subnet"),
               _check_network(tb.control_vpn_subnet, "vpn subnet"),
               _check_network(tb.workload_vpn_subnet, "vpn subnet")]
    for i, a in enumerate(subnets):
        for b in subnets[i + 1:]:
            if a.overlaps(b):
                raise InvariantViolation("subnet overlap", f"{a} / {b}")

    for port in (tb.control_vpn_udp_port, tb.workload_vpn_udp_port):
        if not 1 <= port <= 65535:
            raise InvariantViolation("udp port range", str(port))
    if tb.control_vpn_udp_port == tb.workload_vpn_udp_port:
        raise InvariantViolation("distinct vpn ports", str(tb.control_vpn_udp_port))

    names, macs, ports = set(), {}, {}
    for host in tb.hosts:
        if not _LABEL_RE.match(host.name):
            raise InvariantViolation("host name", host.name)
        if _CLOUD_NAME_RE.match(host.name):
            raise InvariantViolation("reserved host name", host.name)
        if host.name in names:
            raise InvariantViolation("host name uniqueness", host.name)
        names.add(host.name)
        if not 1 <= host.engine_port <= 65535:
            raise InvariantViolation("engine port", host.name)

        if len({i.name for i in host.interfaces}) != len(host.interfaces):
            raise InvariantViolation("interface name uniqueness", host.name)
        mgmt = host.interfaces_of(InterfaceKind.MANAGEMENT)
        if host.role in WORKLOAD_ROLES:
            if len(host.interfaces) < 2 or len(mgmt) != 1:
                raise InvariantViolation("two interfaces required", host.name)
        elif len(mgmt) != 1:
            raise InvariantViolation("one management interface", host.name)

        for iface in host.interfaces:
            where = f"{host.name}/{iface.name}"
            if not _MAC_RE.match(iface.mac):
                raise InvariantViolation("mac format", where)
            if iface.mac in macs:
                raise InvariantViolation("mac uniqueness", f"{where} and {macs[iface.mac]}")
            macs[iface.mac] = where
            if (iface.switch_port is not None) != (iface.kind == InterfaceKind.ETHERNET):
                raise InvariantViolation("switch port iff ethernet", where)
            if iface.switch_port is not None:
                p = iface.switch_port
                if not 1 <= p <= sw.port_count:
                    raise InvariantViolation("port out of range", f"{where} port {p}")
                if p == sw.mgmt_port:
                    raise InvariantViolation("port reserved", f"{where} port {p}")
                if p in ports:
                    raise InvariantViolation("switch port uniqueness", f"{where} and {ports[p]}")
                ports[p] = where

    controls = [h for h in tb.hosts if h.role == Role.CONTROL]
    if len(controls) != 1:
        raise InvariantViolation("single control host", str(len(controls)))
    for role in GATEWAY_ROLES:
        count = sum(1 for h in tb.hosts if h.role == role)
        if count != 1:
            raise InvariantViolation("one gateway per network", f"{role.value}: {count}")

    by_name = {h.name: h for h in tb.hosts}
    radio_ids, uplinks = set(), {}
    for radio in tb.radios:
        if radio.id in radio_ids:
            raise InvariantViolation("radio id uniqueness", radio.id)
        radio_ids.add(radio.id)
        if not radio.capabilities:
            raise InvariantViolation("radio capabilities", radio.id)
        host = by_name.get(radio.attached_host)
        if host is None or host.role != Role.SDR:
            raise InvariantViolation("radio host", radio.id)
        try:
            iface = host.interface(radio.interface)
        except KeyError:
            raise InvariantViolation("radio interface", radio.id) from None
        if iface.kind != InterfaceKind.ETHERNET:
            raise InvariantViolation("radio interface", radio.id)
        key = (host.name, iface.name)
        if key in uplinks:
            raise InvariantViolation("radio uplink uniqueness", f"{radio.id} and {uplinks[key]}")
        uplinks[key] = radio.id

    if len(set(tb.cloud_regions)) != len(tb.cloud_regions):
        raise InvariantViolation("cloud region uniqueness")


# -- serialization ---------------------------------------------------------


def _iface_dict(iface):
    d = {"name": iface.name, "kind": iface.kind.value, "mac": iface.mac}
    if iface.switch_port is not None:
        d["switch_port"] = iface.switch_port
    return d


def _host_dict(host, with_role=True):
    d = {"name": host.name}
    if with_role:
        d["role"] = host.role.value
    d["interfaces"] = [_iface_dict(i) for i in host.interfaces]
    if host.engine_port != DEFAULT_ENGINE_PORT:
        d["engine_port"] = host.engine_port
    return d


def testbed_to_dict(tb):
    return {
        "public_ip": tb.public_ip,
        "vpn_ports": {"control": tb.control_vpn_udp_port, "workload": tb.workload_vpn_udp_port},
        "control_subnet": tb.control_subnet,
        "vpn_subnets": {"control": tb.control_vpn_subnet, "workload": tb.workload_vpn_subnet},
        "switch": {
            "ports": tb.switch.port_count,
            "mgmt_port": tb.switch.mgmt_port,
            "mgmt_vlan": tb.switch.mgmt_vlan_id,
            "vlan_range": list(tb.switch.vlan_id_range),
        },
        "hosts": [_host_dict(h) for h in tb.hosts if h.role not in GATEWAY_ROLES],
        "gateways": {
            "control": _host_dict(tb.gateway(Role.GATEWAY_CONTROL), with_role=False),
            "workload": _host_dict(tb.gateway(Role.GATEWAY_WORKLOAD), with_role=False),
        },
        "radios": [
            {"id": r.id, "capabilities": sorted(c.value for c in r.capabilities),
             "host": r.attached_host, "interface": r.interface}
            for r in tb.radios
        ],
        "cloud_regions": list(tb.cloud_regions),
    }


def dump_testbed(tb):
    return yaml.safe_dump(testbed_to_dict(tb), sort_keys=False)
