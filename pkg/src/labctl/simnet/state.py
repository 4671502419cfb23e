"""Simulated testbed state and its canonical digest."""

import copy
import hashlib
import ipaddress
import json
from dataclasses import dataclass, field
from typing import Optional

from ..inventory import GATEWAY_ROLES, InterfaceKind, Role


@dataclass
class SimHost:
    name: str
    role: str
    # iface name -> (kind, switch port or None)
    interfaces: dict
    forwarding: bool = False


@dataclass(frozen=True)
class Route:
    dest: str
    via: Optional[str] = None  # None: directly connected


@dataclass(frozen=True)
class Tunnel:
    name: str
    endpoint_a: tuple  # (host, udp port)
    endpoint_b: tuple
    subnet: str


@dataclass
class Container:
    id: str
    name: str
    image: str
    command: tuple = ()
    env: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    networks: tuple = ()
    mounts: tuple = ()  # ((volume, path), ...)
    log_tag: str = ""
    state: str = "created"  # created -> running -> exited
    exit_code: Optional[int] = None
    stopped: bool = False
    started_at: Optional[int] = None
    exit_after: Optional[tuple] = None  # (code, seconds) for synthetic commands


@dataclass
class EngineState:
    images: set = field(default_factory=set)
    containers: dict = field(default_factory=dict)
    networks: dict = field(default_factory=dict)  # name -> {"id", "driver"}
    volumes: dict = field(default_factory=dict)  # name -> {"driver", "options"}
    event_log: list = field(default_factory=list)
    next_id: int = 1


@dataclass
class SimState:
    hosts: dict
    port_count: int
    mgmt_port: int
    mgmt_vlan: int
    radio_ports: dict
    vlan_table: dict = field(default_factory=dict)  # vlan id -> set of ports
    port_mode: dict = field(default_factory=dict)  # port -> vlan id or None
    iface_config: dict = field(default_factory=dict)  # (host, iface) -> (address, prefix)
    route_table: dict = field(default_factory=dict)  # host -> [Route]
    tunnels: list = field(default_factory=list)
    radio_state: dict = field(default_factory=dict)  # radio -> ("idle",) | ("wifi-ap", ssid) | ...
    wifi_assoc: dict = field(default_factory=dict)  # (host, iface) -> ssid
    engines: dict = field(default_factory=dict)
    clock: int = 0
    switch_log: list = field(default_factory=list)

    def copy(self):
        return copy.deepcopy(self)

    def tunnel_interfaces(self):
        """(host, iface) pairs created by open tunnels."""
        out = set()
        for t in self.tunnels:
            out.add((t.endpoint_a[0], t.name))
            out.add((t.endpoint_b[0], t.name))
        return out


def pristine_state(testbed):
    """Initial simulator state for a testbed: control network addressed,
    workload network unaddressed, every radio idle."""
    hosts = {}
    for h in testbed.hosts:
        hosts[h.name] = SimHost(
            name=h.name,
            role=h.role.value,
            interfaces={i.name: (i.kind.value, i.switch_port) for i in h.interfaces},
            forwarding=h.role in GATEWAY_ROLES,
        )
    sw = testbed.switch
    state = SimState(
        hosts=hosts,
        port_count=sw.port_count,
        mgmt_port=sw.mgmt_port,
        mgmt_vlan=sw.mgmt_vlan_id,
        radio_ports={r.id: testbed.radio_port(r.id) for r in testbed.radios},
    )
    state.vlan_table[sw.mgmt_vlan_id] = {sw.mgmt_port}
    for port in range(1, sw.port_count + 1):
        state.port_mode[port] = None
    state.port_mode[sw.mgmt_port] = sw.mgmt_vlan_id

    control = ipaddress.IPv4Network(testbed.control_subnet)
    usable = list(control.hosts())
    mgmt_addr = {}
    for n, name in enumerate(sorted(hosts)):
        iface = testbed.host(name).management
        addr = str(usable[n])
        state.iface_config[(name, iface.name)] = (addr, control.prefixlen)
        mgmt_addr[name] = addr
    ctl_gw = testbed.gateway(Role.GATEWAY_CONTROL).name
    for name in sorted(hosts):
        if name != ctl_gw:
            state.route_table[name] = [Route(testbed.control_vpn_subnet, mgmt_addr[ctl_gw])]

    for radio in testbed.radios:
        state.radio_state[radio.id] = ("idle",)
    for h in testbed.hosts:
        if h.role in (Role.CLIENT, Role.EDGE):
            state.engines[h.name] = EngineState()
    return state


def interface_kind(state, host, iface):
    info = state.hosts[host].interfaces.get(iface)
    if info is not None:
        return info[0]
    if (host, iface) in state.tunnel_interfaces():
        return "tunnel"
    return None


# -- canonical digest --------------------------------------------------------


def _container_canon(c):
    return {
        "id": c.id, "name": c.name, "image": c.image, "command": list(c.command),
        "env": sorted(c.env.items()), "labels": sorted(c.labels.items()),
        "networks": sorted(c.networks), "mounts": sorted(list(m) for m in c.mounts),
        "log_tag": c.log_tag, "state": c.state, "exit_code": c.exit_code, "stopped": c.stopped,
    }


def canonical(state):
    """Order-independent rendering of every configuration field.

    The logical clock, id counters and the append-only audit logs are not
    configuration and are left out.
    """
    return {
        "hosts": sorted(
            [h.name, h.role, h.forwarding, sorted([k, v[0], v[1]] for k, v in h.interfaces.items())]
            for h in state.hosts.values()
        ),
        "switch": [state.port_count, state.mgmt_port, state.mgmt_vlan],
        "radio_ports": sorted(state.radio_ports.items()),
        "vlan_table": sorted([v, sorted(p)] for v, p in state.vlan_table.items()),
        "port_mode": sorted([p, v] for p, v in state.port_mode.items()),
        "iface_config": sorted([h, i, a, p] for (h, i), (a, p) in state.iface_config.items()),
        "route_table": sorted([h, [[r.dest, r.via] for r in routes]]
                              for h, routes in state.route_table.items() if routes),
        "tunnels": sorted([t.name, list(t.endpoint_a), list(t.endpoint_b), t.subnet] for t in state.tunnels),
        "radio_state": sorted([r, list(s)] for r, s in state.radio_state.items()),
        "wifi_assoc": sorted([h, i, s] for (h, i), s in state.wifi_assoc.items()),
        "engines": sorted(
            [host, {
                "images": sorted(e.images),
                "containers": sorted((_container_canon(c) for c in e.containers.values()),
                                     key=lambda c: c["id"]),
                "networks": sorted([n, v["id"], v["driver"]] for n, v in e.networks.items()),
                "volumes": sorted([n, v["driver"], sorted(v["options"].items())] for n, v in e.volumes.items()),
            }]
            for host, e in state.engines.items()
        ),
    }


def snapshot_hash(state):
    blob = json.dumps(canonical(state), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
