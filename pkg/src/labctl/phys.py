"""Physical layer: VLAN topology on the managed switch plus radio links.

Every workload network gets a VLAN.  Links that go through a radio bridge
(wifi station radio or an LTE eNB/UE pair) get an extra VLAN of their own
that holds the client port and the client-side radio uplink, so the radio
is the only path between the client and the network.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import Aborted, DriverError, InsufficientRadios, PortConflict, UnknownHost
from .handles import LayerHandle, Step, unwind
from .scenario import LinkMode, match_radios, radio_needs, resolve_attachments

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VlanSegment:
    vlan_id: int
    ports: frozenset


@dataclass(frozen=True)
class VlanPlan:
    # segment name -> VlanSegment; networks by name, bridged links as "<net>/<client>"
    assignments: dict

    def vlan_ids(self):
        return sorted(s.vlan_id for s in self.assignments.values())

    def ordered(self):
        return sorted(self.assignments.items(), key=lambda kv: kv[1].vlan_id)


@dataclass(frozen=True)
class EthernetLink:
    port: int
    vlan_id: int


@dataclass(frozen=True)
class WifiLink:
    ap_radio: str
    station: str  # on-board interface name or wifi-sta radio id
    ssid: str
    onboard: bool


@dataclass(frozen=True)
class LteLink:
    enb_radio: str
    ue_radio: str
    bridge_ports: tuple
    pair_id: str


@dataclass(frozen=True)
class LinkPlan:
    link: object  # LinkDef
    realization: Union[EthernetLink, WifiLink, LteLink]


@dataclass(frozen=True)
class PhysPlan:
    scenario: str
    vlans: VlanPlan
    links: tuple
    ap_radios: dict  # network -> radio id
    ssids: dict  # network -> ssid
    attachments: dict = field(compare=False, default_factory=dict)

    def radios(self):
        used = set(self.ap_radios.values())
        for lp in self.links:
            r = lp.realization
            if isinstance(r, WifiLink) and not r.onboard:
                used.add(r.station)
            elif isinstance(r, LteLink):
                used.update((r.enb_radio, r.ue_radio))
        return sorted(used)

    def to_dict(self):
        links = []
        for lp in self.links:
            r = lp.realization
            entry = {"client": lp.link.client, "network": lp.link.network, "phy": lp.link.phy.value}
            if isinstance(r, EthernetLink):
                entry.update(port=r.port, vlan=r.vlan_id)
            elif isinstance(r, WifiLink):
                entry.update(ap_radio=r.ap_radio, station=r.station, ssid=r.ssid, onboard=r.onboard)
            else:
                entry.update(enb_radio=r.enb_radio, ue_radio=r.ue_radio,
                             bridge_ports=list(r.bridge_ports), pair=r.pair_id)
            links.append(entry)
        return {
            "vlans": {name: {"vlan": seg.vlan_id, "ports": sorted(seg.ports)}
                      for name, seg in self.vlans.ordered()},
            "links": links,
            "ap_radios": dict(sorted(self.ap_radios.items())),
        }


def ssid_for(scenario_name, network):
    return f"{scenario_name}-{network}"


def plan_physical(scenario, testbed, exclude_vlans=()):
    """Deterministic VLAN and radio plan.

    VLAN ids are handed out densely from the bottom of the range: networks
    first in name order, then bridged link segments.  ``exclude_vlans``
    skips ids already live on the switch (used when runs overlap).
    """
    for member in scenario.members():
        if not testbed.has_host(member):
            raise UnknownHost(member)
    attachments, short = resolve_attachments(scenario, testbed)
    if short:
        raise PortConflict(f"no free interface on {', '.join(short)}")
    assignment, unmatched = match_radios(radio_needs(scenario, attachments), testbed.radios)
    if unmatched:
        raise InsufficientRadios(unmatched[0][1].value)

    excluded = set(exclude_vlans)
    pool = iter(v for v in testbed.switch.workload_vlan_ids() if v not in excluded)

    def next_vlan():
        try:
            return next(pool)
        except StopIteration:
            raise PortConflict("vlan range exhausted") from None

    net_names = sorted(n.name for n in scenario.networks)
    net_vlan = {name: next_vlan() for name in net_names}
    ports = {name: set() for name in net_names}
    link_vlan, link_ports = {}, {}
    ap_radios = {}
    for name in net_names:
        if ("ap", name) in assignment:
            ap_radios[name] = assignment[("ap", name)]
            ports[name].add(testbed.radio_port(ap_radios[name]))

    for (net, host), att in sorted(attachments.items()):
        if att.mode == LinkMode.ETHERNET:
            ports[net].add(att.port)
        elif att.mode == LinkMode.WIFI_STA:
            seg = f"{net}/{host}"
            link_ports[seg] = {att.port, testbed.radio_port(assignment[("sta", net, host)])}
        elif att.mode == LinkMode.LTE:
            ports[net].add(testbed.radio_port(assignment[("enb", net, host)]))
            seg = f"{net}/{host}"
            link_ports[seg] = {att.port, testbed.radio_port(assignment[("ue", net, host)])}
    for seg in sorted(link_ports):
        link_vlan[seg] = next_vlan()

    segments = {name: VlanSegment(net_vlan[name], frozenset(ports[name])) for name in net_names}
    segments.update({seg: VlanSegment(link_vlan[seg], frozenset(link_ports[seg])) for seg in link_ports})
    seen = {}
    for name, seg in segments.items():
        for port in seg.ports:
            if port is None or port == testbed.switch.mgmt_port:
                raise PortConflict(f"segment {name} needs the management port")
            if port in seen:
                raise PortConflict(f"port {port} wanted by {seen[port]} and {name}")
            seen[port] = name

    ssids = {net: ssid_for(scenario.name, net) for net in ap_radios}
    links = []
    for link in scenario.links:
        att = attachments[(link.network, link.client)]
        if att.mode == LinkMode.ETHERNET:
            real = EthernetLink(att.port, net_vlan[link.network])
        elif att.mode == LinkMode.WIFI_ONBOARD:
            real = WifiLink(ap_radios[link.network], att.iface, ssids[link.network], True)
        elif att.mode == LinkMode.WIFI_STA:
            real = WifiLink(ap_radios[link.network], assignment[("sta", link.network, link.client)],
                            ssids[link.network], False)
        else:
            enb = assignment[("enb", link.network, link.client)]
            ue = assignment[("ue", link.network, link.client)]
            real = LteLink(enb, ue, (testbed.radio_port(enb), testbed.radio_port(ue)),
                           f"{scenario.name}:{link.network}:{link.client}")
        links.append(LinkPlan(link, real))
    return PhysPlan(scenario.name, VlanPlan(segments), tuple(links), ap_radios, ssids, attachments)


@dataclass
class PhysHandle(LayerHandle):
    plan: Optional[PhysPlan] = None

    @property
    def switch_commands(self):
        return [c[1] for c in self.commands if c[0] == "switch"]

    @property
    def radios(self):
        """Radios configured so far."""
        used = set()
        for c in self.commands:
            if c[0] == "radio" and c[1] in ("wifi-ap", "wifi-sta"):
                used.add(c[2])
            elif c[0] == "radio" and c[1] == "lte-pair":
                used.update(c[2:4])
        return sorted(used)


def _phys_steps(plan):
    """Ordered ``(kind, call, inverse)`` triples for a plan."""
    steps = []
    ordered = plan.vlans.ordered()
    for _, seg in ordered:
        line = f"vlan create {seg.vlan_id}"
        steps.append((("switch", line), ("switch", "command", line),
                      (("switch", "command", f"vlan delete {seg.vlan_id}"),)))
    for _, seg in ordered:
        for port in sorted(seg.ports):
            line = f"port {port} access {seg.vlan_id}"
            steps.append((("switch", line), ("switch", "command", line),
                          (("switch", "command", f"port {port} clear"),)))
    for net in sorted(plan.ap_radios):
        radio, ssid = plan.ap_radios[net], plan.ssids[net]
        steps.append((("radio", "wifi-ap", radio, ssid), ("radio", "configure_wifi_ap", radio, ssid),
                      (("radio", "release", radio),)))
    for lp in sorted(plan.links, key=lambda lp: (lp.link.network, lp.link.client)):
        r = lp.realization
        if isinstance(r, WifiLink) and not r.onboard:
            steps.append((("radio", "wifi-sta", r.station, r.ssid),
                          ("radio", "configure_wifi_sta", r.station, r.ssid),
                          (("radio", "release", r.station),)))
        elif isinstance(r, LteLink):
            steps.append((("radio", "lte-pair", r.enb_radio, r.ue_radio, r.pair_id),
                          ("radio", "configure_lte_pair", r.enb_radio, r.ue_radio, r.pair_id),
                          (("radio", "release", r.ue_radio), ("radio", "release", r.enb_radio))))
    for lp in sorted(plan.links, key=lambda lp: (lp.link.network, lp.link.client)):
        r = lp.realization
        if isinstance(r, WifiLink) and r.onboard:
            host = lp.link.client
            steps.append((("radio", "associate", host, r.station, r.ssid),
                          ("radio", "associate", host, r.station, r.ssid),
                          (("radio", "disassociate", host, r.station),)))
    return steps


def physical_commands(plan):
    """The command sequence :func:`apply_physical` would issue."""
    return [s[0] for s in _phys_steps(plan)]


def apply_physical(plan, switch, radio):
    """Create VLANs, assign ports, configure radios and associate stations.

    On failure the raised error carries ``handle`` (the partial handle) and,
    for driver errors, ``succeeded`` (commands already applied).
    """
    drivers = {"switch": switch, "radio": radio}
    handle = PhysHandle("phys", plan=plan)
    for command, (key, method, *args), inverse in _phys_steps(plan):
        try:
            getattr(drivers[key], method)(*args)
        except (DriverError, Aborted) as exc:
            exc.handle = handle
            if isinstance(exc, DriverError):
                exc.succeeded = list(handle.commands)
            raise
        handle.steps.append(Step(command, inverse))
    log.info("physical layer up: %d vlans, %d radios", len(plan.vlans.assignments), len(plan.radios()))
    return handle


def teardown_physical(handle, switch, radio):
    """Undo an applied (or partially applied) handle in reverse order."""
    return unwind(handle, {"switch": switch, "radio": radio})
