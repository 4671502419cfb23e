"""Host-to-host reachability over the simulated L2/L3 topology."""

import ipaddress

from ..errors import UnknownHost

HOP_LIMIT = 16
PLANES = (None, "control", "workload")


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb, key=repr)] = min(ra, rb, key=repr)


def _port_segment(state, port):
    vlan = state.port_mode.get(port)
    return ("vlan", vlan) if vlan is not None else ("port", port)


class Topology:
    """L2 broadcast domains plus per-host forwarding tables for one state.

    Build once and query many pairs; the state must not change meanwhile.
    """

    def __init__(self, state):
        self.state = state
        uf = _UnionFind()
        raw = {}
        for host in state.hosts.values():
            for name, (kind, port) in host.interfaces.items():
                if kind == "management":
                    seg = ("control",)
                elif kind == "ethernet":
                    seg = _port_segment(state, port)
                elif kind == "wifi":
                    ssid = state.wifi_assoc.get((host.name, name))
                    seg = ("wifi", ssid) if ssid is not None else ("radio-off", host.name, name)
                else:
                    seg = ("iface", host.name, name)
                raw[(host.name, name)] = seg
        for t in state.tunnels:
            for endpoint in (t.endpoint_a, t.endpoint_b):
                raw[(endpoint[0], t.name)] = ("tunnel", t.name)
        for radio, status in state.radio_state.items():
            port = state.radio_ports.get(radio)
            if port is None or status[0] == "idle":
                continue
            uplink = _port_segment(state, port)
            if status[0] in ("wifi-ap", "wifi-sta"):
                uf.union(uplink, ("wifi", status[1]))
            elif status[0] in ("lte-enb", "lte-ue"):
                uf.union(uplink, ("lte", status[1]))
        self.segment = {key: uf.find(seg) for key, seg in raw.items()}

        self.addresses = {}  # host -> {address}
        self.owner = {}  # (segment, address) -> host
        self.tables = {}  # host -> sorted [(network, via, connected segment or None)]
        for (host, iface), (addr, prefix) in sorted(state.iface_config.items()):
            if (host, iface) not in self.segment:
                continue
            ip = ipaddress.IPv4Address(addr)
            self.addresses.setdefault(host, set()).add(ip)
            self.owner.setdefault((self.segment[(host, iface)], ip), host)
        for host in state.hosts:
            entries = []
            order = 0
            for (h, iface), (addr, prefix) in sorted(state.iface_config.items()):
                if h != host or (h, iface) not in self.segment:
                    continue
                net = ipaddress.IPv4Network(f"{addr}/{prefix}", strict=False)
                entries.append((net, None, self.segment[(h, iface)], 0, order))
                order += 1
            for route in state.route_table.get(host, []):
                via = ipaddress.IPv4Address(route.via) if route.via else None
                entries.append((ipaddress.IPv4Network(route.dest), via, None, 1, order))
                order += 1
            # longest prefix first, connected before static, then insertion order
            entries.sort(key=lambda e: (-e[0].prefixlen, e[3], e[4]))
            self.tables[host] = entries

    def _lookup(self, host, addr):
        for entry in self.tables.get(host, ()):
            if addr in entry[0]:
                return entry
        return None

    def _host_segments(self, host):
        return {seg for (h, i), seg in self.segment.items()
                if h == host and (h, i) in self.state.iface_config}

    def _next_hop(self, host, dst):
        target = dst
        for _ in range(HOP_LIMIT):
            entry = self._lookup(host, target)
            if entry is None:
                return None
            net, via, seg, _, _ = entry
            if via is not None:
                target = via
                continue
            segments = [seg] if seg is not None else sorted(self._host_segments(host), key=repr)
            for s in segments:
                nxt = self.owner.get((s, target))
                if nxt is not None and nxt != host:
                    return nxt
            return None
        return None

    def deliver(self, src, dst):
        """True if a packet from ``src`` addressed to ``dst`` arrives."""
        host = src
        for hops in range(HOP_LIMIT + 1):
            if dst in self.addresses.get(host, ()):
                return True
            if hops > 0 and not self.state.hosts[host].forwarding:
                return False
            nxt = self._next_hop(host, dst)
            if nxt is None:
                return False
            host = nxt
        return False

    def destinations(self, host, plane=None):
        out = []
        for (h, iface), (addr, _) in sorted(self.state.iface_config.items()):
            if h != host or (h, iface) not in self.segment:
                continue
            if plane is not None and _is_control(self.state, h, iface) != (plane == "control"):
                continue
            out.append(ipaddress.IPv4Address(addr))
        return out

    def reachable(self, a, b, plane=None):
        if plane not in PLANES:
            raise ValueError(f"unknown plane {plane!r}")
        for name in (a, b):
            if name not in self.state.hosts:
                raise UnknownHost(name)
        if a == b:
            return True
        return any(self.deliver(a, d) for d in self.destinations(b, plane))


def _is_control(state, host, iface):
    info = state.hosts[host].interfaces.get(iface)
    if info is not None:
        return info[0] == "management"
    return iface == "control-vpn"


def reachable(state, a, b, plane=None):
    """True iff a packet from any configured interface of ``a`` reaches ``b``.

    ``plane="control"`` restricts destinations to ``b``'s control-network
    addresses (management interface or control VPN tunnel); ``"workload"``
    to every other address.  Every host has a management address, so
    isolation questions are only meaningful on the workload plane.
    """
    return Topology(state).reachable(a, b, plane)


def control_reachable(state, a, b):
    return reachable(state, a, b, plane="control")
