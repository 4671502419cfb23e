"""IP layer: addressing, static routes and the two VPN tunnels."""

import ipaddress
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

from .errors import Aborted, DriverError, SubnetExhausted
from .handles import LayerHandle, Step, unwind
from .inventory import Role

log = logging.getLogger(__name__)

PSK_ENV = "VPN_PSK_ID"
CONTROL_VPN = "control-vpn"
WORKLOAD_VPN = "workload-vpn"


@dataclass(frozen=True)
class TunnelDef:
    name: str
    gateway: str
    public_ip: str
    udp_port: int
    subnet: str
    peers: tuple
    psk_id: str = PSK_ENV


@dataclass(frozen=True)
class IpPlan:
    addresses: dict  # (host, iface) -> (address, prefix)
    routes: dict  # host -> ((dest, via), ...)
    tunnels: tuple = ()

    def to_dict(self):
        return {
            "addresses": [[h, i, f"{a}/{p}"] for (h, i), (a, p) in sorted(self.addresses.items())],
            "routes": {h: [list(r) for r in rs] for h, rs in sorted(self.routes.items())},
            "tunnels": [{"name": t.name, "gateway": t.gateway, "public_ip": t.public_ip, "udp_port": t.udp_port,
                         "subnet": t.subnet, "peers": list(t.peers), "psk_id": t.psk_id} for t in self.tunnels],
        }

    def serialize(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def usable_hosts(subnet):
    return list(ipaddress.IPv4Network(subnet).hosts())


def allocate_network(subnet, members, gateway=None):
    """Members sorted by name get the lowest host addresses; the gateway,
    if any, takes the highest.  Raises SubnetExhausted."""
    usable = usable_hosts(subnet)
    needed = len(set(members)) + (1 if gateway else 0)
    if needed > len(usable):
        raise SubnetExhausted(f"{subnet}: {needed} hosts, {len(usable)} usable addresses")
    out = {m: str(usable[n]) for n, m in enumerate(sorted(set(members)))}
    if gateway:
        out[gateway] = str(usable[-1])
    return out


def plan_ip(scenario, phys_plan, cloud_hosts, testbed):
    """Deterministic addresses, routes and tunnels for a run."""
    attachments = phys_plan.attachments
    cloud_hosts = tuple(sorted(cloud_hosts))
    wl_gw = testbed.gateway(Role.GATEWAY_WORKLOAD).name
    ctl_gw = testbed.gateway(Role.GATEWAY_CONTROL).name
    cloud_net = scenario.cloud.network if cloud_hosts and scenario.cloud else None

    addresses, routes = {}, {}
    gw_addr = {}
    for net in sorted(scenario.networks, key=lambda n: n.name):
        prefix = ipaddress.IPv4Network(net.subnet).prefixlen
        gateway = wl_gw if net.name == cloud_net and wl_gw not in net.members else None
        alloc = allocate_network(net.subnet, net.members, gateway)
        for host, addr in alloc.items():
            addresses[(host, attachments[(net.name, host)].iface)] = (addr, prefix)
        if gateway:
            gw_addr[net.name] = alloc[gateway]
        elif net.name == cloud_net:
            gw_addr[net.name] = alloc[wl_gw]

    tunnels = []
    if cloud_hosts:
        wl_prefix = ipaddress.IPv4Network(testbed.workload_vpn_subnet).prefixlen
        ctl_prefix = ipaddress.IPv4Network(testbed.control_vpn_subnet).prefixlen
        wl = allocate_network(testbed.workload_vpn_subnet, cloud_hosts, wl_gw)
        ctl = allocate_network(testbed.control_vpn_subnet, cloud_hosts, ctl_gw)
        tunnels = [
            TunnelDef(CONTROL_VPN, ctl_gw, testbed.public_ip, testbed.control_vpn_udp_port,
                      testbed.control_vpn_subnet, cloud_hosts),
            TunnelDef(WORKLOAD_VPN, wl_gw, testbed.public_ip, testbed.workload_vpn_udp_port,
                      testbed.workload_vpn_subnet, cloud_hosts),
        ]
        for host, addr in ctl.items():
            addresses[(host, CONTROL_VPN)] = (addr, ctl_prefix)
        for host, addr in wl.items():
            addresses[(host, WORKLOAD_VPN)] = (addr, wl_prefix)
        net = scenario.network(cloud_net)
        for member in sorted(net.members):
            if member != wl_gw:
                routes.setdefault(member, []).append((testbed.workload_vpn_subnet, gw_addr[cloud_net]))
        for host in cloud_hosts:
            routes.setdefault(host, []).append((net.subnet, wl[wl_gw]))
            routes[host].append((testbed.control_subnet, ctl[ctl_gw]))
    return IpPlan(dict(sorted(addresses.items())),
                  {h: tuple(rs) for h, rs in sorted(routes.items())},
                  tuple(tunnels))


@dataclass
class IpHandle(LayerHandle):
    plan: Optional[IpPlan] = None


def _ip_steps(plan, psk):
    steps = []
    for t in plan.tunnels:
        steps.append((("open_tunnel", t.name), ("open_tunnel", t, psk), (("host", "close_tunnel", t.name),)))
    for (host, iface), (addr, prefix) in sorted(plan.addresses.items()):
        steps.append((("set_address", host, iface, f"{addr}/{prefix}"), ("set_address", host, iface, addr, prefix),
                      (("host", "del_address", host, iface),)))
    for host in sorted(plan.routes):
        for dest, via in plan.routes[host]:
            steps.append((("add_route", host, dest, via), ("add_route", host, dest, via),
                          (("host", "del_route", host, dest, via),)))
    return steps


def apply_ip(plan, host_driver, psk=None):
    """Open tunnels, assign addresses, install routes (host-name order).

    The pre-shared key is looked up from ``VPN_PSK_ID`` when not given and
    is only needed when the plan has tunnels.
    """
    if psk is None:
        psk = os.environ.get(PSK_ENV, "")
    handle = IpHandle("ip", plan=plan)
    for command, (method, *args), inverse in _ip_steps(plan, psk):
        try:
            getattr(host_driver, method)(*args)
        except (DriverError, Aborted) as exc:
            exc.handle = handle
            if isinstance(exc, DriverError):
                exc.succeeded = list(handle.commands)
            raise
        handle.steps.append(Step(command, inverse))
    log.info("ip layer up: %d addresses, %d tunnels", len(plan.addresses), len(plan.tunnels))
    return handle


def teardown_ip(handle, host_driver):
    return unwind(handle, {"host": host_driver})
