"""Fixture builders shared by the test modules."""

import itertools
import socket

import yaml

from labctl.inventory import load_testbed
from labctl.scenario import parse_scenario

_macs = itertools.count(1)


def mac():
    n = next(_macs)
    return "02:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}".format(*(n >> s & 0xFF for s in (32, 24, 16, 8, 0)))


def iface(name, kind, port=None):
    out = {"name": name, "kind": kind, "mac": mac()}
    if port is not None:
        out["switch_port"] = port
    return out


def inventory_doc(clients=10, edges=1, wifi_ap=1, lte_pairs=10, wifi_sta=0, client_eth=2,
                  onboard_wifi=True, ports=96, vlan_range=(100, 399), regions=("eu-west", "us-east")):
    """Inventory mapping with ``clientNN`` and ``edgeN`` hosts plus enough
    SDR hosts (six radio uplinks each) for the requested radios."""
    port = itertools.count(1)
    hosts = [{"name": "control", "role": "control", "interfaces": [iface("mgmt0", "management")]}]
    for n in range(1, clients + 1):
        ifs = [iface("mgmt0", "management")]
        ifs += [iface(f"eth{k}", "ethernet", next(port)) for k in range(1, client_eth + 1)]
        if onboard_wifi:
            ifs.append(iface("wlan0", "wifi"))
        hosts.append({"name": f"client{n:02d}", "role": "workload-client", "interfaces": ifs})
    for n in range(1, edges + 1):
        hosts.append({"name": f"edge{n}", "role": "edge-server",
                      "interfaces": [iface("mgmt0", "management"), iface("eth1", "ethernet", next(port))]})
    caps = ["wifi-ap"] * wifi_ap + ["lte-enb", "lte-ue"] * lte_pairs + ["wifi-sta"] * wifi_sta
    radios = []
    per_host = 6
    for h in range(0, len(caps), per_host):
        name = f"sdr{h // per_host + 1}"
        chunk = caps[h:h + per_host]
        ifs = [iface("mgmt0", "management")] + [iface(f"eth{k}", "ethernet", next(port))
                                                 for k in range(1, len(chunk) + 1)]
        hosts.append({"name": name, "role": "sdr-compute", "interfaces": ifs})
        for k, cap in enumerate(chunk, 1):
            radios.append({"id": f"{cap.replace('-', '')}{len(radios) + 1}", "host": name,
                           "interface": f"eth{k}", "capabilities": [cap]})
    gw_port = next(port)
    assert gw_port < ports
    return {
        "public_ip": "203.0.113.10",
        "control_subnet": "172.16.0.0/24",
        "vpn_ports": {"control": 1194, "workload": 1195},
        "cloud_regions": list(regions),
        "switch": {"ports": ports, "mgmt_port": ports, "vlan_range": list(vlan_range)},
        "hosts": hosts,
        "radios": radios,
        "gateways": {
            "control": {"name": "gw-ctl", "interfaces": [iface("mgmt0", "management")]},
            "workload": {"name": "gw-wl", "interfaces": [iface("mgmt0", "management"),
                                                          iface("eth1", "ethernet", gw_port)]},
        },
    }


def make_testbed(**kwargs):
    return load_testbed(yaml.safe_dump(inventory_doc(**kwargs)))


def clients(n):
    return [f"client{k:02d}" for k in range(1, n + 1)]


def scenario_doc(name, n_clients, phy="ethernet", target="edge", cloud_count=2, volumes=False):
    """The demo shape: ``n_clients`` clients on one network with an edge
    server (``target="edge"``), ``cloud_count`` cloud instances
    (``"cloud"``) or nothing else (``"none"``)."""
    members = clients(n_clients)
    if target == "edge":
        members = members + ["edge1"]
    doc = {
        "name": name,
        "networks": {"lan": {"subnet": "192.168.50.0/24", "members": members}},
        "links": [{"client": c, "phy": phy, "network": "lan"} for c in clients(n_clients)],
        "services": {
            "probe": {"image": "demo/probe:1", "command": ["sleep", "20"],
                      "deploy": {"replicas": n_clients, "placement": "workload-client"},
                      "networks": ["lan"], "logging": {"tag": "probe"}},
        },
        "stop": "all-services-exit",
    }
    server = {"image": "demo/server:1", "command": ["sleep", "30"], "networks": ["lan"]}
    if target == "edge":
        server["deploy"] = {"placement": "edge-server"}
    elif target == "cloud":
        server["deploy"] = {"placement": "cloud", "replicas": cloud_count}
        doc["cloud"] = {"region": "eu-west", "count": cloud_count, "network": "lan"}
    if volumes:
        doc["volumes"] = ["results"]
        server["volumes"] = ["results:/data"]
    if target != "none":
        doc["services"]["server"] = server
    return doc


def make_scenario(*args, **kwargs):
    return parse_scenario(yaml.safe_dump(scenario_doc(*args, **kwargs)))


def parse(doc):
    return parse_scenario(yaml.safe_dump(doc))


def run_scenario(world, scenario, sink, output_dir, faults=None, **kwargs):
    """Execute ``scenario`` on a simulated world; returns ``(report, run)``."""
    from labctl.engine import ExperimentRun

    drivers = world.drivers(faults=faults)
    try:
        run = ExperimentRun(scenario, world.testbed, drivers, sink, output_dir=output_dir, **kwargs)
        return run.execute(), run
    finally:
        drivers.close()


def mutating_commands(run):
    """Per stage count of forward driver commands a run issued."""
    counts = {}
    for stage, teardown, _ in run.drivers.ctx.commands:
        if not teardown:
            counts[stage] = counts.get(stage, 0) + 1
    return counts


def send_and_drain(address, chunks):
    """Send raw chunks, half-close and wait for the peer to close.

    The sink may drop the connection mid-stream (malformed frame, bad seq),
    so write or shutdown errors after that point are expected.
    """
    with socket.create_connection(address) as s:
        try:
            for chunk in chunks:
                s.sendall(chunk)
            s.shutdown(socket.SHUT_WR)
            return s.recv(1)
        except OSError:
            return b""
