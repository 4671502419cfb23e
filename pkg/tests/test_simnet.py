import ipaddress
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labctl.errors import UnknownHost
from labctl.simnet import (Simulator, SwitchSyntaxError, Topology, UnknownPort, VlanInUse, apply_switch_command,
                           inverse_command, pristine_state, reachable, snapshot_hash)
from labctl.simnet.state import Route, Tunnel
from oracle import Oracle
from support import make_testbed


@pytest.fixture(scope="module")
def testbed():
    return make_testbed(clients=5, edges=1, wifi_ap=1, lte_pairs=1, ports=48)


def port_of(tb, host, iface="eth1"):
    return tb.host(host).interface(iface).switch_port


def two_hosts_state(tb, same_vlan):
    state = pristine_state(tb)
    apply_switch_command(state, "vlan create 101")
    apply_switch_command(state, "vlan create 102")
    apply_switch_command(state, f"port {port_of(tb, 'client01')} access 101")
    apply_switch_command(state, f"port {port_of(tb, 'client02')} access {101 if same_vlan else 102}")
    state.iface_config[("client01", "eth1")] = ("10.0.1.1", 24)
    state.iface_config[("client02", "eth1")] = ("10.0.1.2", 24)
    return state


def test_same_vlan_is_reachable(testbed):
    state = two_hosts_state(testbed, same_vlan=True)
    assert reachable(state, "client01", "client02", plane="workload")


def test_different_vlans_are_isolated(testbed):
    state = two_hosts_state(testbed, same_vlan=False)
    assert not reachable(state, "client01", "client02", plane="workload")
    # the shared control network still connects them
    assert reachable(state, "client01", "client02")
    assert reachable(state, "client01", "client02", plane="control")


def test_unknown_host_and_plane(testbed):
    state = pristine_state(testbed)
    with pytest.raises(UnknownHost):
        reachable(state, "client01", "nope")
    with pytest.raises(ValueError):
        reachable(state, "client01", "client02", plane="data")


def test_cloud_peer_through_tunnel_with_route(testbed):
    state = pristine_state(testbed)
    state.hosts["cloud-1"] = type(state.hosts["client01"])("cloud-1", "cloud", {})
    apply_switch_command(state, "vlan create 101")
    for host in ("client01", "gw-wl"):
        apply_switch_command(state, f"port {port_of(testbed, host)} access 101")
    state.iface_config[("client01", "eth1")] = ("192.168.1.1", 24)
    state.iface_config[("gw-wl", "eth1")] = ("192.168.1.254", 24)
    state.tunnels.append(Tunnel("workload-vpn", ("gw-wl", 1195), ("cloud-1", 1195), "10.11.0.0/24"))
    state.iface_config[("gw-wl", "workload-vpn")] = ("10.11.0.254", 24)
    state.iface_config[("cloud-1", "workload-vpn")] = ("10.11.0.1", 24)
    assert not reachable(state, "client01", "cloud-1", plane="workload")
    state.route_table.setdefault("client01", []).append(Route("10.11.0.0/24", "192.168.1.254"))
    state.route_table["cloud-1"] = [Route("192.168.1.0/24", "10.11.0.254")]
    assert reachable(state, "client01", "cloud-1", plane="workload")
    assert reachable(state, "cloud-1", "client01", plane="workload")
    assert Oracle(state).reachable("client01", "cloud-1", plane="workload")


def test_routing_loop_terminates(testbed):
    state = pristine_state(testbed)
    for h in ("gw-wl", "gw-ctl"):
        state.hosts[h].forwarding = True
    state.route_table["client01"] = [Route("10.99.0.0/16", "172.16.0.200")]
    state.route_table["gw-wl"] = [Route("10.99.0.0/16", state.iface_config[("gw-ctl", "mgmt0")][0])]
    state.route_table["gw-ctl"] = [Route("10.99.0.0/16", state.iface_config[("gw-wl", "mgmt0")][0])]
    state.iface_config[("edge1", "eth1")] = ("10.99.0.1", 16)
    assert not reachable(state, "client01", "edge1", plane="workload")


# -- snapshot hash ---------------------------------------------------------


def test_hash_is_deterministic(testbed):
    assert snapshot_hash(pristine_state(testbed)) == snapshot_hash(pristine_state(testbed))


def test_add_then_remove_vlan_restores_hash(testbed):
    state = pristine_state(testbed)
    before = snapshot_hash(state)
    apply_switch_command(state, "vlan create 150")
    assert snapshot_hash(state) != before
    apply_switch_command(state, "vlan delete 150")
    assert snapshot_hash(state) == before


def test_one_route_changes_hash(testbed):
    a, b = pristine_state(testbed), pristine_state(testbed)
    b.route_table["client01"] = [Route("10.0.0.0/8", "172.16.0.9")]
    assert snapshot_hash(a) != snapshot_hash(b)
    # explicit field comparison agrees that exactly one field differs
    diff = [f for f in ("route_table", "iface_config", "vlan_table", "port_mode", "tunnels")
            if getattr(a, f) != getattr(b, f)]
    assert diff == ["route_table"]


def test_clock_and_logs_do_not_affect_hash(testbed):
    state = pristine_state(testbed)
    before = snapshot_hash(state)
    state.clock = 99
    state.switch_log.append("vlan create 1")
    state.engines["client01"].event_log.append({"seq": 1})
    assert snapshot_hash(state) == before


# -- switch protocol ---------------------------------------------------------


def test_switch_protocol_examples(testbed):
    state = pristine_state(testbed)
    assert apply_switch_command(state, "vlan create 101") == ["ok"]
    apply_switch_command(state, "port 5 access 101")
    assert state.port_mode[5] == 101 and 5 in state.vlan_table[101]
    with pytest.raises(UnknownPort):
        apply_switch_command(state, "port 99 access 101")
    with pytest.raises(VlanInUse):
        apply_switch_command(state, "vlan create 101")
    with pytest.raises(SwitchSyntaxError):
        apply_switch_command(state, "vlan frobnicate 3")
    apply_switch_command(state, "vlan create 100")
    listing = apply_switch_command(state, "show vlans")
    ids = [int(line.split()[1]) for line in listing[:-1]]
    assert ids == sorted(ids) and listing[-1] == "."


def _random_commands(state, rng, count):
    ports = [p for p in state.port_mode if p != state.mgmt_port]
    out = []
    for _ in range(count):
        kind = rng.random()
        if kind < 0.35:
            out.append(f"vlan create {rng.randint(100, 110)}")
        elif kind < 0.5:
            out.append(f"vlan delete {rng.randint(100, 110)}")
        elif kind < 0.85:
            out.append(f"port {rng.choice(ports)} access {rng.randint(100, 110)}")
        else:
            out.append(f"port {rng.choice(ports)} clear")
    return out


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), count=st.integers(1, 40))
def test_commands_then_inverses_restore_hash(testbed, seed, count):
    state = pristine_state(testbed)
    before = snapshot_hash(state)
    undo = []
    for line in _random_commands(state, random.Random(seed), count):
        inverse = inverse_command(state, line)
        try:
            apply_switch_command(state, line)
        except Exception:
            continue
        undo.append(inverse)
    for line in reversed(undo):
        apply_switch_command(state, line)
    assert snapshot_hash(state) == before


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), count=st.integers(1, 40))
def test_control_plane_survives_vlan_mutation(testbed, seed, count):
    state = pristine_state(testbed)
    for line in _random_commands(state, random.Random(seed), count):
        try:
            apply_switch_command(state, line)
        except Exception:
            pass
    for host in state.hosts:
        assert reachable(state, "control", host, plane="control")


# -- agreement with the independent oracle -----------------------------------


def random_state(tb, rng):
    """A pristine state perturbed with random VLANs, radios, addresses,
    routes, forwarding hosts and tunnels.  Addresses are unique."""
    state = pristine_state(tb)
    vlans = list(range(100, 100 + rng.randint(1, 4)))
    for v in vlans:
        apply_switch_command(state, f"vlan create {v}")
    for port in state.port_mode:
        if port != state.mgmt_port and rng.random() < 0.7:
            apply_switch_command(state, f"port {port} access {rng.choice(vlans)}")
    ssids = ["s1", "s2"]
    for radio in state.radio_state:
        r = rng.random()
        if r < 0.3:
            state.radio_state[radio] = ("wifi-ap", rng.choice(ssids))
        elif r < 0.6:
            state.radio_state[radio] = ("lte-enb" if "enb" in radio else "lte-ue", "p1")
    for (host, iface), (kind, _) in [((h.name, n), v) for h in state.hosts.values()
                                     for n, v in h.interfaces.items()]:
        if kind == "wifi" and rng.random() < 0.5:
            state.wifi_assoc[(host, iface)] = rng.choice(ssids)
    hosts = sorted(state.hosts)
    if rng.random() < 0.5:
        state.hosts["cloud-1"] = type(state.hosts["control"])("cloud-1", "cloud", {})
        gw = rng.choice(hosts)
        state.tunnels.append(Tunnel("workload-vpn", (gw, 1195), ("cloud-1", 1195), "10.11.0.0/24"))
        hosts.append("cloud-1")
    subnets = [ipaddress.IPv4Network(f"10.{n}.0.0/24") for n in (1, 2, 3)] + \
        [ipaddress.IPv4Network("10.11.0.0/24")]
    pool = {net: list(net.hosts()) for net in subnets}
    for net in pool:
        rng.shuffle(pool[net])
    for host in hosts:
        ifaces = [n for n, (kind, _) in state.hosts[host].interfaces.items() if kind != "management"]
        ifaces += [t.name for t in state.tunnels if host in (t.endpoint_a[0], t.endpoint_b[0])]
        for iface in ifaces:
            if rng.random() < 0.6:
                net = rng.choice(subnets)
                state.iface_config[(host, iface)] = (str(pool[net].pop()), net.prefixlen)
        if rng.random() < 0.3:
            state.hosts[host].forwarding = True
    addrs = [a for a, _ in state.iface_config.values()]
    for host in hosts:
        for _ in range(rng.randint(0, 2)):
            dest = rng.choice(subnets[:3] + [ipaddress.IPv4Network("10.0.0.0/8")])
            if any(r.dest == str(dest) for r in state.route_table.get(host, [])):
                continue
            via = rng.choice(addrs) if rng.random() < 0.9 else None
            state.route_table.setdefault(host, []).append(Route(str(dest), via))
    return state


@pytest.mark.parametrize("seed", range(100))
def test_reachability_agrees_with_oracle(testbed, seed):
    state = random_state(testbed, random.Random(seed))
    assert len(state.hosts) <= 12
    topo, oracle = Topology(state), Oracle(state)
    hosts = sorted(state.hosts)
    disagreements = [(a, b, plane) for a in hosts for b in hosts for plane in (None, "control", "workload")
                     if topo.reachable(a, b, plane) != oracle.reachable(a, b, plane)]
    assert disagreements == []


def consistent_state(tb, rng):
    """Random L2 wiring where every broadcast domain carries exactly one
    subnet, no host forwards and there are no static routes: the setting in
    which reachability has to be symmetric."""
    from oracle import _components, _l2_graph
    state = random_state(tb, rng)
    state.route_table.clear()
    for host in state.hosts.values():
        host.forwarding = False
    comp = _components(_l2_graph(state))
    nets, pools = {}, {}
    for key in sorted(state.iface_config):
        domain = comp.get(("if", *key))
        if key[1] == "mgmt0" or domain is None:
            continue
        if domain not in nets:
            nets[domain] = ipaddress.IPv4Network(f"10.{len(nets) + 20}.0.0/24")
            pools[domain] = iter(nets[domain].hosts())
        state.iface_config[key] = (str(next(pools[domain])), 24)
    return state


@pytest.mark.parametrize("seed", range(30))
def test_workload_reachability_is_symmetric_without_routes(testbed, seed):
    state = consistent_state(testbed, random.Random(seed))
    topo = Topology(state)
    hosts = sorted(state.hosts)
    for a in hosts:
        for b in hosts:
            assert topo.reachable(a, b, "workload") == topo.reachable(b, a, "workload")


def test_simulator_wraps_state(testbed):
    sim = Simulator(testbed)
    h0 = sim.hash()
    sim.switch_command("vlan create 120")
    assert sim.hash() != h0
    sim.switch_command("vlan delete 120")
    assert sim.hash() == h0
    assert sim.advance(3) == 3 and sim.hash() == h0
