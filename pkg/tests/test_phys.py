import random

import pytest

from labctl.drivers import SwitchClient
from labctl.errors import DriverError, InsufficientRadios, PortConflict, TeardownStatus
from labctl.inventory import Capability
from labctl.phys import LteLink, WifiLink, apply_physical, physical_commands, plan_physical, teardown_physical
from labctl.scenario import validate_against
from oracle import _components, _l2_graph
from support import clients, make_testbed, parse, scenario_doc


@pytest.fixture(scope="module")
def testbed():
    return make_testbed(clients=10, edges=1, wifi_ap=2, lte_pairs=4, wifi_sta=2)


def two_networks(n_front=2, n_back=2, phy="ethernet"):
    members = clients(n_front + n_back)
    return parse({
        "name": "split",
        "networks": {"frontend": {"subnet": "10.1.0.0/24", "members": members[:n_front]},
                     "backend": {"subnet": "10.2.0.0/24", "members": members[n_front:]}},
        "links": [{"client": c, "phy": phy, "network": "frontend" if c in members[:n_front] else "backend"}
                  for c in members],
    })


def test_vlans_follow_network_name_order(testbed):
    plan = plan_physical(two_networks(), testbed)
    lo = testbed.switch.vlan_id_range[0]
    expected = {name: lo + n for n, name in enumerate(sorted(["frontend", "backend"]))}
    assert {k: v.vlan_id for k, v in plan.vlans.assignments.items()} == expected == {"backend": 100, "frontend": 101}


def test_only_feasible_lte_assignment():
    tb = make_testbed(clients=1, edges=0, wifi_ap=0, lte_pairs=1)
    plan = plan_physical(parse(scenario_doc("l", 1, phy="lte", target="none")), tb)
    (lp,) = plan.links
    (enb,) = [r.id for r in tb.radios if Capability.LTE_ENB in r.capabilities]
    (ue,) = [r.id for r in tb.radios if Capability.LTE_UE in r.capabilities]
    assert isinstance(lp.realization, LteLink)
    assert (lp.realization.enb_radio, lp.realization.ue_radio) == (enb, ue)


def test_wifi_clients_share_one_ap(testbed):
    plan = plan_physical(parse(scenario_doc("w", 2, phy="wifi")), testbed)
    reals = [lp.realization for lp in plan.links]
    assert all(isinstance(r, WifiLink) for r in reals)
    assert len({r.ap_radio for r in reals}) == 1 and len({r.ssid for r in reals}) == 1
    assert reals[0].ssid == "w-lan"


def test_wifi_sta_radio_when_no_onboard_wifi():
    tb = make_testbed(clients=2, onboard_wifi=False, wifi_ap=1, lte_pairs=0, wifi_sta=2)
    plan = plan_physical(parse(scenario_doc("s", 2, phy="wifi")), tb)
    stations = [lp.realization.station for lp in plan.links]
    assert not any(lp.realization.onboard for lp in plan.links)
    assert sorted(stations) == sorted(r.id for r in tb.radios if "sta" in r.id)
    assert set(plan.vlans.assignments) == {"lan", "lan/client01", "lan/client02"}


def test_plan_errors():
    tb = make_testbed(clients=2, wifi_ap=0, lte_pairs=0)
    with pytest.raises(InsufficientRadios):
        plan_physical(parse(scenario_doc("x", 1, phy="lte")), tb)
    small = make_testbed(clients=4, wifi_ap=0, lte_pairs=0, vlan_range=(100, 100))
    with pytest.raises(PortConflict):
        plan_physical(two_networks(), small)


def test_two_networks_command_count(testbed, world_factory):
    world = world_factory(testbed)
    d = world.drivers()
    plan = plan_physical(two_networks(), testbed)
    handle = apply_physical(plan, d.switch, d.radio)
    lines = handle.switch_commands
    assert len([l for l in lines if l.startswith("vlan create")]) == 2
    assert len([l for l in lines if " access " in l]) == 4
    assert [("switch", l) for l in lines] == physical_commands(plan)
    d.close()


def test_partial_failure_reports_succeeded(testbed, world_factory):
    world = world_factory(testbed)
    d = world.drivers()
    plan = plan_physical(two_networks(), testbed)
    world.sim.switch_command("vlan create 101")
    before = world.sim.hash()
    with pytest.raises(DriverError) as exc:
        apply_physical(plan, d.switch, d.radio)
    assert exc.value.succeeded == [("switch", "vlan create 100")]
    assert "vlan create 101" in str(exc.value.command)
    teardown_physical(exc.value.handle, d.switch, d.radio)
    assert world.sim.hash() == before
    d.close()


def test_teardown_is_idempotent(testbed, world_factory):
    world = world_factory(testbed)
    d = world.drivers()
    h0 = world.sim.hash()
    handle = apply_physical(plan_physical(parse(scenario_doc("t", 3, phy="lte")), testbed), d.switch, d.radio)
    assert handle.commands
    assert teardown_physical(handle, d.switch, d.radio) == TeardownStatus.DONE
    assert world.sim.hash() == h0
    assert teardown_physical(handle, d.switch, d.radio) == TeardownStatus.ALREADY_TORN_DOWN
    assert world.sim.hash() == h0
    d.close()


def test_switch_client_speaks_protocol(testbed, world_factory):
    world = world_factory(testbed)
    client = SwitchClient(world.switch_server.address)
    assert client.raw("vlan create 130") == ["ok"]
    assert client.vlans()[130] == set()
    with pytest.raises(DriverError):
        client.command("vlan create 130")
    client.command("vlan delete 130")
    client.close()


def random_scenario(testbed, rng):
    n = rng.randint(1, 8)
    members = rng.sample(clients(10), n)
    split = rng.randint(0, n)
    nets = {"a": {"subnet": "10.1.0.0/24", "members": members[:split] + ["edge1"]}}
    if members[split:]:
        nets["b"] = {"subnet": "10.2.0.0/24", "members": members[split:]}
    phys = [rng.choice(["ethernet", "wifi", "lte"]) for _ in members]
    # the inventory has four lte radio pairs
    while phys.count("lte") > 4:
        phys[phys.index("lte")] = "ethernet"
    links = [{"client": c, "phy": phy, "network": "a" if c in members[:split] else "b"}
             for c, phy in zip(members, phys)]
    return parse({"name": f"r{rng.randint(0, 999)}", "networks": nets, "links": links})


@pytest.mark.parametrize("seed", range(25))
def test_apply_teardown_restores_hash_and_segments(testbed, world_factory, seed):
    rng = random.Random(seed)
    sc = random_scenario(testbed, rng)
    assert validate_against(sc, testbed).ok
    world = world_factory(testbed)
    d = world.drivers()
    h0 = world.sim.hash()
    plan = plan_physical(sc, testbed)
    assert plan == plan_physical(sc, testbed)
    assert testbed.switch.mgmt_vlan_id not in plan.vlans.vlan_ids()
    handle = apply_physical(plan, d.switch, d.radio)
    comp = _components(_l2_graph(world.sim.snapshot()))
    domain = {key: comp[("if", key[1], att.iface)] for key, att in plan.attachments.items()}
    for net in sc.networks:
        doms = {domain[(net.name, m)] for m in net.members}
        assert len(doms) == 1, net.name
    if len(sc.networks) == 2:
        a, b = ({domain[(n.name, n.members[0])]} for n in sc.networks)
        assert a != b
    teardown_physical(handle, d.switch, d.radio)
    assert world.sim.hash() == h0
    d.close()
