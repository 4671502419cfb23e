import random

import pytest

from labctl.cloud import (CloudClient, IngressRule, MockCloudService, plan_cloud, provision, terminate_all,
                          with_key)
from labctl.errors import CapacityError, ProviderError, ProviderTeardownErrors, TeardownErrors, TeardownStatus, UnknownRegion
from support import make_scenario, make_testbed, parse, scenario_doc

OPS = ("create_instance", "terminate_instance", "create_key", "delete_key", "create_group", "delete_group")


@pytest.fixture(scope="module")
def testbed():
    return make_testbed(clients=2, wifi_ap=0, lte_pairs=0, regions=("eu-north-1", "eu-west"))


@pytest.fixture
def provider():
    services = []

    def make(**kwargs):
        svc = MockCloudService(**kwargs)
        services.append(svc)
        return svc, CloudClient(svc.address)

    yield make
    for svc in services:
        svc.close()


def cloud_plan(testbed, count=2, region="eu-north-1"):
    doc = scenario_doc("c", 1, target="cloud", cloud_count=count)
    doc["cloud"]["region"] = region
    return plan_cloud(parse(doc), testbed)


def test_no_cloud_no_plan(testbed):
    assert plan_cloud(make_scenario("e", 1), testbed) is None
    doc = scenario_doc("z", 1, target="cloud")
    doc["cloud"]["count"] = 0
    doc["services"]["server"]["deploy"]["placement"] = "workload-client"
    assert plan_cloud(parse(doc), testbed) is None


def test_plan_rules(testbed):
    plan = cloud_plan(testbed)
    assert plan.count == 2 and plan.region == "eu-north-1"
    assert {(r.protocol, r.port) for r in plan.rules} == {("tcp", 22), ("udp", testbed.workload_vpn_udp_port),
                                                         ("tcp", 2375)}


def test_unknown_region(testbed):
    with pytest.raises(UnknownRegion):
        cloud_plan(testbed, region="mars-1")


def test_sequential_ids_and_running(testbed, provider):
    svc, client = provider()
    handle = provision(cloud_plan(testbed), client)
    assert handle.instance_ids == ["i-000001", "i-000002"]
    assert handle.hostnames == ["cloud-1", "cloud-2"]
    assert all(i.state == "running" for i in client.list_instances())
    assert all(i.public_address.startswith("198.51.100.") for i in handle.instances)
    (group,) = client.security_groups()
    assert {(r["protocol"], r["port"]) for r in group["rules"]} == {(r.protocol, r.port) for r in cloud_plan(testbed).rules}


def test_capacity_rolls_back(testbed, provider):
    svc, client = provider(capacity=1)
    with pytest.raises(CapacityError):
        provision(cloud_plan(testbed), client)
    assert svc.active() == []
    assert svc.ledger() == {"instances": [], "keys": [], "groups": []}


def test_terminate_all_and_idempotence(testbed, provider):
    svc, client = provider()
    handle = provision(cloud_plan(testbed), client)
    assert terminate_all(handle, client) == TeardownStatus.DONE
    assert svc.active() == []
    assert terminate_all(handle, client) == TeardownStatus.ALREADY_TORN_DOWN


def test_key_delete_failure_still_terminates(testbed, provider):
    svc, client = provider()
    handle = provision(cloud_plan(testbed), client)
    svc.fail_next("delete_key", 2)  # beats the single retry
    with pytest.raises(ProviderTeardownErrors) as exc:
        terminate_all(handle, client)
    assert isinstance(exc.value, TeardownErrors) and isinstance(exc.value, ProviderError)
    assert svc.active() == []
    assert any("keys" in str(e) for e in exc.value.errors)


def test_transient_failures_are_retried(testbed, provider):
    svc, client = provider()
    handle = provision(cloud_plan(testbed), client)
    for op in ("terminate_instance", "delete_group", "delete_key"):
        svc.fail_next(op, 1)
    terminate_all(handle, client)
    assert svc.ledger() == {"instances": [], "keys": [], "groups": []}


def test_hostnames_reuse_lowest_free(testbed, provider):
    svc, client = provider()
    a = provision(with_key(cloud_plan(testbed, 2), "a"), client)
    b = provision(with_key(cloud_plan(testbed, 1), "b"), client)
    assert b.hostnames == ["cloud-3"]
    terminate_all(a, client)
    c = provision(with_key(cloud_plan(testbed, 2), "c"), client)
    assert c.hostnames == ["cloud-1", "cloud-2"]


def test_simulator_tracks_instances(testbed, world_factory):
    world = world_factory(testbed)
    d = world.drivers()
    h0 = world.sim.hash()
    handle = provision(cloud_plan(testbed), d.cloud)
    assert {"cloud-1", "cloud-2"} <= set(world.sim.state.hosts)
    terminate_all(handle, d.cloud)
    assert world.sim.hash() == h0


@pytest.mark.parametrize("seed", range(40))
def test_ledger_empty_after_random_failures(testbed, provider, seed):
    """Within the retry budget (one transient failure per operation) neither
    a rolled back provision nor a teardown leaves anything behind."""
    rng = random.Random(seed)
    svc, client = provider(capacity=rng.choice([None, 1, 2, 3]))
    for op in rng.sample(OPS, rng.randint(0, len(OPS))):
        svc.fail_next(op, 1)
    try:
        handle = provision(cloud_plan(testbed, rng.randint(1, 3)), client)
    except ProviderError:
        handle = None
    if handle is not None:
        terminate_all(handle, client)
    assert svc.ledger() == {"instances": [], "keys": [], "groups": []}


def test_rollback_beyond_retry_budget_is_logged(testbed, provider, caplog):
    svc, client = provider(capacity=1)
    svc.fail_next("delete_group", 2)
    with pytest.raises(CapacityError):
        provision(cloud_plan(testbed), client)
    assert "rollback incomplete" in caplog.text
    assert svc.active() == [] and svc.ledger()["keys"] == []
    assert len(svc.ledger()["groups"]) == 1


def test_rules_are_exactly_required(testbed):
    plan = cloud_plan(testbed)
    assert len(plan.rules) == 3 and all(isinstance(r, IngressRule) for r in plan.rules)
