import json

import pytest

from labctl.drivers import FaultInjector
from labctl.engine import (TERMINAL, RunState, allocate_run_id, allowed_transition, find_runs, load_report,
                           read_events)
from labctl.errors import AlreadyTerminal
from labctl.logsink import start_sink
from labctl.world import SimulatedTestbed
from support import make_scenario, make_testbed, mutating_commands, run_scenario

STAGE_ORDER = ["plan", "phys", "cloud", "ip", "workload", "await", "collect"]


@pytest.fixture(scope="module")
def testbed():
    return make_testbed(clients=5, edges=1, wifi_ap=1, lte_pairs=3)


def test_edge_run_succeeds(testbed, world_factory, sink, tmp_path):
    world = world_factory(testbed)
    report, run = run_scenario(world, make_scenario("edge", 3, phy="wifi"), sink, tmp_path)
    assert report.ok and report.outcome_label == "done"
    assert report.run_id == "edge-0001"
    assert report.initial_hash == report.final_hash
    assert report.applied_stages == ["phys", "ip", "workload"]
    assert report.teardown_stages == ["workload", "ip", "phys"]
    assert report.exit_report["condition_met"] and report.exit_report["elapsed"] == 30
    assert run.state == RunState.DONE
    assert load_report(tmp_path / "edge-0001") == report
    assert "logs/host.edge1.server.log" in report.logs
    assert (tmp_path / "edge-0001" / "logs" / "host.client01.probe.log").exists()
    started = [e.stage for e in run.events if e.event == "start"]
    assert started == ["plan", "phys", "ip", "workload", "await", "collect"]
    assert [e.seq for e in run.events] == list(range(1, len(run.events) + 1))
    assert read_events(tmp_path / "edge-0001") == run.events


def test_cloud_run_unwinds_in_reverse(testbed, world_factory, sink, tmp_path):
    world = world_factory(testbed)
    report, _ = run_scenario(world, make_scenario("cl", 2, target="cloud", volumes=True), sink, tmp_path)
    assert report.ok, report.failure_reason
    assert report.applied_stages == ["phys", "cloud", "ip", "workload"]
    assert report.teardown_stages == report.applied_stages[::-1]
    assert report.initial_hash == report.final_hash
    assert world.cloud.ledger() == {"instances": [], "keys": [], "groups": []}


def test_run_ids_are_sequential(testbed, world_factory, sink, tmp_path):
    world = world_factory(testbed)
    ids = [run_scenario(world, make_scenario("seq", 1), sink, tmp_path)[0].run_id for _ in range(3)]
    assert ids == ["seq-0001", "seq-0002", "seq-0003"]
    assert find_runs(tmp_path) == ids
    (tmp_path / "seq-0007").mkdir()
    assert allocate_run_id(tmp_path, "seq") == "seq-0008"
    assert allocate_run_id(tmp_path, "other") == "other-0001"


@pytest.fixture(scope="module")
def command_counts(testbed, tmp_path_factory):
    """Forward driver commands per stage of a clean cloud run."""
    out = tmp_path_factory.mktemp("counts")
    sink = start_sink(("127.0.0.1", 0), out / "sink")
    with SimulatedTestbed(testbed) as world:
        report, run = run_scenario(world, make_scenario("cnt", 2, phy="lte", target="cloud"), sink, out)
    sink.stop()
    assert report.ok
    return mutating_commands(run)


@pytest.mark.parametrize("stage", ["phys", "cloud", "ip", "workload", "await"])
@pytest.mark.parametrize("where", ["first", "last"])
def test_faults_unwind_applied_layers(testbed, world_factory, sink, tmp_path, command_counts, stage, where):
    index = 0 if where == "first" else command_counts[stage] - 1
    world = world_factory(testbed)
    report, run = run_scenario(world, make_scenario("flt", 2, phy="lte", target="cloud"), sink, tmp_path,
                               faults=FaultInjector(stage, index))
    assert report.outcome_label == f"failed({stage})"
    assert report.teardown_stages == report.applied_stages[::-1]
    assert report.initial_hash == report.final_hash
    assert report.teardown_errors == []
    assert run.state == RunState.FAILED
    # a failing layer pushes its partial handle, except cloud which rolls
    # itself back, and await which owns no resources
    expected = STAGE_ORDER[1:STAGE_ORDER.index(stage) + 1]
    if stage in ("cloud", "await"):
        expected = expected[:-1]
    assert report.applied_stages == expected
    assert run.teardown_stack == []


def test_pull_failure_is_workload_failure(testbed, world_factory, sink, tmp_path):
    world = world_factory(testbed, unavailable_images=("demo/probe:1",))
    report, _ = run_scenario(world, make_scenario("img", 2), sink, tmp_path)
    assert report.outcome_label == "failed(workload)"
    assert "ImagePullError" in report.failure_reason
    assert report.initial_hash == report.final_hash


def test_missing_psk_fails_ip(testbed, world_factory, sink, tmp_path, monkeypatch):
    monkeypatch.delenv("VPN_PSK_ID")
    world = world_factory(testbed)
    report, _ = run_scenario(world, make_scenario("psk", 1, target="cloud"), sink, tmp_path)
    assert report.outcome_label == "failed(ip)"
    assert report.initial_hash == report.final_hash


def test_plan_failure(testbed, world_factory, sink, tmp_path):
    world = world_factory(testbed)
    report, _ = run_scenario(world, make_scenario("big", 5, phy="lte"), sink, tmp_path)
    assert report.outcome_label == "failed(plan)" and report.applied_stages == []


@pytest.mark.parametrize("stage", ["phys", "ip", "workload", "await"])
def test_abort_at_stage(testbed, world_factory, sink, tmp_path, stage):
    def hook(run, st, event):
        if st == stage and event == "start":
            run.abort()

    world = world_factory(testbed)
    report, run = run_scenario(world, make_scenario("abt", 2), sink, tmp_path, on_stage=hook)
    assert report.outcome_label == f"failed({stage})" and report.failure_reason == "aborted"
    assert report.teardown_stages == report.applied_stages[::-1]
    assert report.initial_hash == report.final_hash
    with pytest.raises(AlreadyTerminal):
        run.abort()


def test_abort_during_teardown_is_ignored(testbed, world_factory, sink, tmp_path):
    def hook(run, st, event):
        if event == "teardown-start":
            run.abort()

    world = world_factory(testbed)
    report, _ = run_scenario(world, make_scenario("late", 1), sink, tmp_path, on_stage=hook)
    assert report.ok and report.initial_hash == report.final_hash


def test_await_timeout_reported(testbed, world_factory, sink, tmp_path):
    world = world_factory(testbed)
    report, _ = run_scenario(world, make_scenario("slow", 1), sink, tmp_path, await_timeout=3)
    assert report.exit_report["timed_out"] and report.exit_report["elapsed"] == 3
    assert report.initial_hash == report.final_hash


def test_report_json_is_stable(testbed, world_factory, sink, tmp_path):
    world = world_factory(testbed)
    report, _ = run_scenario(world, make_scenario("js", 1), sink, tmp_path)
    data = json.loads((tmp_path / report.run_id / "report.json").read_text())
    assert data["outcome"] == "done" and data["scenario"] == "js"


def test_state_machine():
    for s in TERMINAL:
        assert not any(allowed_transition(s, d) for d in RunState)
    for s in RunState:
        if s not in TERMINAL:
            assert allowed_transition(s, RunState.TEARING_DOWN)
    assert not allowed_transition(RunState.PENDING, RunState.IP_UP)
    assert allowed_transition(RunState.PHYS_UP, RunState.IP_UP)
