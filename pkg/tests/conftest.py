import pytest

from labctl.logsink import start_sink
from labctl.world import SimulatedTestbed


@pytest.fixture(scope="session", autouse=True)
def _session_psk():
    # module-scoped fixtures run before function-scoped ones
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("VPN_PSK_ID", "test-psk")
        yield


@pytest.fixture(autouse=True)
def _psk(monkeypatch):
    monkeypatch.setenv("VPN_PSK_ID", "test-psk")
    monkeypatch.delenv("FAULT_STAGE", raising=False)
    monkeypatch.delenv("FAULT_CMD_INDEX", raising=False)


@pytest.fixture
def world_factory():
    worlds = []

    def make(testbed, **kwargs):
        w = SimulatedTestbed(testbed, **kwargs)
        worlds.append(w)
        return w

    yield make
    for w in worlds:
        w.close()


@pytest.fixture
def sink(tmp_path):
    s = start_sink(("127.0.0.1", 0), tmp_path / "sink")
    yield s
    s.stop()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
