"""Driver clients used by the layers to act on a (simulated) testbed.

Every command a layer issues passes through :meth:`RunContext.checkpoint`,
which is where aborts are honoured and test faults are injected
(``FAULT_STAGE`` / ``FAULT_CMD_INDEX``).
"""

import http.client
import json
import logging
import os
import socket
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional
from urllib.parse import quote, urlencode

from .errors import Aborted, DriverError, EngineError, ImagePullError, InjectedFault
from .simnet.sim import SimError

log = logging.getLogger(__name__)

FAULT_STAGES = ("phys", "cloud", "ip", "workload", "await")


@dataclass
class FaultInjector:
    stage: Optional[str] = None
    index: int = 0
    fired: bool = False

    @classmethod
    def from_env(cls, env=None):
        env = os.environ if env is None else env
        stage = env.get("FAULT_STAGE") or None
        if stage is None:
            return None
        if stage not in FAULT_STAGES:
            raise ValueError(f"FAULT_STAGE must be one of {', '.join(FAULT_STAGES)}")
        return cls(stage, int(env.get("FAULT_CMD_INDEX", "0") or 0))


@dataclass
class RunContext:
    """Per-run driver state: current stage, abort flag, fault plan, command log."""
    faults: Optional[FaultInjector] = None
    stage: Optional[str] = None
    teardown: bool = False
    commands: list = field(default_factory=list)  # (stage, teardown?, command)
    _abort: threading.Event = field(default_factory=threading.Event)
    _cancelled: bool = False
    _counts: dict = field(default_factory=dict)

    def enter(self, stage, teardown=False):
        self.stage = stage
        self.teardown = teardown

    def request_abort(self):
        self._abort.set()

    @property
    def abort_requested(self):
        return self._abort.is_set()

    def check_abort(self):
        """Raise Aborted once, at the first cancellation point after a request."""
        if self.teardown or self._cancelled or not self._abort.is_set():
            return
        self._cancelled = True
        raise Aborted("run aborted")

    def checkpoint(self, command):
        if not self.teardown:
            self.check_abort()
            f = self.faults
            if f is not None and not f.fired and f.stage == self.stage:
                n = self._counts.get(self.stage, 0)
                self._counts[self.stage] = n + 1
                if n == f.index:
                    f.fired = True
                    raise InjectedFault(command, f"injected fault at {self.stage}[{n}]")
        self.commands.append((self.stage, self.teardown, command))


class SwitchClient:
    """Line-protocol client for the managed switch."""

    def __init__(self, address, ctx=None, timeout=5.0):
        self.address = tuple(address)
        self.ctx = ctx
        self.timeout = timeout
        self._sock = None
        self._rfile = None
        self._lock = threading.Lock()

    def _connect(self):
        if self._sock is None:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
            self._rfile = self._sock.makefile("rb")

    def raw(self, line):
        """Send one line and return the reply lines (data replies without the
        closing ``.``)."""
        with self._lock:
            self._connect()
            self._sock.sendall((line.strip() + "\n").encode())
            first = self._rfile.readline().decode().rstrip("\n")
            if first == "ok" or first.startswith("err "):
                return [first]
            lines = [first]
            while lines[-1] != ".":
                lines.append(self._rfile.readline().decode().rstrip("\n"))
            return lines[:-1]

    def command(self, line):
        if self.ctx is not None:
            self.ctx.checkpoint(("switch", line))
        reply = self.raw(line)
        if reply and reply[0].startswith("err "):
            raise DriverError(line, reply[0])
        return reply

    def vlans(self):
        """Current VLAN table as ``{vlan id: set of ports}`` (no checkpoint)."""
        out = {}
        for line in self.raw("show vlans"):
            _, vid, _, ports = line.split()
            out[int(vid)] = set() if ports == "-" else {int(p) for p in ports.split(",")}
        return out

    def close(self):
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.sendall(b"quit\n")
                except OSError:
                    pass
                self._rfile.close()
                self._sock.close()
                self._sock = None


class SimRadioDriver:
    def __init__(self, sim, ctx=None):
        self.sim = sim
        self.ctx = ctx

    def _call(self, command, fn, *args):
        if self.ctx is not None:
            self.ctx.checkpoint(("radio",) + command)
        try:
            return fn(*args)
        except SimError as exc:
            raise DriverError(command, str(exc)) from exc

    def configure_wifi_ap(self, radio, ssid):
        self._call(("wifi-ap", radio, ssid), self.sim.configure_radio, radio, "wifi-ap", ssid)

    def configure_wifi_sta(self, radio, ssid):
        self._call(("wifi-sta", radio, ssid), self.sim.configure_radio, radio, "wifi-sta", ssid)

    def configure_lte_pair(self, enb, ue, pair_id):
        self._call(("lte-pair", enb, ue, pair_id), self.sim.configure_lte_pair, enb, ue, pair_id)

    def release(self, radio):
        self._call(("release", radio), self.sim.release_radio, radio)

    def associate(self, host, iface, ssid):
        self._call(("associate", host, iface, ssid), self.sim.associate, host, iface, ssid)

    def disassociate(self, host, iface):
        self._call(("disassociate", host, iface), self.sim.disassociate, host, iface)


class SimHostDriver:
    """Host network configuration, accepted directly by the simulator."""

    def __init__(self, sim, ctx=None):
        self.sim = sim
        self.ctx = ctx

    def _call(self, command, fn, *args):
        if self.ctx is not None:
            self.ctx.checkpoint(("host",) + command)
        try:
            return fn(*args)
        except SimError as exc:
            raise DriverError(command, str(exc)) from exc

    def set_address(self, host, iface, address, prefix):
        self._call(("set_address", host, iface, f"{address}/{prefix}"),
                   self.sim.set_address, host, iface, address, prefix)

    def del_address(self, host, iface):
        self._call(("del_address", host, iface), self.sim.del_address, host, iface)

    def add_route(self, host, dest, via):
        self._call(("add_route", host, dest, via), self.sim.add_route, host, dest, via)

    def del_route(self, host, dest, via=None):
        self._call(("del_route", host, dest, via), self.sim.del_route, host, dest, via)

    def open_tunnel(self, tunnel, psk):
        if not psk:
            raise DriverError(("open_tunnel", tunnel.name), "missing pre-shared key")
        self._call(("open_tunnel", tunnel.name), self.sim.open_tunnel, tunnel.name, tunnel.gateway,
                   tunnel.udp_port, list(tunnel.peers), tunnel.subnet)

    def close_tunnel(self, name):
        self._call(("close_tunnel", name), self.sim.close_tunnel, name)


class SimClock:
    """The simulator's logical clock; each advance is a driver command."""

    def __init__(self, sim, ctx=None):
        self.sim = sim
        self.ctx = ctx

    def now(self):
        return self.sim.now()

    def advance(self, ticks=1):
        if self.ctx is not None:
            self.ctx.checkpoint(("clock", "advance", ticks))
        return self.sim.advance(ticks)


class ContainerEngineClient:
    """Client for the container-engine HTTP subset on one host."""

    def __init__(self, host, address, ctx=None, timeout=5.0, retries=1):
        self.host = host
        self.address = tuple(address)
        self.ctx = ctx
        self.timeout = timeout
        self.retries = retries

    def _request(self, method, path, body=None, query=None, check=True):
        if self.ctx is not None and method != "GET":
            self.ctx.checkpoint(("engine", self.host, method, path, query and json.dumps(query, sort_keys=True)))
        elif self.ctx is not None:
            self.ctx.check_abort()
        url = path + (f"?{urlencode(query)}" if query else "")
        data = json.dumps(body).encode() if body is not None else None
        attempts = 1 + (self.retries if method in ("GET", "DELETE") else 0)
        for attempt in range(attempts):
            conn = http.client.HTTPConnection(*self.address, timeout=self.timeout)
            try:
                headers = {"Content-Type": "application/json"} if data is not None else {}
                conn.request(method, url, body=data, headers=headers)
                resp = conn.getresponse()
                raw = resp.read()
                status = resp.status
                break
            except socket.timeout:
                if attempt + 1 == attempts:
                    raise EngineError(self.host, 0, f"timeout on {method} {path}") from None
                log.info("retrying %s %s on %s after timeout", method, path, self.host)
            except OSError as exc:
                raise EngineError(self.host, 0, f"{method} {path}: {exc}") from None
            finally:
                conn.close()
        ctype = resp.getheader("Content-Type") or ""
        if "ndjson" in ctype:
            payload = [json.loads(line) for line in raw.decode().splitlines() if line.strip()]
        else:
            payload = json.loads(raw) if raw else None
        if check and status >= 400:
            message = payload.get("message", "") if isinstance(payload, dict) else str(payload)
            raise EngineError(self.host, status, message)
        return status, payload

    def pull(self, ref):
        """Pull an image; returns True when it was not present before."""
        try:
            _, payload = self._request("POST", "/images/create", query={"fromImage": ref})
        except EngineError as exc:
            if exc.status == 404:
                raise ImagePullError(self.host, exc.status, str(exc)) from None
            raise
        return payload["status"].startswith("Downloaded")

    def remove_image(self, ref):
        self._request("DELETE", f"/images/{quote(ref, safe='')}")

    def images(self):
        return self._request("GET", "/images/json")[1]

    def create_network(self, name, driver="overlay"):
        return self._request("POST", "/networks/create", {"Name": name, "Driver": driver})[1]["Id"]

    def remove_network(self, name):
        self._request("DELETE", f"/networks/{quote(name, safe='')}")

    def networks(self):
        return self._request("GET", "/networks")[1]

    def create_volume(self, name, driver="local", options=None):
        return self._request("POST", "/volumes/create",
                             {"Name": name, "Driver": driver, "DriverOpts": options or {}})[1]

    def remove_volume(self, name):
        self._request("DELETE", f"/volumes/{quote(name, safe='')}")

    def volumes(self):
        return self._request("GET", "/volumes")[1]["Volumes"]

    def create_container(self, spec):
        return self._request("POST", "/containers/create", spec)[1]["Id"]

    def start(self, cid):
        self._request("POST", f"/containers/{cid}/start")

    def stop(self, cid):
        self._request("POST", f"/containers/{cid}/stop")

    def inspect(self, cid):
        return self._request("GET", f"/containers/{cid}/json")[1]

    def remove_container(self, cid):
        self._request("DELETE", f"/containers/{cid}")

    def containers(self, all=True):
        return self._request("GET", "/containers/json", query={"all": "1" if all else "0"})[1]

    def events(self, since=0):
        return self._request("GET", "/events", query={"since": str(since)})[1]


@dataclass
class Drivers:
    """Everything a run needs to act on the testbed."""
    switch: SwitchClient
    radio: SimRadioDriver
    host: SimHostDriver
    cloud: object
    engine_client: Callable  # host name -> ContainerEngineClient
    clock: SimClock
    ctx: RunContext
    state_hash: Callable = lambda: None
    logs_sent: Callable = lambda: 0
    phys_lock: object = field(default_factory=threading.Lock)
    control_check: Optional[Callable] = None  # () -> list of unreachable hosts

    def close(self):
        self.switch.close()
