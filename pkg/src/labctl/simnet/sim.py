"""Single owner of the simulated testbed state.

All mutations go through a :class:`Simulator` and are serialized by its
lock; TCP/HTTP front ends call into it from their worker threads.  Readers
that need a consistent view take :meth:`Simulator.snapshot`.
"""

import ipaddress
import logging
import threading

from ..errors import LabError, UnknownHost
from ..logsink import LogForwarder
from .engine_api import FORWARDER_ROLE
from .reach import Topology
from .state import EngineState, Route, SimHost, Tunnel, pristine_state, snapshot_hash
from .switch import apply_switch_command

log = logging.getLogger(__name__)


class SimError(LabError):
    def __init__(self, code, message):
        self.code = code
        super().__init__(f"{code}: {message}")


class Simulator:
    def __init__(self, testbed, unavailable_images=()):
        self.testbed = testbed
        self.state = pristine_state(testbed)
        self.lock = threading.RLock()
        self.unavailable_images = set(unavailable_images)
        self._forwarders = {}  # host -> LogForwarder, not part of the state
        self.log_sent = 0
        self.log_dropped = 0

    # -- queries -----------------------------------------------------------

    def snapshot(self):
        with self.lock:
            return self.state.copy()

    def hash(self):
        with self.lock:
            return snapshot_hash(self.state)

    def reachable(self, a, b, plane=None):
        with self.lock:
            return Topology(self.state).reachable(a, b, plane)

    def topology(self):
        """Topology over a private snapshot, safe to query without the lock."""
        return Topology(self.snapshot())

    def image_available(self, ref):
        return ref not in self.unavailable_images

    def now(self):
        with self.lock:
            return self.state.clock

    # -- switch ------------------------------------------------------------

    def switch_command(self, line):
        with self.lock:
            return apply_switch_command(self.state, line)

    # -- host network stack -----------------------------------------------

    def _iface_exists(self, host, iface):
        if host not in self.state.hosts:
            raise UnknownHost(host)
        return iface in self.state.hosts[host].interfaces or (host, iface) in self.state.tunnel_interfaces()

    def set_address(self, host, iface, address, prefix):
        with self.lock:
            if not self._iface_exists(host, iface):
                raise SimError("no-such-interface", f"{host}/{iface}")
            if (host, iface) in self.state.iface_config:
                raise SimError("address-in-use", f"{host}/{iface} already has an address")
            ipaddress.IPv4Interface(f"{address}/{prefix}")
            self.state.iface_config[(host, iface)] = (str(address), int(prefix))

    def del_address(self, host, iface):
        with self.lock:
            if (host, iface) not in self.state.iface_config:
                raise SimError("no-address", f"{host}/{iface}")
            del self.state.iface_config[(host, iface)]

    def add_route(self, host, dest, via):
        with self.lock:
            if host not in self.state.hosts:
                raise UnknownHost(host)
            route = Route(str(ipaddress.IPv4Network(dest)), via)
            routes = self.state.route_table.setdefault(host, [])
            if any(r.dest == route.dest for r in routes):
                raise SimError("route-exists", f"{host}: {route.dest}")
            routes.append(route)

    def del_route(self, host, dest, via=None):
        with self.lock:
            routes = self.state.route_table.get(host, [])
            for n, r in enumerate(routes):
                if r.dest == dest and (via is None or r.via == via):
                    del routes[n]
                    if not routes:
                        del self.state.route_table[host]
                    return
            raise SimError("no-route", f"{host}: {dest}")

    def open_tunnel(self, name, gateway, udp_port, peers, subnet):
        with self.lock:
            if any(t.name == name for t in self.state.tunnels):
                raise SimError("tunnel-exists", name)
            for host in [gateway, *peers]:
                if host not in self.state.hosts:
                    raise UnknownHost(host)
            for peer in peers:
                self.state.tunnels.append(Tunnel(name, (gateway, udp_port), (peer, udp_port), subnet))

    def close_tunnel(self, name):
        with self.lock:
            tunnels = [t for t in self.state.tunnels if t.name == name]
            if not tunnels:
                raise SimError("no-tunnel", name)
            hosts = {t.endpoint_a[0] for t in tunnels} | {t.endpoint_b[0] for t in tunnels}
            if any((h, name) in self.state.iface_config for h in hosts):
                raise SimError("tunnel-busy", f"{name} still has addresses")
            self.state.tunnels = [t for t in self.state.tunnels if t.name != name]

    # -- radios ------------------------------------------------------------

    def _radio_idle(self, radio):
        if radio not in self.state.radio_state:
            raise SimError("no-such-radio", radio)
        if self.state.radio_state[radio] != ("idle",):
            raise SimError("radio-busy", f"{radio} is {self.state.radio_state[radio][0]}")

    def configure_radio(self, radio, mode, arg):
        with self.lock:
            self._radio_idle(radio)
            self.state.radio_state[radio] = (mode, arg)

    def configure_lte_pair(self, enb, ue, pair_id):
        with self.lock:
            self._radio_idle(enb)
            self._radio_idle(ue)
            self.state.radio_state[enb] = ("lte-enb", pair_id)
            self.state.radio_state[ue] = ("lte-ue", pair_id)

    def release_radio(self, radio):
        with self.lock:
            if radio not in self.state.radio_state:
                raise SimError("no-such-radio", radio)
            self.state.radio_state[radio] = ("idle",)

    def associate(self, host, iface, ssid):
        with self.lock:
            info = self.state.hosts.get(host, SimHost(host, "", {})).interfaces.get(iface)
            if info is None or info[0] != "wifi":
                raise SimError("no-such-interface", f"{host}/{iface} is not a wifi interface")
            if (host, iface) in self.state.wifi_assoc:
                raise SimError("already-associated", f"{host}/{iface}")
            self.state.wifi_assoc[(host, iface)] = ssid

    def disassociate(self, host, iface):
        with self.lock:
            if self.state.wifi_assoc.pop((host, iface), None) is None:
                raise SimError("not-associated", f"{host}/{iface}")

    # -- cloud hosts ------------------------------------------------------

    def add_cloud_host(self, name):
        with self.lock:
            if name in self.state.hosts:
                raise SimError("host-exists", name)
            self.state.hosts[name] = SimHost(name, "cloud", {}, forwarding=False)
            self.state.engines[name] = EngineState()

    def remove_cloud_host(self, name):
        with self.lock:
            host = self.state.hosts.get(name)
            if host is None or host.role != "cloud":
                raise SimError("no-such-host", name)
            del self.state.hosts[name]
            self._close_forwarder(name)
            self.state.engines.pop(name, None)
            self.state.route_table.pop(name, None)
            for key in [k for k in self.state.iface_config if k[0] == name]:
                del self.state.iface_config[key]
            self.state.tunnels = [t for t in self.state.tunnels
                                  if name not in (t.endpoint_a[0], t.endpoint_b[0])]

    # -- containers and logical time --------------------------------------

    def start_container(self, host, c):
        c.state = "running"
        c.started_at = self.state.clock
        if c.labels.get("labctl.role") == FORWARDER_ROLE:
            self._open_forwarder(host, c)
            return
        self.emit(host, c, "start")
        if c.command and c.command[0] == "echo":
            self.emit(host, c, "stdout", " ".join(c.command[1:]))

    def finish_container(self, host, c, code, stopped=False):
        c.state = "exited"
        c.exit_code = code
        c.stopped = stopped
        if c.labels.get("labctl.role") == FORWARDER_ROLE:
            self._close_forwarder(host)
            return
        self.emit(host, c, "exit", str(code))
        engine = self.state.engines[host]
        if not stopped:
            engine.event_log.append({"seq": len(engine.event_log) + 1, "time": self.state.clock,
                                     "method": None, "path": None, "action": "container.die",
                                     "id": c.id, "status": code})

    def _maybe_exit(self, host, c):
        if c.state == "running" and c.exit_after is not None:
            code, seconds = c.exit_after
            if self.state.clock >= c.started_at + seconds:
                self.finish_container(host, c, code)

    def advance(self, ticks=1):
        """Advance the logical clock, exiting containers that are due."""
        with self.lock:
            for _ in range(ticks):
                self.state.clock += 1
                for host in sorted(self.state.engines):
                    engine = self.state.engines[host]
                    for cid in sorted(engine.containers):
                        self._maybe_exit(host, engine.containers[cid])
            return self.state.clock

    # -- log forwarding ----------------------------------------------------

    def _open_forwarder(self, host, c):
        addr = c.env.get("LOG_SINK", "")
        hostpart, _, port = addr.rpartition(":")
        try:
            self._forwarders[host] = LogForwarder((hostpart, int(port)))
        except (OSError, ValueError) as exc:
            log.warning("log forwarder on %s cannot reach %r: %s", host, addr, exc)

    def _close_forwarder(self, host):
        fwd = self._forwarders.pop(host, None)
        if fwd is not None:
            fwd.close()

    def emit(self, host, c, event, message=""):
        fwd = self._forwarders.get(host)
        service = c.labels.get("labctl.service", c.name)
        if fwd is None:
            self.log_dropped += 1
            return
        body = {"container": c.id, "service": service, "event": event,
                "log_tag": c.log_tag, "message": message}
        try:
            fwd.send(f"host.{host}.{service}", body, self.state.clock)
            self.log_sent += 1
        except OSError as exc:
            self.log_dropped += 1
            log.warning("log forwarding from %s failed: %s", host, exc)

    def close(self):
        with self.lock:
            for host in list(self._forwarders):
                self._close_forwarder(host)
