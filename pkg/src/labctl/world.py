"""A complete simulated testbed: simulator, switch, engines and mock cloud.

:class:`SimulatedTestbed` boots every service on loopback ephemeral ports and
hands out a :class:`~labctl.drivers.Drivers` bundle per run.
"""

import logging
import threading

from .cloud import CloudClient, MockCloudService
from .drivers import (ContainerEngineClient, Drivers, RunContext, SimClock, SimHostDriver, SimRadioDriver,
                      SwitchClient)
from .errors import UnknownHost
from .inventory import Role
from .iplayer import CONTROL_VPN
from .simnet import Simulator, SwitchServer, serve_engine_api

log = logging.getLogger(__name__)

LOOPBACK = ("127.0.0.1", 0)


class SimulatedTestbed:
    def __init__(self, testbed, unavailable_images=(), cloud_capacity=None, engine_timeout=5.0, engine_retries=1):
        self.testbed = testbed
        self.sim = Simulator(testbed, unavailable_images)
        self.switch_server = SwitchServer(self.sim, LOOPBACK)
        self.cloud = MockCloudService(LOOPBACK, capacity=cloud_capacity,
                                      on_create=self.sim.add_cloud_host, on_terminate=self.sim.remove_cloud_host)
        self.engine_timeout = engine_timeout
        self.engine_retries = engine_retries
        self.phys_lock = threading.Lock()
        self._engines = {}
        self._engines_lock = threading.Lock()

    def engine_address(self, host):
        """Address of ``host``'s engine API, started on first use."""
        with self._engines_lock:
            server = self._engines.get(host)
            if server is None:
                if host not in self.sim.state.hosts:
                    raise UnknownHost(host)
                server = self._engines[host] = serve_engine_api(self.sim, host, LOOPBACK)
            return server.address

    def engine_client(self, host, ctx=None):
        return ContainerEngineClient(host, self.engine_address(host), ctx,
                                     timeout=self.engine_timeout, retries=self.engine_retries)

    def control_unreachable(self):
        """Managed hosts the control host cannot reach over the control plane.

        Cloud instances count once they hold a control VPN address.
        """
        topo = self.sim.topology()
        control = self.testbed.control_host.name
        managed = {h.name for h in self.testbed.hosts}
        managed |= {h for (h, iface) in topo.state.iface_config if iface == CONTROL_VPN}
        return [h for h in sorted(managed) if h != control
                and not topo.reachable(control, h, plane="control")]

    def drivers(self, ctx=None, faults=None):
        ctx = ctx or RunContext(faults=faults)
        return Drivers(
            switch=SwitchClient(self.switch_server.address, ctx),
            radio=SimRadioDriver(self.sim, ctx),
            host=SimHostDriver(self.sim, ctx),
            cloud=CloudClient(self.cloud.address, ctx),
            engine_client=lambda host: self.engine_client(host, ctx),
            clock=SimClock(self.sim, ctx),
            ctx=ctx,
            state_hash=self.sim.hash,
            logs_sent=lambda: self.sim.log_sent,
            phys_lock=self.phys_lock,
            control_check=self.control_unreachable,
        )

    def workload_gateway(self):
        return self.testbed.gateway(Role.GATEWAY_WORKLOAD).name

    def close(self):
        with self._engines_lock:
            for server in self._engines.values():
                server.close()
            self._engines.clear()
        self.sim.close()
        self.switch_server.close()
        self.cloud.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
