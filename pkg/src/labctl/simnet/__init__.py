"""In-memory simulated testbed: switch, host stacks, radios, tunnels, engines."""

from .engine_api import EngineAPI, EngineServer, serve_engine_api
from .reach import HOP_LIMIT, Topology, control_reachable, reachable
from .sim import SimError, Simulator
from .state import EngineState, Route, SimState, Tunnel, canonical, pristine_state, snapshot_hash
from .switch import (SwitchCommandError, SwitchServer, SwitchSyntaxError, UnknownPort, VlanInUse,
                     apply_switch_command, inverse_command)

__all__ = [
    "EngineAPI", "EngineServer", "EngineState", "HOP_LIMIT", "Route", "SimError", "SimState",
    "Simulator", "SwitchCommandError", "SwitchServer", "SwitchSyntaxError", "Topology", "Tunnel",
    "UnknownPort", "VlanInUse", "apply_switch_command", "canonical", "control_reachable",
    "inverse_command", "pristine_state", "reachable", "serve_engine_api", "snapshot_hash",
]
