"""Managed-switch line protocol: command semantics and a TCP front end.

Grammar (one command per LF-terminated UTF-8 line)::

    vlan create <id> | vlan delete <id>
    port <n> access <id> | port <n> clear
    show vlans | show ports

Replies are ``ok``, ``err <code> <message>`` or data lines closed by ``.``.
"""

import logging
import socketserver
import threading

from ..errors import BindError, LabError

log = logging.getLogger(__name__)


class SwitchCommandError(LabError):
    code = "error"

    def __init__(self, message):
        self.message = message
        super().__init__(f"{self.code} {message}")


class SwitchSyntaxError(SwitchCommandError):
    code = "syntax"


class UnknownPort(SwitchCommandError):
    code = "unknown-port"


class UnknownVlan(SwitchCommandError):
    code = "unknown-vlan"


class VlanInUse(SwitchCommandError):
    code = "vlan-in-use"


class VlanBusy(SwitchCommandError):
    code = "vlan-busy"


class PortInUse(SwitchCommandError):
    code = "port-in-use"


class Reserved(SwitchCommandError):
    code = "reserved"


def _vlan_id(token):
    if not token.isdigit() or not 1 <= int(token) <= 4094:
        raise SwitchSyntaxError(f"bad vlan id {token!r}")
    return int(token)


def _port(state, token):
    if not token.isdigit():
        raise SwitchSyntaxError(f"bad port {token!r}")
    port = int(token)
    if port not in state.port_mode:
        raise UnknownPort(f"no port {port}")
    return port


def apply_switch_command(state, line):
    """Apply one protocol line to ``state`` in place and return reply lines.

    Raises a :class:`SwitchCommandError` subclass on rejection; the state is
    untouched in that case.
    """
    words = line.strip().split()
    if words == ["show", "vlans"]:
        out = []
        for vid in sorted(state.vlan_table):
            ports = sorted(state.vlan_table[vid])
            out.append(f"vlan {vid} ports {','.join(map(str, ports)) or '-'}")
        return out + ["."]
    if words == ["show", "ports"]:
        out = []
        for port in sorted(state.port_mode):
            vid = state.port_mode[port]
            out.append(f"port {port} access {vid}" if vid is not None else f"port {port} unassigned")
        return out + ["."]

    if len(words) == 3 and words[0] == "vlan" and words[1] in ("create", "delete"):
        vid = _vlan_id(words[2])
        if words[1] == "create":
            if vid in state.vlan_table:
                raise VlanInUse(f"vlan {vid} exists")
            state.vlan_table[vid] = set()
        else:
            if vid == state.mgmt_vlan:
                raise Reserved(f"vlan {vid} is the management vlan")
            if vid not in state.vlan_table:
                raise UnknownVlan(f"no vlan {vid}")
            if state.vlan_table[vid]:
                raise VlanBusy(f"vlan {vid} still has ports")
            del state.vlan_table[vid]
    elif len(words) == 4 and words[0] == "port" and words[2] == "access":
        port = _port(state, words[1])
        vid = _vlan_id(words[3])
        if port == state.mgmt_port or vid == state.mgmt_vlan:
            raise Reserved("management port/vlan is exclusive")
        if vid not in state.vlan_table:
            raise UnknownVlan(f"no vlan {vid}")
        if state.port_mode[port] is not None:
            raise PortInUse(f"port {port} is in vlan {state.port_mode[port]}")
        state.port_mode[port] = vid
        state.vlan_table[vid].add(port)
    elif len(words) == 3 and words[0] == "port" and words[2] == "clear":
        port = _port(state, words[1])
        if port == state.mgmt_port:
            raise Reserved("management port is exclusive")
        vid = state.port_mode[port]
        if vid is not None:
            state.vlan_table[vid].discard(port)
            state.port_mode[port] = None
    else:
        raise SwitchSyntaxError(f"unrecognised command {line.strip()!r}")
    state.switch_log.append(line.strip())
    return ["ok"]


def inverse_command(state, line):
    """Command undoing ``line`` when applied right after it on ``state``
    (evaluated before ``line`` runs)."""
    words = line.strip().split()
    if words[:2] == ["vlan", "create"]:
        return f"vlan delete {words[2]}"
    if words[:2] == ["vlan", "delete"]:
        return f"vlan create {words[2]}"
    if words[0] == "port" and words[2] == "access":
        return f"port {words[1]} clear"
    if words[0] == "port" and words[2] == "clear":
        prev = state.port_mode.get(int(words[1]))
        return f"port {words[1]} access {prev}" if prev is not None else f"port {words[1]} clear"
    return None


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        sim = self.server.sim
        for raw in self.rfile:
            line = raw.decode("utf-8", "replace").strip()
            if not line:
                continue
            if line == "quit":
                break
            try:
                reply = sim.switch_command(line)
            except SwitchCommandError as exc:
                reply = [f"err {exc.code} {exc.message}"]
            self.wfile.write(("\n".join(reply) + "\n").encode())
            self.wfile.flush()


class SwitchServer(socketserver.ThreadingTCPServer):
    """TCP listener speaking the switch protocol against a Simulator."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, sim, bind=("127.0.0.1", 0)):
        self.sim = sim
        try:
            super().__init__(bind, _Handler)
        except OSError as exc:
            raise BindError(f"switch server cannot bind {bind}: {exc}") from exc
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.02},
                                        name="switch-server", daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self.server_address[:2]

    def close(self):
        self.shutdown()
        self.server_close()
