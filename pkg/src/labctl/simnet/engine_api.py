"""Container-engine HTTP subset served per simulated host.

Endpoints::

    POST   /images/create?fromImage=<ref>     GET /images/json     DELETE /images/<ref>
    POST   /containers/create                  GET /containers/json[?all=1]
    POST   /containers/<id>/start              POST /containers/<id>/stop
    GET    /containers/<id>/json               DELETE /containers/<id>
    POST   /networks/create   GET /networks    DELETE /networks/<name>
    POST   /volumes/create    GET /volumes     DELETE /volumes/<name>
    GET    /events[?since=<seq>]               (NDJSON)

Create bodies are JSON objects mirroring a service definition:
``name, image, command, env, labels, networks, mounts, log_tag``.
"""

import hashlib
import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlsplit

from ..errors import BindError, UnknownHost
from .state import Container

log = logging.getLogger(__name__)

_EXIT_RE = re.compile(r"\bexit\s+(-?\d+)\s+after\s+(\d+)\b")
STOP_EXIT_CODE = 137
FORWARDER_ROLE = "log-forwarder"


def exit_schedule(command):
    """Synthetic workload semantics: ``(exit code, seconds)`` or None to run
    until stopped."""
    text = " ".join(command)
    m = _EXIT_RE.search(text)
    if m:
        return int(m.group(1)), int(m.group(2))
    if len(command) == 2 and command[0] == "sleep" and command[1].isdigit():
        return 0, int(command[1])
    if command and command[0] == "echo":
        return 0, 0
    return None


def _container_json(c):
    return {
        "Id": c.id,
        "Name": c.name,
        "Image": c.image,
        "State": {"Status": c.state, "ExitCode": c.exit_code, "Stopped": c.stopped,
                  "StartedAt": c.started_at},
        "Config": {"Cmd": list(c.command), "Env": dict(c.env), "Labels": dict(c.labels),
                   "LogTag": c.log_tag},
        "Networks": list(c.networks),
        "Mounts": [{"Name": v, "Destination": p} for v, p in c.mounts],
    }


class EngineAPI:
    """Engine semantics for one host; every call runs under the simulator lock."""

    def __init__(self, sim, host):
        self.sim = sim
        self.host = host

    def _engine(self):
        return self.sim.state.engines.get(self.host)

    def _record(self, engine, method, path, action, target, status):
        engine.event_log.append({
            "seq": len(engine.event_log) + 1,
            "time": self.sim.state.clock,
            "method": method,
            "path": path,
            "action": action,
            "id": target,
            "status": status,
        })

    def _find(self, engine, ref):
        if ref in engine.containers:
            return engine.containers[ref]
        for c in engine.containers.values():
            if c.name == ref:
                return c
        return None

    def handle(self, method, path, query=None, body=None):
        """Return ``(status, payload)``; payload is JSON-serializable or None."""
        query = query or {}
        with self.sim.lock:
            engine = self._engine()
            if engine is None:
                return 503, {"message": f"engine on {self.host} is not running"}
            status, payload, action, target = self._dispatch(engine, method, path, query, body or {})
            if not (method == "GET"):
                self._record(engine, method, path, action, target, status)
            return status, payload

    def _dispatch(self, engine, method, path, query, body):
        parts = [unquote(p) for p in path.strip("/").split("/")]
        if parts == ["images", "create"] and method == "POST":
            ref = query.get("fromImage", "")
            if not ref:
                return 400, {"message": "fromImage required"}, "image.pull", ref
            if not self.sim.image_available(ref):
                return 404, {"message": f"pull access denied for {ref}: no such image"}, "image.pull", ref
            if ref in engine.images:
                return 200, {"status": f"Image is up to date for {ref}"}, "image.pull", ref
            engine.images.add(ref)
            return 200, {"status": f"Downloaded newer image for {ref}"}, "image.pull", ref
        if parts == ["images", "json"] and method == "GET":
            return 200, sorted(engine.images), None, None
        if len(parts) >= 2 and parts[0] == "images" and method == "DELETE":
            ref = "/".join(parts[1:])
            if ref not in engine.images:
                return 404, {"message": f"no such image: {ref}"}, "image.delete", ref
            if any(c.image == ref for c in engine.containers.values()):
                return 409, {"message": f"image {ref} is in use"}, "image.delete", ref
            engine.images.discard(ref)
            return 200, [{"Untagged": ref}], "image.delete", ref

        if parts == ["containers", "create"] and method == "POST":
            return self._create(engine, body)
        if parts == ["containers", "json"] and method == "GET":
            show_all = query.get("all") in ("1", "true")
            items = [_container_json(c) for c in sorted(engine.containers.values(), key=lambda c: c.id)
                     if show_all or c.state == "running"]
            return 200, items, None, None
        if len(parts) == 3 and parts[0] == "containers":
            c = self._find(engine, parts[1])
            action = f"container.{parts[2]}"
            if c is None:
                return 404, {"message": f"no such container: {parts[1]}"}, action, parts[1]
            if parts[2] == "start" and method == "POST":
                if c.state == "running":
                    return 304, None, action, c.id
                if c.state != "created":
                    return 409, {"message": f"container {c.id} has exited"}, action, c.id
                self.sim.start_container(self.host, c)
                return 204, None, action, c.id
            if parts[2] == "stop" and method == "POST":
                if c.state != "running":
                    return 304, None, action, c.id
                self.sim.finish_container(self.host, c, STOP_EXIT_CODE, stopped=True)
                return 204, None, action, c.id
            if parts[2] == "json" and method == "GET":
                return 200, _container_json(c), None, None
        if len(parts) == 2 and parts[0] == "containers" and method == "DELETE":
            c = self._find(engine, parts[1])
            if c is None:
                return 404, {"message": f"no such container: {parts[1]}"}, "container.destroy", parts[1]
            if c.state == "running":
                return 409, {"message": f"container {c.id} is running"}, "container.destroy", c.id
            del engine.containers[c.id]
            return 204, None, "container.destroy", c.id

        if parts == ["networks", "create"] and method == "POST":
            name = str(body.get("Name", ""))
            if not name:
                return 400, {"message": "Name required"}, "network.create", name
            if name in engine.networks:
                return 409, {"message": f"network {name} already exists"}, "network.create", name
            net_id = self._new_id(engine)
            engine.networks[name] = {"id": net_id, "driver": str(body.get("Driver", "overlay"))}
            return 201, {"Id": net_id}, "network.create", name
        if parts == ["networks"] and method == "GET":
            return 200, [{"Name": n, "Id": v["id"], "Driver": v["driver"]}
                         for n, v in sorted(engine.networks.items())], None, None
        if len(parts) == 2 and parts[0] == "networks" and method == "DELETE":
            name = self._network_name(engine, parts[1])
            if name is None:
                return 404, {"message": f"no such network: {parts[1]}"}, "network.destroy", parts[1]
            if any(name in c.networks for c in engine.containers.values()):
                return 409, {"message": f"network {name} has attached containers"}, "network.destroy", name
            del engine.networks[name]
            return 204, None, "network.destroy", name

        if parts == ["volumes", "create"] and method == "POST":
            name = str(body.get("Name", ""))
            if not name:
                return 400, {"message": "Name required"}, "volume.create", name
            if name in engine.volumes:
                return 409, {"message": f"volume {name} already exists"}, "volume.create", name
            engine.volumes[name] = {"driver": str(body.get("Driver", "local")),
                                    "options": {str(k): str(v) for k, v in (body.get("DriverOpts") or {}).items()}}
            return 201, {"Name": name, **engine.volumes[name]}, "volume.create", name
        if parts == ["volumes"] and method == "GET":
            return 200, {"Volumes": [{"Name": n, "Driver": v["driver"], "Options": v["options"]}
                                     for n, v in sorted(engine.volumes.items())]}, None, None
        if len(parts) == 2 and parts[0] == "volumes" and method == "DELETE":
            name = parts[1]
            if name not in engine.volumes:
                return 404, {"message": f"no such volume: {name}"}, "volume.destroy", name
            if any(name == v for c in engine.containers.values() for v, _ in c.mounts):
                return 409, {"message": f"volume {name} is in use"}, "volume.destroy", name
            del engine.volumes[name]
            return 204, None, "volume.destroy", name

        if parts == ["events"] and method == "GET":
            since = int(query.get("since", "0") or 0)
            return 200, [e for e in engine.event_log if e["seq"] > since], None, None
        return 404, {"message": f"page not found: {method} {path}"}, "unknown", path

    def _new_id(self, engine):
        n = engine.next_id
        engine.next_id += 1
        return hashlib.sha256(f"{self.host}:{n}".encode()).hexdigest()[:12]

    def _network_name(self, engine, ref):
        if ref in engine.networks:
            return ref
        for name, v in engine.networks.items():
            if v["id"] == ref:
                return name
        return None

    def _create(self, engine, body):
        image = str(body.get("image", ""))
        name = str(body.get("name", ""))
        if image not in engine.images:
            return 404, {"message": f"no such image: {image}"}, "container.create", name
        networks = tuple(str(n) for n in body.get("networks", []))
        for net in networks:
            if net not in engine.networks:
                return 404, {"message": f"no such network: {net}"}, "container.create", name
        mounts = tuple((str(m["volume"]), str(m["path"])) for m in body.get("mounts", []))
        for vol, _ in mounts:
            if vol not in engine.volumes:
                return 404, {"message": f"no such volume: {vol}"}, "container.create", name
        if name and any(c.name == name for c in engine.containers.values()):
            return 409, {"message": f"container name {name} is already in use"}, "container.create", name
        command = tuple(str(a) for a in body.get("command", []))
        cid = self._new_id(engine)
        engine.containers[cid] = Container(
            id=cid,
            name=name or cid,
            image=image,
            command=command,
            env={str(k): str(v) for k, v in (body.get("env") or {}).items()},
            labels={str(k): str(v) for k, v in (body.get("labels") or {}).items()},
            networks=networks,
            mounts=mounts,
            log_tag=str(body.get("log_tag", "")),
            exit_after=exit_schedule(command),
        )
        return 201, {"Id": cid}, "container.create", cid


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _serve(self, method):
        url = urlsplit(self.path)
        query = {k: v[-1] for k, v in parse_qs(url.query).items()}
        body = None
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            try:
                body = json.loads(self.rfile.read(length))
            except ValueError:
                self._reply(400, {"message": "invalid JSON body"})
                return
        status, payload = self.server.api.handle(method, url.path, query, body)
        if url.path.rstrip("/") == "/events" and status == 200:
            data = "".join(json.dumps(e, sort_keys=True) + "\n" for e in payload).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
            return
        self._reply(status, payload)

    def _reply(self, status, payload):
        data = b"" if payload is None or status in (204, 304) else json.dumps(payload).encode()
        self.send_response(status)
        if data:
            self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        if data:
            self.wfile.write(data)

    def do_GET(self):
        self._serve("GET")

    def do_POST(self):
        self._serve("POST")

    def do_DELETE(self):
        self._serve("DELETE")


class EngineServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, sim, host, bind=("127.0.0.1", 0)):
        self.api = EngineAPI(sim, host)
        try:
            super().__init__(bind, _Handler)
        except OSError as exc:
            raise BindError(f"engine API for {host} cannot bind {bind}: {exc}") from exc
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.02},
                                        name=f"engine-{host}", daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self.server_address[:2]

    def close(self):
        self.shutdown()
        self.server_close()


def serve_engine_api(sim, host, bind=("127.0.0.1", 0)):
    """Start an engine API server for ``host``; raises BindError."""
    if host not in sim.state.hosts:
        raise UnknownHost(host)
    return EngineServer(sim, host, bind)
