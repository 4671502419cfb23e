"""Cloud layer: plan, provision and terminate instances through a provider.

The provider is reached over HTTP.  :class:`MockCloudService` is a local
implementation with sequential ids, a configurable capacity and one-shot
failure injection, used by the simulated testbed and the tests.
"""

import http.client
import json
import logging
import threading
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import quote, unquote, urlsplit

from .errors import BindError, CapacityError, LabError, ProviderError, ProviderTeardownErrors, TeardownStatus, UnknownRegion

log = logging.getLogger(__name__)

ENGINE_PORT = 2375
SSH_PORT = 22
PUBLIC_POOL = "198.51.100"


@dataclass(frozen=True)
class IngressRule:
    protocol: str  # tcp | udp
    port: int
    description: str = ""


@dataclass(frozen=True)
class CloudPlan:
    region: str
    count: int
    rules: tuple
    key_name: str
    network: str = ""


@dataclass(frozen=True)
class CloudInstance:
    id: str
    region: str
    public_address: Optional[str]
    state: str  # pending | running | terminated
    hostname: str


@dataclass
class CloudHandle:
    instances: list = field(default_factory=list)
    key_name: Optional[str] = None
    group_id: Optional[str] = None
    terminated: bool = False

    @property
    def hostnames(self):
        return [i.hostname for i in self.instances]

    @property
    def instance_ids(self):
        return [i.id for i in self.instances]


def required_rules(testbed):
    return (
        IngressRule("tcp", SSH_PORT, "ssh"),
        IngressRule("udp", testbed.workload_vpn_udp_port, "workload vpn"),
        IngressRule("tcp", ENGINE_PORT, "container engine"),
    )


def plan_cloud(scenario, testbed):
    """Cloud plan, or None when the scenario needs no instances."""
    cloud = scenario.cloud
    if cloud is None or cloud.count == 0:
        return None
    if cloud.region not in testbed.cloud_regions:
        raise UnknownRegion(cloud.region)
    return CloudPlan(cloud.region, cloud.count, required_rules(testbed), f"labctl-{scenario.name}", cloud.network)


# -- mock provider service -------------------------------------------------


class MockCloudService:
    """In-process HTTP provider with a resource ledger.

    ``on_create(hostname)`` / ``on_terminate(hostname)`` let the simulator
    track instances as hosts.  ``capacity`` caps concurrently active
    instances; ``fail_next(op, times)`` makes the next calls of an operation
    (``create_instance``, ``terminate_instance``, ``create_key``,
    ``delete_key``, ``create_group``, ``delete_group``) fail with 500.
    """

    def __init__(self, bind=("127.0.0.1", 0), capacity=None, on_create=None, on_terminate=None):
        self.capacity = capacity
        self.on_create = on_create
        self.on_terminate = on_terminate
        self.lock = threading.Lock()
        self.instances = {}
        self.keys = set()
        self.groups = {}
        self._next_instance = 1
        self._next_group = 1
        self._failures = {}
        try:
            self._server = ThreadingHTTPServer(tuple(bind), _CloudHandler)
        except OSError as exc:
            raise BindError(f"mock cloud cannot bind {bind}: {exc}") from exc
        self._server.daemon_threads = True
        self._server.service = self
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.02},
                                        name="mock-cloud", daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self._server.server_address[:2]

    def fail_next(self, op, times=1):
        with self.lock:
            self._failures[op] = self._failures.get(op, 0) + times

    def _should_fail(self, op):
        n = self._failures.get(op, 0)
        if n:
            self._failures[op] = n - 1
            return True
        return False

    def active(self):
        with self.lock:
            return [i for i in self.instances.values() if i["state"] != "terminated"]

    def ledger(self):
        """Live resources: ``{"instances", "keys", "groups"}``."""
        with self.lock:
            return {
                "instances": sorted(i["id"] for i in self.instances.values() if i["state"] != "terminated"),
                "keys": sorted(self.keys),
                "groups": sorted(self.groups),
            }

    def handle(self, method, path, body):
        parts = [unquote(p) for p in path.strip("/").split("/")]
        with self.lock:
            if parts == ["instances"] and method == "GET":
                return 200, sorted(self.instances.values(), key=lambda i: i["id"])
            if parts == ["instances"] and method == "POST":
                return self._create_instances(body)
            if len(parts) == 2 and parts[0] == "instances" and method == "DELETE":
                return self._terminate(parts[1])
            if parts == ["keys"] and method == "POST":
                name = str(body.get("name", ""))
                if self._should_fail("create_key"):
                    return 500, {"error": "internal", "message": "key service unavailable"}
                if not name or name in self.keys:
                    return 409, {"error": "conflict", "message": f"key {name!r} exists"}
                self.keys.add(name)
                return 201, {"name": name}
            if len(parts) == 2 and parts[0] == "keys" and method == "DELETE":
                if self._should_fail("delete_key"):
                    return 500, {"error": "internal", "message": "key service unavailable"}
                if parts[1] not in self.keys:
                    return 404, {"error": "not-found", "message": f"no key {parts[1]}"}
                self.keys.discard(parts[1])
                return 200, {"name": parts[1]}
            if parts == ["security-groups"] and method == "POST":
                if self._should_fail("create_group"):
                    return 500, {"error": "internal", "message": "group service unavailable"}
                gid = f"sg-{self._next_group:06d}"
                self._next_group += 1
                rules = [{"protocol": str(r["protocol"]), "port": int(r["port"]),
                          "description": str(r.get("description", ""))} for r in body.get("rules", [])]
                self.groups[gid] = {"id": gid, "name": str(body.get("name", "")), "rules": rules}
                return 201, self.groups[gid]
            if parts == ["security-groups"] and method == "GET":
                return 200, [self.groups[g] for g in sorted(self.groups)]
            if len(parts) == 2 and parts[0] == "security-groups" and method == "DELETE":
                if self._should_fail("delete_group"):
                    return 500, {"error": "internal", "message": "group service unavailable"}
                if parts[1] not in self.groups:
                    return 404, {"error": "not-found", "message": f"no group {parts[1]}"}
                if any(i["group"] == parts[1] and i["state"] != "terminated" for i in self.instances.values()):
                    return 409, {"error": "in-use", "message": f"group {parts[1]} has instances"}
                del self.groups[parts[1]]
                return 200, {"id": parts[1]}
        return 404, {"error": "not-found", "message": f"{method} {path}"}

    def _create_instances(self, body):
        count = int(body.get("count", 1))
        active = [i for i in self.instances.values() if i["state"] != "terminated"]
        if self.capacity is not None and len(active) + count > self.capacity:
            return 409, {"error": "capacity", "message": f"capacity {self.capacity} exceeded"}
        if body.get("group") not in self.groups or body.get("key") not in self.keys:
            return 400, {"error": "invalid", "message": "unknown key or security group"}
        created = []
        for _ in range(count):
            if self._should_fail("create_instance"):
                return 500, {"error": "internal", "message": "instance launch failed", "created": created}
            used = {i["hostname"] for i in self.instances.values() if i["state"] != "terminated"}
            n = 1
            while f"cloud-{n}" in used:
                n += 1
            seq = self._next_instance
            self._next_instance += 1
            inst = {"id": f"i-{seq:06d}", "region": str(body.get("region", "")),
                    "public_address": f"{PUBLIC_POOL}.{(seq - 1) % 254 + 1}", "state": "pending",
                    "hostname": f"cloud-{n}", "key": body["key"], "group": body["group"]}
            self.instances[inst["id"]] = inst
            if self.on_create is not None:
                self.on_create(inst["hostname"])
            inst["state"] = "running"
            created.append(dict(inst))
        return 201, created

    def _terminate(self, iid):
        inst = self.instances.get(iid)
        if inst is None:
            return 404, {"error": "not-found", "message": f"no instance {iid}"}
        if inst["state"] == "terminated":
            return 200, dict(inst)
        if self._should_fail("terminate_instance"):
            return 500, {"error": "internal", "message": "terminate failed"}
        inst["state"] = "terminated"
        if self.on_terminate is not None:
            self.on_terminate(inst["hostname"])
        return 200, dict(inst)

    def close(self):
        self._server.shutdown()
        self._server.server_close()


class _CloudHandler(BaseHTTPRequestHandler):
    def log_message(self, fmt, *args):
        log.debug("mock cloud: " + fmt, *args)

    def _serve(self, method):
        length = int(self.headers.get("Content-Length") or 0)
        try:
            body = json.loads(self.rfile.read(length)) if length else {}
        except ValueError:
            body = None
        if body is None:
            status, payload = 400, {"error": "invalid", "message": "bad JSON"}
        else:
            status, payload = self.server.service.handle(method, urlsplit(self.path).path, body)
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._serve("GET")

    def do_POST(self):
        self._serve("POST")

    def do_DELETE(self):
        self._serve("DELETE")


# -- client -----------------------------------------------------------------


class CloudClient:
    """HTTP client for the provider API; safe for concurrent use."""

    def __init__(self, address, ctx=None, timeout=5.0):
        self.address = tuple(address)
        self.ctx = ctx
        self.timeout = timeout

    def _call(self, method, path, body=None):
        if self.ctx is not None and method != "GET":
            self.ctx.checkpoint(("cloud", method, path))
        conn = http.client.HTTPConnection(*self.address, timeout=self.timeout)
        try:
            data = json.dumps(body if body is not None else {}).encode()
            conn.request(method, path, body=data, headers={"Content-Type": "application/json"})
            resp = conn.getresponse()
            payload = json.loads(resp.read() or b"null")
            status = resp.status
        except OSError as exc:
            raise ProviderError(f"{method} {path}: {exc}") from None
        finally:
            conn.close()
        if status >= 400:
            if isinstance(payload, dict) and payload.get("error") == "capacity":
                raise CapacityError(payload.get("message", "capacity exceeded"))
            message = payload.get("message", "") if isinstance(payload, dict) else str(payload)
            raise ProviderError(f"{method} {path}: HTTP {status}: {message}")
        return payload

    def create_key(self, name):
        self._call("POST", "/keys", {"name": name})

    def delete_key(self, name):
        self._call("DELETE", f"/keys/{quote(name, safe='')}")

    def create_security_group(self, name, rules):
        body = {"name": name, "rules": [{"protocol": r.protocol, "port": r.port, "description": r.description}
                                        for r in rules]}
        return self._call("POST", "/security-groups", body)["id"]

    def security_groups(self):
        return self._call("GET", "/security-groups")

    def delete_security_group(self, gid):
        self._call("DELETE", f"/security-groups/{quote(gid, safe='')}")

    def create_instances(self, region, count, key, group):
        items = self._call("POST", "/instances", {"region": region, "count": count, "key": key, "group": group})
        return [_instance(i) for i in items]

    def terminate_instance(self, iid):
        self._call("DELETE", f"/instances/{quote(iid, safe='')}")

    def list_instances(self):
        return [_instance(i) for i in self._call("GET", "/instances")]


def _instance(raw):
    return CloudInstance(raw["id"], raw["region"], raw.get("public_address"), raw["state"], raw["hostname"])


def provision(plan, provider):
    """Create key, security group and instances; all or nothing.

    Instances are launched one at a time so a failure part way leaves a
    known set to roll back.  On error everything created is removed before
    the error propagates.
    """
    handle = CloudHandle()
    try:
        provider.create_key(plan.key_name)
        handle.key_name = plan.key_name
        handle.group_id = provider.create_security_group(plan.key_name, plan.rules)
        for _ in range(plan.count):
            handle.instances.extend(provider.create_instances(plan.region, 1, handle.key_name, handle.group_id))
    except LabError:
        try:
            _terminate(handle, provider)
        except LabError as cleanup:
            log.error("cloud rollback incomplete: %s", cleanup)
        raise
    log.info("provisioned %d instances in %s", len(handle.instances), plan.region)
    return handle


def _retry(fn, *args):
    try:
        fn(*args)
    except CapacityError:
        raise
    except ProviderError:
        fn(*args)


def _terminate(handle, provider):
    errors = []
    for inst in handle.instances:
        try:
            _retry(provider.terminate_instance, inst.id)
        except LabError as exc:
            errors.append(exc)
    if handle.group_id is not None:
        try:
            _retry(provider.delete_security_group, handle.group_id)
            handle.group_id = None
        except LabError as exc:
            errors.append(exc)
    if handle.key_name is not None:
        try:
            _retry(provider.delete_key, handle.key_name)
            handle.key_name = None
        except LabError as exc:
            errors.append(exc)
    if errors:
        raise ProviderTeardownErrors(errors)


def terminate_all(handle, provider):
    """Terminate instances, then the security group, then the key.

    Each call is retried once; failures are aggregated and the rest still
    runs.  A second call is a no-op.
    """
    if handle.terminated:
        return TeardownStatus.ALREADY_TORN_DOWN
    try:
        _terminate(handle, provider)
    finally:
        handle.terminated = True
    return TeardownStatus.DONE


def with_key(plan, key_name):
    return replace(plan, key_name=key_name)
