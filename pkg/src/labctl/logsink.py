"""Tagged log collection over TCP.

Wire format: UTF-8, LF-delimited JSON frames ``[tag, time, {record}, seq]``
where ``time`` is unix seconds (number) or ``[seconds, nanos]`` and ``seq``
strictly increases within a connection.  Each record is appended as one JSON
line to ``<tag>.log`` in the output directory.
"""

import json
import logging
import math
import os
import socket
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import AlreadyStopped, BindError, LabError, ProtocolError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogRecord:
    tag: str
    seconds: int
    nanos: int
    body: dict
    seq: int


@dataclass(frozen=True)
class SinkSummary:
    records: int
    connections: int
    files: int


def valid_tag(tag):
    return (isinstance(tag, str) and tag != "" and "/" not in tag and "\x00" not in tag
            and all(tag.split(".")))


def decode_frame(line):
    """Parse one frame into a :class:`LogRecord`; raises ProtocolError."""
    try:
        frame = json.loads(line)
    except ValueError as exc:
        raise ProtocolError(f"invalid JSON frame: {exc}") from None
    if not isinstance(frame, list) or len(frame) != 4:
        raise ProtocolError("frame must be [tag, time, record, seq]")
    tag, when, body, seq = frame
    if not valid_tag(tag):
        raise ProtocolError(f"invalid tag {tag!r}")
    if isinstance(when, bool):
        raise ProtocolError("invalid time")
    if isinstance(when, (int, float)) and math.isfinite(when) and when >= 0:
        seconds = int(when)
        nanos = int(round((when - seconds) * 1e9)) if isinstance(when, float) else 0
        nanos = min(nanos, 999_999_999)
    elif (isinstance(when, list) and len(when) == 2 and all(isinstance(x, int) and not isinstance(x, bool)
                                                            for x in when)
          and when[0] >= 0 and 0 <= when[1] < 1_000_000_000):
        seconds, nanos = when
    else:
        raise ProtocolError("invalid time")
    if not isinstance(body, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in body.items()):
        raise ProtocolError("record must map strings to strings")
    if isinstance(seq, bool) or not isinstance(seq, int):
        raise ProtocolError("seq must be an integer")
    return LogRecord(tag, seconds, nanos, body, seq)


def encode_frame(tag, when, body, seq):
    return json.dumps([tag, when, body, seq], separators=(",", ":")) + "\n"


class _TagFile:
    def __init__(self, path):
        self.lock = threading.Lock()
        self.fh = open(path, "a", encoding="utf-8")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        sink = self.server.sink
        conn_id = sink._register(self.connection)
        try:
            sink.ingest(self.rfile, conn_id)
        except ProtocolError as exc:
            log.warning("log connection %d closed: %s", conn_id, exc)
        except OSError:
            pass
        finally:
            sink._unregister(self.connection)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = False
    block_on_close = True


class LogSink:
    """Running log collector; see :func:`start_sink`."""

    def __init__(self, bind, output_dir):
        self.output_dir = Path(output_dir)
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            probe = self.output_dir / ".write-probe"
            probe.touch()
            probe.unlink()
        except OSError as exc:
            raise LabError(f"output directory not writable: {exc}") from exc
        try:
            self._server = _Server(tuple(bind), _Handler)
        except OSError as exc:
            raise BindError(f"log sink cannot bind {bind}: {exc}") from exc
        self._server.sink = self
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._files = {}
        self._active = set()
        self._next_conn = 0
        self._records = 0
        self._stopped = False
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.02},
                                        name="log-sink", daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self._server.server_address[:2]

    @property
    def records(self):
        with self._lock:
            return self._records

    def _register(self, sock):
        with self._lock:
            self._next_conn += 1
            self._active.add(sock)
            return self._next_conn

    def _unregister(self, sock):
        with self._lock:
            self._active.discard(sock)

    def _file(self, tag):
        with self._lock:
            f = self._files.get(tag)
            if f is None:
                f = self._files[tag] = _TagFile(self.output_dir / f"{tag}.log")
            return f

    def _persist(self, record, conn_id):
        line = json.dumps({"tag": record.tag, "time": record.seconds, "nanos": record.nanos,
                           "conn": conn_id, "seq": record.seq, "record": record.body},
                          sort_keys=True, separators=(",", ":")) + "\n"
        f = self._file(record.tag)
        with f.lock:
            f.fh.write(line)
        with self._cond:
            self._records += 1
            self._cond.notify_all()

    def ingest(self, stream, conn_id=0):
        """Persist every well-formed frame from a binary line stream.

        Returns the number of records persisted.  A malformed frame raises
        :class:`ProtocolError` after earlier records were written.
        """
        count = 0
        last_seq = None
        for raw in stream:
            line = raw.decode("utf-8", "strict") if isinstance(raw, bytes) else raw
            if not line.strip():
                continue
            record = decode_frame(line)
            if last_seq is not None and record.seq <= last_seq:
                raise ProtocolError(f"seq {record.seq} not after {last_seq}")
            last_seq = record.seq
            self._persist(record, conn_id)
            count += 1
        return count

    def wait_for_records(self, total, timeout=5.0):
        """Block until at least ``total`` records were persisted."""
        with self._cond:
            return self._cond.wait_for(lambda: self._records >= total, timeout)

    def flush(self):
        with self._lock:
            files = list(self._files.values())
        for f in files:
            with f.lock:
                f.fh.flush()

    def offsets(self):
        """Current byte size of every tag file, after flushing."""
        self.flush()
        with self._lock:
            tags = list(self._files)
        return {tag: os.path.getsize(self.output_dir / f"{tag}.log") for tag in tags}

    def stop(self, grace=5.0):
        if self._stopped:
            raise AlreadyStopped("log sink already stopped")
        self._stopped = True
        self._server.shutdown()
        self._server.socket.close()
        # let producers finish, then cut off stragglers
        deadline = threading.Event()
        for _ in range(int(grace * 20)):
            with self._lock:
                if not self._active:
                    break
            deadline.wait(0.05)
        with self._lock:
            for sock in list(self._active):
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
        self._server.server_close()
        self._thread.join()
        with self._lock:
            files = list(self._files.values())
            summary = SinkSummary(self._records, self._next_conn, len(files))
        for f in files:
            with f.lock:
                f.fh.close()
        return summary


def start_sink(bind, output_dir):
    """Start a sink listening on ``bind``; files appear lazily per tag."""
    return LogSink(bind, output_dir)


def stop_sink(sink):
    return sink.stop()


class LogForwarder:
    """Client side of the wire format with its own sequence counter."""

    def __init__(self, address, timeout=5.0):
        self._sock = socket.create_connection(tuple(address), timeout=timeout)
        self._lock = threading.Lock()
        self._seq = 0
        self.sent = 0
        self.closed = False

    def send(self, tag, body, when=0):
        with self._lock:
            if self.closed:
                raise ProtocolError("forwarder closed")
            self._seq += 1
            self._sock.sendall(encode_frame(tag, when, body, self._seq).encode())
            self.sent += 1

    def close(self):
        with self._lock:
            if not self.closed:
                self.closed = True
                try:
                    self._sock.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                self._sock.close()
