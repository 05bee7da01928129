"""HTTP plumbing shared by all services: JSON servers and clients with
exact application-layer byte accounting.

Traffic comparisons between architectures need byte counts of HTTP
messages exactly as transmitted (request line, headers, body). Both the
server side (wrapping the handler's rfile/wfile) and the client side
(wrapping HTTPConnection.send and the response file object) tally every
byte that crosses the socket boundary, so the loopback conservation check
"bytes out of A == bytes into B" holds with zero tolerance.

One request per connection (Connection: close everywhere): request/response
sizes then delimit themselves and per-connection tallies are unambiguous.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from http.client import HTTPConnection, HTTPResponse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Iterator, Optional
from urllib.parse import urlparse

log = logging.getLogger("dynaseal.http")

MAX_BODY = 16 * 1024 * 1024


class ByteCounter:
    """Thread-safe in/out byte tally for one traffic-accounting surface."""

    def __init__(self, label: str = ""):
        self.label = label
        self.n_in = 0
        self.n_out = 0
        self._lock = threading.Lock()

    def add_in(self, n: int) -> None:
        with self._lock:
            self.n_in += n

    def add_out(self, n: int) -> None:
        with self._lock:
            self.n_out += n

    @property
    def total(self) -> int:
        with self._lock:
            return self.n_in + self.n_out

    def snapshot(self) -> dict:
        with self._lock:
            return {"label": self.label, "in": self.n_in, "out": self.n_out, "total": self.n_in + self.n_out}

    def __repr__(self):
        return f"ByteCounter({self.label}: in={self.n_in} out={self.n_out})"


class _CountingReader:
    def __init__(self, raw, on_bytes: Callable[[int], None]):
        self._raw = raw
        self._on = on_bytes

    def read(self, *a):
        b = self._raw.read(*a)
        self._on(len(b))
        return b

    def readline(self, *a):
        b = self._raw.readline(*a)
        self._on(len(b))
        return b

    def readinto(self, buf):
        n = self._raw.readinto(buf)
        self._on(n or 0)
        return n

    def __getattr__(self, name):
        return getattr(self._raw, name)


class _CountingWriter:
    def __init__(self, raw, on_bytes: Callable[[int], None]):
        self._raw = raw
        self._on = on_bytes

    def write(self, b):
        n = self._raw.write(b)
        self._on(len(b))
        return n

    def __getattr__(self, name):
        return getattr(self._raw, name)


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------


@dataclass
class JsonResponse:
    status: int
    payload: Any
    headers: dict = field(default_factory=dict)


@dataclass
class StreamResponse:
    """Line-delimited JSON stream.

    `lines` yields complete JSON text lines (without trailing newline).
    `on_complete(aborted)` fires after the stream ends or the client
    disconnects; abort still completes the request lifecycle (partial
    usage is reported downstream).
    """

    status: int
    lines: Iterator[str]
    headers: dict = field(default_factory=dict)
    on_complete: Optional[Callable[[bool], None]] = None
    chunk_delay: float = 0.0


class HttpService:
    """A service routes (method, path, headers, body) to a Json/Stream response.

    counter_for(path) picks the accounting surface a request belongs to,
    letting one listener keep e.g. edge-facing and peer-facing traffic
    separate.
    """

    def handle(self, method: str, path: str, headers, body: bytes) -> JsonResponse | StreamResponse:
        raise NotImplementedError

    def counter_for(self, path: str) -> Optional[ByteCounter]:
        return None

    # Pre-handling delay; benches inject per-hop latency here.
    response_delay: float = 0.0


class _ServiceHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "dynaseal"
    sys_version = ""

    def setup(self):
        self.server._handler_started()  # type: ignore[attr-defined]
        super().setup()
        self._tally_in = 0
        self._tally_out = 0
        self.rfile = _CountingReader(self.rfile, self._add_in)
        self.wfile = _CountingWriter(self.wfile, self._add_out)
        self._route_path: Optional[str] = None

    def _add_in(self, n):
        self._tally_in += n

    def _add_out(self, n):
        self._tally_out += n

    def finish(self):
        # Tally commit happens before the idle notification so that
        # wait_idle() implies every counter is settled.
        try:
            svc: HttpService = self.server.service  # type: ignore[attr-defined]
            counter = svc.counter_for(self._route_path) if self._route_path else None
            if counter is not None:
                counter.add_in(self._tally_in)
                counter.add_out(self._tally_out)
            super().finish()
        finally:
            self.server._handler_finished()  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        if length < 0 or length > MAX_BODY:
            raise ValueError("unacceptable content length")
        return self.rfile.read(length) if length else b""

    def _dispatch(self, method: str):
        svc: HttpService = self.server.service  # type: ignore[attr-defined]
        self._route_path = self.path
        try:
            body = self._read_body()
        except ValueError:
            self._send_json(JsonResponse(413, {"error": "body_too_large"}))
            return
        if svc.response_delay:
            time.sleep(svc.response_delay)
        try:
            resp = svc.handle(method, self.path, self.headers, body)
        except Exception:
            log.exception("unhandled service error for %s %s", method, self.path)
            resp = JsonResponse(500, {"error": {"code": "internal", "message": "internal error"}})
        if isinstance(resp, StreamResponse):
            self._send_stream(resp)
        else:
            self._send_json(resp)

    def do_POST(self):
        self._dispatch("POST")

    def do_GET(self):
        self._dispatch("GET")

    def _send_json(self, resp: JsonResponse):
        body = json.dumps(resp.payload).encode()
        self.send_response(resp.status)
        self.send_header("Content-Type", "application/json")
        for k, v in resp.headers.items():
            self.send_header(k, v)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Connection", "close")
        self.end_headers()
        try:
            self.wfile.write(body)
        except OSError:
            pass
        self.close_connection = True

    def _send_stream(self, resp: StreamResponse):
        self.send_response(resp.status)
        self.send_header("Content-Type", "application/x-ndjson")
        for k, v in resp.headers.items():
            self.send_header(k, v)
        self.send_header("Connection", "close")
        self.end_headers()
        aborted = False
        try:
            for line in resp.lines:
                self.wfile.write(line.encode() + b"\n")
                self.wfile.flush()
                if resp.chunk_delay:
                    time.sleep(resp.chunk_delay)
        except OSError:
            aborted = True
        finally:
            if resp.on_complete is not None:
                try:
                    resp.on_complete(aborted)
                except Exception:
                    log.exception("stream completion hook failed")
        self.close_connection = True


class ServiceServer(ThreadingHTTPServer):
    daemon_threads = True
    # Concurrency harnesses open dozens of connections at once; the
    # socketserver default backlog of 5 would reset the surplus.
    request_queue_size = 128

    def __init__(self, service: HttpService, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _ServiceHandler)
        self.service = service
        self._in_flight = 0
        self._idle = threading.Condition()

    def _handler_started(self):
        with self._idle:
            self._in_flight += 1

    def _handler_finished(self):
        with self._idle:
            self._in_flight -= 1
            if self._in_flight == 0:
                self._idle.notify_all()

    def wait_idle(self, timeout: float = 5.0) -> bool:
        """Block until no handler is in flight.

        A client can finish reading a Content-Length response before the
        handler thread commits its byte tallies; snapshotting counters
        without this wait would race with that commit.
        """
        deadline = time.monotonic() + timeout
        with self._idle:
            while self._in_flight > 0:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._idle.wait(remaining)
        return True

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


class RunningServer:
    """A ServiceServer running on its own thread."""

    def __init__(self, service: HttpService, host: str = "127.0.0.1", port: int = 0):
        self.server = ServiceServer(service, host, port)
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        return self.server.url

    def quiesce(self, timeout: float = 5.0) -> bool:
        return self.server.wait_idle(timeout)

    def stop(self):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------


class TransportError(Exception):
    """Connection-level failure: refused, reset, or timed out."""


class _CountingConnection(HTTPConnection):
    def __init__(self, host: str, port: int, timeout: float, counter: Optional[ByteCounter]):
        super().__init__(host, port, timeout=timeout)
        self._counter = counter
        if counter is not None:
            def factory(*a, **k):
                r = HTTPResponse(*a, **k)
                r.fp = _CountingReader(r.fp, counter.add_in)
                return r

            self.response_class = factory

    def send(self, data):
        if self._counter is not None and isinstance(data, (bytes, bytearray, memoryview)):
            self._counter.add_out(len(data))
        super().send(data)


@dataclass
class Reply:
    status: int
    headers: dict
    body: bytes

    def json(self) -> Any:
        return json.loads(self.body.decode()) if self.body else None


class StreamReply:
    """A streamed reply read line by line; close() releases the connection."""

    def __init__(self, status: int, headers: dict, response: HTTPResponse, conn: HTTPConnection):
        self.status = status
        self.headers = headers
        self._response = response
        self._conn = conn

    def iter_lines(self) -> Iterator[bytes]:
        while True:
            try:
                line = self._response.readline()
            except OSError as e:
                raise TransportError(str(e)) from e
            if not line:
                return
            line = line.rstrip(b"\n")
            if line:
                yield line

    def read_all(self) -> bytes:
        return self._response.read()

    def close(self):
        try:
            self._response.close()
        finally:
            self._conn.close()


def _open(url: str, method: str, body: Optional[bytes], headers: Optional[dict], timeout: float,
          counter: Optional[ByteCounter]) -> tuple[_CountingConnection, HTTPResponse]:
    parsed = urlparse(url)
    if parsed.scheme != "http" or not parsed.hostname:
        raise ValueError(f"unsupported url: {url}")
    conn = _CountingConnection(parsed.hostname, parsed.port or 80, timeout, counter)
    hdrs = {"Accept": "application/json", "Connection": "close"}
    if body is not None:
        hdrs["Content-Type"] = "application/json"
    if headers:
        hdrs.update(headers)
    path = parsed.path or "/"
    if parsed.query:
        path += "?" + parsed.query
    try:
        conn.request(method, path, body=body, headers=hdrs)
        resp = conn.getresponse()
    except (OSError, socket.timeout) as e:
        conn.close()
        raise TransportError(str(e)) from e
    return conn, resp


def request_json(url: str, method: str = "POST", payload: Any = None, headers: Optional[dict] = None,
                 timeout: float = 10.0, counter: Optional[ByteCounter] = None) -> Reply:
    """One JSON request/response exchange. Raises TransportError on connection failure."""
    body = None if payload is None else json.dumps(payload).encode()
    conn, resp = _open(url, method, body, headers, timeout, counter)
    try:
        data = resp.read()
    except (OSError, socket.timeout) as e:
        raise TransportError(str(e)) from e
    finally:
        conn.close()
    return Reply(status=resp.status, headers=dict(resp.getheaders()), body=data)


def request_stream(url: str, method: str = "POST", payload: Any = None, headers: Optional[dict] = None,
                   timeout: float = 10.0, counter: Optional[ByteCounter] = None) -> StreamReply:
    """Open a request whose reply will be consumed line by line by the caller."""
    body = None if payload is None else json.dumps(payload).encode()
    conn, resp = _open(url, method, body, headers, timeout, counter)
    return StreamReply(status=resp.status, headers=dict(resp.getheaders()), response=resp, conn=conn)
