"""Local RPC endpoint: length-prefixed frames over a Unix domain socket.

Frame layout (all integers big-endian)::

    uint32 length | uint8 method | uint64 request_id | payload (length - 9 bytes)

Responses echo the request id and set the high bit of the method. Payloads
are canonical JSON (sorted keys, compact separators); the one exception is
FetchResults, whose JSON header frame is followed by raw data frames of at
most 64 KiB.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import os
import socket
import socketserver
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from .errors import BridgeError, MalformedFrame, NoSuchJob, OversizedFrame, SourceMissing, error_class
from .lifecycle import format_age
from .manifest import parse_manifest

logger = logging.getLogger(__name__)

DEFAULT_SOCKET = "/tmp/wlmbridge.sock"
MAX_FRAME = 16 * 1024 * 1024
CHUNK_SIZE = 64 * 1024
RESPONSE_BIT = 0x80

_HEADER = struct.Struct(">I")
_BODY_HEAD = struct.Struct(">BQ")


class Method(enum.IntEnum):
    SUBMIT_JOB = 1
    JOB_STATUS = 2
    CANCEL_JOB = 3
    LIST_JOBS = 4
    FETCH_RESULTS = 5
    LIST_QUEUES = 6


def socket_path() -> str:
    return os.environ.get("WLMBRIDGE_SOCKET", DEFAULT_SOCKET)


@dataclass(frozen=True)
class Frame:
    method: int
    request_id: int
    payload: bytes = b""

    @property
    def is_response(self) -> bool:
        return bool(self.method & RESPONSE_BIT)

    @property
    def base_method(self) -> Method:
        return Method(self.method & ~RESPONSE_BIT)


def _check_method(method: int) -> None:
    valid = isinstance(method, int) and 0 <= method <= 0xFF
    if not valid or (method & ~RESPONSE_BIT) not in {m.value for m in Method}:
        raise MalformedFrame(f"unknown method id {method!r}")


def encode_frame(method: int, request_id: int, payload: bytes = b"") -> bytes:
    _check_method(method)
    if not 0 <= request_id < 2**64:
        raise MalformedFrame(f"request id {request_id} out of range")
    length = _BODY_HEAD.size + len(payload)
    if length > MAX_FRAME:
        raise OversizedFrame(f"frame body of {length} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(length) + _BODY_HEAD.pack(method, request_id) + payload


def _decode_body(body: bytes) -> Frame:
    if len(body) < _BODY_HEAD.size:
        raise MalformedFrame(f"frame body of {len(body)} bytes is shorter than its header")
    method, request_id = _BODY_HEAD.unpack_from(body)
    _check_method(method)
    return Frame(method, request_id, bytes(body[_BODY_HEAD.size :]))


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one complete frame."""
    if len(data) < _HEADER.size:
        raise MalformedFrame("truncated length prefix")
    (length,) = _HEADER.unpack_from(data)
    if length > MAX_FRAME:
        raise OversizedFrame(f"declared length {length} exceeds {MAX_FRAME}")
    if len(data) - _HEADER.size != length:
        raise MalformedFrame(
            f"declared length {length} but {len(data) - _HEADER.size} body bytes"
        )
    return _decode_body(data[_HEADER.size :])


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_frame(stream) -> Frame | None:
    """Read one frame from a binary stream; None on clean EOF."""
    head = _read_exact(stream, _HEADER.size)
    if not head:
        return None
    if len(head) < _HEADER.size:
        raise MalformedFrame("connection closed inside a length prefix")
    (length,) = _HEADER.unpack(head)
    if length > MAX_FRAME:
        raise OversizedFrame(f"declared length {length} exceeds {MAX_FRAME}")
    body = _read_exact(stream, length)
    if len(body) < length:
        raise MalformedFrame(f"connection closed after {len(body)} of {length} body bytes")
    return _decode_body(body)


def encode_payload(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def decode_payload(data: bytes):
    if not data:
        return {}
    try:
        return json.loads(data.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(f"payload is not canonical JSON: {exc}") from None


def _ok(result) -> bytes:
    return encode_payload({"ok": True, "result": result})


def _err(code: str, message: str) -> bytes:
    return encode_payload({"ok": False, "error": {"code": code, "message": message}})


# server


def _job_key(payload: dict) -> str:
    key = payload.get("uid") or payload.get("name")
    if not isinstance(key, str) or not key:
        raise NoSuchJob("request names no job (expected 'uid' or 'name')")
    return key


class Dispatcher:
    """Maps decoded requests onto bridge operations."""

    def __init__(self, bridge) -> None:
        self.bridge = bridge

    def handle(self, frame: Frame) -> list[bytes]:
        """Response payloads for one request frame."""
        method = frame.base_method
        try:
            payload = decode_payload(frame.payload)
            if not isinstance(payload, dict):
                raise MalformedFrame("payload must be a JSON object")
            if method is Method.FETCH_RESULTS:
                return self._fetch(payload)
            return [_ok(getattr(self, f"_{method.name.lower()}")(payload))]
        except BridgeError as exc:
            return [_err(exc.code, str(exc))]
        except Exception as exc:  # keep the connection alive on server bugs
            logger.exception("request %s failed", frame.request_id)
            return [_err("InternalError", str(exc))]

    def _submit_job(self, payload):
        text = payload.get("manifest")
        if not isinstance(text, str):
            raise MalformedFrame("SubmitJob needs a 'manifest' string")
        record = self.bridge.submit_job(parse_manifest(text))
        return {"job": record.to_dict()}

    def _job_status(self, payload):
        record = self.bridge.find(_job_key(payload))
        data = record.to_dict()
        data["age"] = self.bridge.clock() - record.created_at
        return {"job": data}

    def _cancel_job(self, payload):
        record = self.bridge.cancel_job(_job_key(payload))
        return {"job": record.to_dict()}

    def _list_jobs(self, payload):
        now = self.bridge.clock()
        rows = []
        for record in self.bridge.records():
            age = now - record.created_at
            rows.append(
                {
                    "uid": record.uid,
                    "name": record.name,
                    "age": format_age(age),
                    "age_seconds": age,
                    "status": record.state.display,
                }
            )
        return {"jobs": rows}

    def _list_queues(self, payload):
        return {
            "queues": [
                {
                    "name": vn.name,
                    "max_nodes": vn.queue.max_nodes,
                    "max_walltime_seconds": vn.queue.max_walltime_seconds,
                    "nodes": list(vn.queue.node_names),
                    "jobs_pending": vn.jobs_pending,
                    "jobs_running": vn.jobs_running,
                }
                for vn in self.bridge.registry
            ]
        }

    def _fetch(self, payload) -> list[bytes]:
        record = self.bridge.find(_job_key(payload))
        if not record.result_paths:
            raise SourceMissing(f"job {record.name!r} has no collected results")
        path = Path(record.result_paths[0])
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise SourceMissing(f"cannot read {path}: {exc}") from None
        chunks = [data[i : i + CHUNK_SIZE] for i in range(0, len(data), CHUNK_SIZE)]
        header = _ok({"name": path.name, "size": len(data), "chunks": len(chunks)})
        return [header, *chunks]


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        dispatcher: Dispatcher = self.server.dispatcher
        while True:
            try:
                frame = read_frame(self.rfile)
            except (MalformedFrame, OversizedFrame) as exc:
                logger.info("closing connection: %s", exc)
                return
            except OSError:
                return
            if frame is None:
                return
            if frame.is_response:
                logger.info("closing connection: client sent a response frame")
                return
            reply_method = frame.method | RESPONSE_BIT
            try:
                for body in dispatcher.handle(frame):
                    self.wfile.write(encode_frame(reply_method, frame.request_id, body))
                self.wfile.flush()
            except OSError:
                return


class RedboxServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True
    # AF_UNIX connects fail with EAGAIN rather than waiting once the backlog fills
    request_queue_size = socket.SOMAXCONN

    def __init__(self, path: str, bridge) -> None:
        self.path = str(path)
        self.dispatcher = Dispatcher(bridge)
        self.bridge = bridge
        _clear_stale_socket(self.path)
        super().__init__(self.path, _Handler)

    def server_close(self) -> None:
        super().server_close()
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def _clear_stale_socket(path: str) -> None:
    if not os.path.exists(path):
        return
    probe = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        probe.connect(path)
    except (ConnectionRefusedError, FileNotFoundError):
        os.unlink(path)
        return
    except OSError:
        os.unlink(path)
        return
    finally:
        probe.close()
    raise OSError(f"another server is already listening on {path}")


def serve(path: str, bridge) -> RedboxServer:
    """Bind the socket; call ``serve_forever`` on the result to run."""
    return RedboxServer(path, bridge)


@contextmanager
def running_server(path: str, bridge):
    """Run a server on a background thread for the duration of the block."""
    server = serve(path, bridge)
    thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()
        thread.join()


# client


class TransportError(Exception):
    """The socket could not be reached or the stream broke."""


class RedboxClient:
    def __init__(self, path: str | None = None, timeout: float | None = 30.0) -> None:
        self.path = path or socket_path()
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._stream = None
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def connect(self) -> RedboxClient:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.settimeout(self.timeout)
        try:
            sock.connect(self.path)
        except OSError as exc:
            sock.close()
            raise TransportError(f"cannot connect to {self.path}: {exc}") from None
        self._sock = sock
        self._stream = sock.makefile("rb")
        return self

    def close(self) -> None:
        if self._stream is not None:
            self._stream.close()
        if self._sock is not None:
            self._sock.close()
        self._sock = self._stream = None

    def __enter__(self) -> RedboxClient:
        return self.connect() if self._sock is None else self

    def __exit__(self, *exc) -> None:
        self.close()

    def _send(self, method: Method, payload: dict) -> int:
        if self._sock is None:
            self.connect()
        request_id = next(self._ids)
        try:
            self._sock.sendall(encode_frame(method, request_id, encode_payload(payload)))
        except OSError as exc:
            raise TransportError(f"send to {self.path} failed: {exc}") from None
        return request_id

    def _recv(self, method: Method, request_id: int) -> Frame:
        try:
            frame = read_frame(self._stream)
        except OSError as exc:
            raise TransportError(f"receive from {self.path} failed: {exc}") from None
        except (MalformedFrame, OversizedFrame) as exc:
            raise TransportError(f"bad frame from {self.path}: {exc}") from None
        if frame is None:
            raise TransportError(f"server at {self.path} closed the connection")
        if frame.request_id != request_id or frame.method != method | RESPONSE_BIT:
            raise TransportError(
                f"response ({frame.method}, {frame.request_id}) does not match "
                f"request ({method | RESPONSE_BIT}, {request_id})"
            )
        return frame

    @staticmethod
    def _unwrap(frame: Frame):
        body = decode_payload(frame.payload)
        if body.get("ok"):
            return body.get("result")
        err = body.get("error") or {}
        cls = error_class(err.get("code", "BridgeError"))
        exc = cls.__new__(cls)
        Exception.__init__(exc, err.get("message", ""))
        raise exc

    def call(self, method: Method, payload: dict | None = None):
        with self._lock:
            request_id = self._send(method, payload or {})
            return self._unwrap(self._recv(method, request_id))

    def submit(self, manifest_text: str) -> dict:
        return self.call(Method.SUBMIT_JOB, {"manifest": manifest_text})["job"]

    def status(self, key: str) -> dict:
        return self.call(Method.JOB_STATUS, {"uid": key})["job"]

    def cancel(self, key: str) -> dict:
        return self.call(Method.CANCEL_JOB, {"uid": key})["job"]

    def list_jobs(self) -> list[dict]:
        return self.call(Method.LIST_JOBS)["jobs"]

    def list_queues(self) -> list[dict]:
        return self.call(Method.LIST_QUEUES)["queues"]

    def fetch_results(self, key: str) -> tuple[str, bytes]:
        with self._lock:
            request_id = self._send(Method.FETCH_RESULTS, {"uid": key})
            header = self._unwrap(self._recv(Method.FETCH_RESULTS, request_id))
            data = bytearray()
            for _ in range(header["chunks"]):
                data += self._recv(Method.FETCH_RESULTS, request_id).payload
        if len(data) != header["size"]:
            raise TransportError(f"expected {header['size']} bytes, received {len(data)}")
        return header["name"], bytes(data)
