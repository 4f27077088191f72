"""Host/device links with simulated bandwidth and latency.

A link is two channels per direction: a small-message channel (framed
messages, latency-only delay, FIFO) and a bulk channel (opaque blobs,
delayed by latency + size/bandwidth, one transfer in flight per direction
at a time, full duplex across directions). Completion of a bulk transfer is
observable through a handle, so the sender's control loop never waits on
the link itself.

Two transports implement the same contract:

* in-process: paired queues, payloads copied at the boundary so each side
  owns its bytes (same isolation a DMA copy gives);
* subprocess: a device worker process reached over two local TCP sockets,
  a genuinely separate address space.

Delays are applied on the sending side by per-channel pacing threads, so
both transports exhibit the same timing model.
"""

from __future__ import annotations

import queue
import socket
import struct
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional

PROTOCOL_VERSION = 1

_MESSAGE_HEADER = struct.Struct("<IQ")   # kind u32, payload_length u64
_BLOB_HEADER = struct.Struct("<Q")       # payload_length u64 (socket framing)
_HELLO_DEVICE = struct.Struct("<II")     # version, worker_count
_HELLO_HOST = struct.Struct("<Idd")      # version, bandwidth, latency


class TransportError(Exception):
    """Base for link failures."""


class PeerClosedError(TransportError):
    """The other side of the link is gone."""


class SpawnError(TransportError):
    """The device worker process could not be started."""


class HandshakeTimeoutError(TransportError):
    """The peer did not complete the HELLO exchange in time."""


class VersionMismatchError(TransportError):
    """The peer speaks a different protocol version."""


class MessageKind(IntEnum):
    HELLO = 0
    FUNCTOR_STATE = 1
    WORK_BLOCK = 2
    RESULT_BLOCK = 3
    NO_MORE_WORK = 4
    SHUTDOWN = 5
    BLOCK_ACK = 6


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    payload: bytes = b""


@dataclass(frozen=True)
class LinkConfig:
    """Simulated link parameters. Defaults are a placeholder peripheral bus:
    1 GiB/s, 10 microseconds."""

    bandwidth: float = float(1 << 30)   # bytes/second
    latency: float = 10e-6              # seconds
    kind: str = "in-process"            # or "subprocess"

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        if self.kind not in ("in-process", "subprocess"):
            raise ValueError(f"unknown transport kind: {self.kind!r}")


def link_time(nbytes: int, config: LinkConfig) -> float:
    """Simulated duration of one bulk transfer: latency + bytes/bandwidth."""
    return config.latency + nbytes / config.bandwidth


def encode_message(msg: Message) -> bytes:
    return _MESSAGE_HEADER.pack(int(msg.kind), len(msg.payload)) + msg.payload


def decode_message(frame: bytes) -> Message:
    kind, length = _MESSAGE_HEADER.unpack_from(frame, 0)
    payload = bytes(frame[_MESSAGE_HEADER.size:])
    if len(payload) != length:
        raise TransportError("message frame length mismatch")
    return Message(MessageKind(kind), payload)


class TransferHandle:
    """Completion handle for one bulk transfer."""

    __slots__ = ("_event", "_callbacks", "error", "completed_at")

    def __init__(self):
        self._event = threading.Event()
        self._callbacks: list[Callable[["TransferHandle"], None]] = []
        self.error: Optional[Exception] = None
        self.completed_at: Optional[float] = None

    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._event.wait(timeout)

    def add_done_callback(self, fn: Callable[["TransferHandle"], None]) -> None:
        if self._event.is_set():
            fn(self)
        else:
            self._callbacks.append(fn)

    def _complete(self, error: Exception | None = None) -> None:
        self.error = error
        self.completed_at = time.perf_counter()
        self._event.set()
        for fn in self._callbacks:
            fn(self)


class TraceRecorder:
    """Ordered log of endpoint traffic, for tests and trace assertions."""

    def __init__(self):
        self._lock = threading.Lock()
        self.events: list[tuple[str, bytes]] = []

    def record(self, event: str, data: bytes) -> None:
        with self._lock:
            self.events.append((event, bytes(data)))

    def frames(self, event: str) -> list[bytes]:
        with self._lock:
            return [d for e, d in self.events if e == event]

    def message_kinds(self, event: str) -> list[MessageKind]:
        return [decode_message(f).kind for f in self.frames(event)]


_STOP = object()
_CLOSED = object()


class _Lane(threading.Thread):
    """Sender-side pacing for one channel direction.

    Each submission gets a delivery deadline computed at submit time; the
    lane thread delivers strictly in order, sleeping out whatever simulated
    time has not already elapsed. Bulk lanes additionally serialize: a
    transfer's clock starts when the previous one finishes.
    """

    def __init__(self, name: str, config: LinkConfig, occupancy: bool,
                 deliver: Callable[[object], None],
                 on_error: Callable[[Exception], None]):
        super().__init__(name=name, daemon=True)
        self._config = config
        self._occupancy = occupancy
        self._deliver = deliver
        self._on_error = on_error
        self._q: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._free_at = 0.0
        self._broken = False

    def submit(self, payload, nbytes: int,
               handle: TransferHandle | None = None) -> None:
        with self._lock:
            if self._broken:
                raise PeerClosedError("link is down")
            now = time.perf_counter()
            if self._occupancy:
                start = now if now > self._free_at else self._free_at
                deadline = start + link_time(nbytes, self._config)
                self._free_at = deadline
            else:
                deadline = now + self._config.latency
            self._q.put((deadline, payload, handle))

    def stop(self, join: bool = True) -> None:
        self._q.put(_STOP)
        if join and self.is_alive():
            self.join(timeout=30.0)

    def run(self):
        while True:
            item = self._q.get()
            if item is _STOP:
                return
            deadline, payload, handle = item
            delay = deadline - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            err: Exception | None = None
            try:
                self._deliver(payload)
            except (OSError, PeerClosedError) as exc:
                err = PeerClosedError(str(exc))
                with self._lock:
                    self._broken = True
                self._on_error(err)
            if handle is not None:
                handle._complete(err)


class _QueuePair:
    """Shared state of one in-process link."""

    def __init__(self):
        self.to_device_msgs: queue.Queue = queue.Queue()
        self.to_device_blobs: queue.Queue = queue.Queue()
        self.to_host_msgs: queue.Queue = queue.Queue()
        self.to_host_blobs: queue.Queue = queue.Queue()


class Endpoint:
    """One side of a link: message channel plus bulk channel.

    The send side and the receive side may be driven from different threads,
    but each side must be used by one thread at a time (serialize externally
    if several producers share it).
    """

    def __init__(self, label: str, config: LinkConfig, *,
                 send_msg_lane: _Lane, send_blob_lane: _Lane,
                 recv_msg: Callable[[float | None], bytes],
                 recv_blob: Callable[[float | None], bytes],
                 on_close: Callable[[], None],
                 trace: TraceRecorder | None = None,
                 copy_blobs: bool = False):
        self.label = label
        self.config = config
        self.trace = trace
        self._send_msg_lane = send_msg_lane
        self._send_blob_lane = send_blob_lane
        self._recv_msg = recv_msg
        self._recv_blob = recv_blob
        self._on_close = on_close
        self._copy_blobs = copy_blobs
        self._closed = False
        self._count_lock = threading.Lock()
        self.bytes_sent = 0
        self.bytes_received = 0

    def _account_sent(self, n: int) -> None:
        with self._count_lock:
            self.bytes_sent += n

    def _account_received(self, n: int) -> None:
        with self._count_lock:
            self.bytes_received += n

    def send_message(self, msg: Message) -> None:
        if self._closed:
            raise PeerClosedError("endpoint closed")
        frame = encode_message(msg)
        if self.trace is not None:
            self.trace.record("send_msg", frame)
        self._account_sent(len(frame))
        self._send_msg_lane.submit(frame, len(frame))

    def recv_message(self, timeout: float | None = None) -> Message:
        frame = self._recv_msg(timeout)
        if self.trace is not None:
            self.trace.record("recv_msg", frame)
        self._account_received(len(frame))
        return decode_message(frame)

    def send_blob(self, data) -> TransferHandle:
        """Start an asynchronous bulk transfer of ``data``.

        Returns immediately; the handle completes once the simulated
        transfer time has elapsed and the bytes are with the peer. The
        caller must not modify ``data`` until then (in-process links snapshot
        it up front, socket links write it out from the live buffer).
        """
        if self._closed:
            raise PeerClosedError("endpoint closed")
        nbytes = len(data)
        if self.trace is not None:
            self.trace.record("send_blob", bytes(data))
        payload = bytes(data) if self._copy_blobs else data
        self._account_sent(nbytes)
        handle = TransferHandle()
        self._send_blob_lane.submit(payload, nbytes, handle)
        return handle

    def recv_blob(self, timeout: float | None = None) -> bytes:
        blob = self._recv_blob(timeout)
        if self.trace is not None:
            self.trace.record("recv_blob", blob)
        self._account_received(len(blob))
        return blob

    def close(self) -> None:
        """Flush pending sends, then tear the endpoint down. Idempotent."""
        if self._closed:
            return
        self._closed = True
        self._send_msg_lane.stop()
        self._send_blob_lane.stop()
        self._on_close()


def _queue_receiver(q: queue.Queue) -> Callable[[float | None], bytes]:
    def recv(timeout: float | None = None) -> bytes:
        try:
            item = q.get(timeout=timeout)
        except queue.Empty:
            raise HandshakeTimeoutError("timed out waiting for peer") from None
        if item is _CLOSED:
            q.put(_CLOSED)  # keep later receivers unblocked too
            raise PeerClosedError("peer closed the link")
        return item
    return recv


def create_endpoint_pair(config: LinkConfig,
                         host_trace: TraceRecorder | None = None
                         ) -> tuple[Endpoint, Endpoint]:
    """In-process link: two live endpoints sharing paced queues."""
    shared = _QueuePair()

    def make_side(label: str, out_msgs: queue.Queue, out_blobs: queue.Queue,
                  in_msgs: queue.Queue, in_blobs: queue.Queue,
                  trace: TraceRecorder | None) -> Endpoint:
        def on_error(exc: Exception) -> None:
            pass  # queue delivery cannot fail

        msg_lane = _Lane(f"{label}-msg-out", config, occupancy=False,
                         deliver=out_msgs.put, on_error=on_error)
        blob_lane = _Lane(f"{label}-blob-out", config, occupancy=True,
                          deliver=out_blobs.put, on_error=on_error)
        msg_lane.start()
        blob_lane.start()

        def on_close():
            out_msgs.put(_CLOSED)
            out_blobs.put(_CLOSED)
            in_msgs.put(_CLOSED)
            in_blobs.put(_CLOSED)

        return Endpoint(label, config,
                        send_msg_lane=msg_lane, send_blob_lane=blob_lane,
                        recv_msg=_queue_receiver(in_msgs),
                        recv_blob=_queue_receiver(in_blobs),
                        on_close=on_close, trace=trace, copy_blobs=True)

    host = make_side("host", shared.to_device_msgs, shared.to_device_blobs,
                     shared.to_host_msgs, shared.to_host_blobs, host_trace)
    device = make_side("device", shared.to_host_msgs, shared.to_host_blobs,
                       shared.to_device_msgs, shared.to_device_blobs, None)
    return host, device


# ---------------------------------------------------------------------------
# Socket transport
# ---------------------------------------------------------------------------

def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except OSError as exc:
            raise PeerClosedError(str(exc)) from None
        if not chunk:
            raise PeerClosedError("peer closed the socket")
        buf += chunk
    return bytes(buf)


def _set_timeout(sock: socket.socket, timeout: float | None) -> None:
    try:
        sock.settimeout(timeout)
    except OSError:
        raise PeerClosedError("socket closed") from None


def _socket_msg_receiver(sock: socket.socket) -> Callable[[float | None], bytes]:
    def recv(timeout: float | None = None) -> bytes:
        if timeout is not None:
            _set_timeout(sock, timeout)
        try:
            header = _read_exact(sock, _MESSAGE_HEADER.size)
        except socket.timeout:
            raise HandshakeTimeoutError("timed out waiting for peer") from None
        finally:
            if timeout is not None:
                try:
                    sock.settimeout(None)
                except OSError:
                    pass
        _, length = _MESSAGE_HEADER.unpack(header)
        return header + _read_exact(sock, length)
    return recv


def _socket_blob_receiver(sock: socket.socket) -> Callable[[float | None], bytes]:
    def recv(timeout: float | None = None) -> bytes:
        if timeout is not None:
            _set_timeout(sock, timeout)
        try:
            header = _read_exact(sock, _BLOB_HEADER.size)
        except socket.timeout:
            raise HandshakeTimeoutError("timed out waiting for peer") from None
        finally:
            if timeout is not None:
                try:
                    sock.settimeout(None)
                except OSError:
                    pass
        (length,) = _BLOB_HEADER.unpack(header)
        return _read_exact(sock, length)
    return recv


def socket_endpoint(label: str, msg_sock: socket.socket,
                    bulk_sock: socket.socket, config: LinkConfig,
                    trace: TraceRecorder | None = None) -> Endpoint:
    """Wrap a (message, bulk) socket pair in the endpoint contract."""

    def on_error(exc: Exception) -> None:
        pass  # surfaced through handles and subsequent recv failures

    def deliver_msg(frame: bytes) -> None:
        msg_sock.sendall(frame)

    def deliver_blob(data) -> None:
        bulk_sock.sendall(_BLOB_HEADER.pack(len(data)))
        bulk_sock.sendall(data)

    msg_lane = _Lane(f"{label}-msg-out", config, occupancy=False,
                     deliver=deliver_msg, on_error=on_error)
    blob_lane = _Lane(f"{label}-blob-out", config, occupancy=True,
                      deliver=deliver_blob, on_error=on_error)
    msg_lane.start()
    blob_lane.start()

    def on_close():
        for s in (msg_sock, bulk_sock):
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()

    return Endpoint(label, config,
                    send_msg_lane=msg_lane, send_blob_lane=blob_lane,
                    recv_msg=_socket_msg_receiver(msg_sock),
                    recv_blob=_socket_blob_receiver(bulk_sock),
                    on_close=on_close, trace=trace, copy_blobs=False)


# ---------------------------------------------------------------------------
# Connection establishment
# ---------------------------------------------------------------------------

class DeviceHandle:
    """A live device: host endpoint plus whatever runs the device side."""

    def __init__(self, endpoint: Endpoint, worker_count: int,
                 config: LinkConfig,
                 master_thread: threading.Thread | None = None,
                 process: subprocess.Popen | None = None,
                 device_pool=None):
        self.endpoint = endpoint
        self.worker_count = worker_count
        self.config = config
        self.device_pool = device_pool
        self._master_thread = master_thread
        self._process = process

    def close(self, timeout: float = 30.0) -> None:
        self.endpoint.close()
        if self._master_thread is not None:
            self._master_thread.join(timeout)
        if self._process is not None:
            try:
                self._process.wait(timeout)
            except subprocess.TimeoutExpired:
                self._process.kill()
                self._process.wait(10.0)


def _host_handshake(endpoint: Endpoint, config: LinkConfig,
                    timeout: float) -> int:
    """Receive the device HELLO, validate it, reply with link parameters."""
    msg = endpoint.recv_message(timeout)
    if msg.kind != MessageKind.HELLO:
        raise TransportError(f"expected HELLO, got {msg.kind!r}")
    version, workers = _HELLO_DEVICE.unpack(msg.payload)
    if version != PROTOCOL_VERSION:
        raise VersionMismatchError(
            f"device protocol {version}, host speaks {PROTOCOL_VERSION}")
    endpoint.send_message(Message(MessageKind.HELLO, _HELLO_HOST.pack(
        PROTOCOL_VERSION, config.bandwidth, config.latency)))
    return workers


def device_hello(worker_count: int,
                 version: int = PROTOCOL_VERSION) -> Message:
    return Message(MessageKind.HELLO, _HELLO_DEVICE.pack(version, worker_count))


def parse_host_hello(msg: Message) -> LinkConfig:
    if msg.kind != MessageKind.HELLO:
        raise TransportError(f"expected HELLO, got {msg.kind!r}")
    version, bandwidth, latency = _HELLO_HOST.unpack(msg.payload)
    if version != PROTOCOL_VERSION:
        raise VersionMismatchError(
            f"host protocol {version}, device speaks {PROTOCOL_VERSION}")
    return LinkConfig(bandwidth=bandwidth, latency=latency)


def connect(config: LinkConfig, worker_count: int, *,
            trace: TraceRecorder | None = None,
            device_pool=None,
            worker_command: list[str] | None = None,
            handshake_timeout: float = 60.0,
            _device_version: int | None = None) -> DeviceHandle:
    """Bring up one device and exchange HELLOs.

    In-process: spawns the device master loop on a thread. Subprocess:
    launches the device worker executable and meets it on two local
    sockets (message channel first, bulk channel second, each announced by
    a one-byte tag).
    """
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1")
    from . import device_worker  # deferred: device_worker imports transport

    if config.kind == "in-process":
        host_ep, dev_ep = create_endpoint_pair(config, trace)
        master = threading.Thread(
            target=device_worker.inproc_device_main,
            args=(dev_ep, worker_count),
            kwargs={"pool": device_pool,
                    "protocol_version": _device_version or PROTOCOL_VERSION},
            name="device-master", daemon=True)
        master.start()
        try:
            workers = _host_handshake(host_ep, config, handshake_timeout)
        except TransportError:
            host_ep.close()
            master.join(5.0)
            raise
        return DeviceHandle(host_ep, workers, config, master_thread=master,
                            device_pool=device_pool)

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind(("127.0.0.1", 0))
    listener.listen(2)
    port = listener.getsockname()[1]
    cmd = worker_command or [sys.executable, "-m", "hybridsph.device_worker",
                             "--connect", f"127.0.0.1:{port}",
                             "--workers", str(worker_count)]
    try:
        proc = subprocess.Popen(cmd)
    except OSError as exc:
        listener.close()
        raise SpawnError(f"cannot launch device worker: {exc}") from exc

    listener.settimeout(handshake_timeout)
    socks: dict[bytes, socket.socket] = {}
    try:
        for _ in range(2):
            conn, _addr = listener.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            tag = _read_exact(conn, 1)
            socks[tag] = conn
        if set(socks) != {b"M", b"B"}:
            raise TransportError("device worker sent bad channel tags")
    except socket.timeout:
        proc.kill()
        raise HandshakeTimeoutError(
            "device worker did not connect in time") from None
    finally:
        listener.close()

    endpoint = socket_endpoint("host", socks[b"M"], socks[b"B"], config, trace)
    try:
        workers = _host_handshake(endpoint, config, handshake_timeout)
    except TransportError:
        endpoint.close()
        proc.kill()
        raise
    return DeviceHandle(endpoint, workers, config, process=proc)
