"""Dynamic work distribution across host workers and coprocessor devices.

``hybrid_for_each`` applies a functor to every item of a sequence. Host
workers transform items in place with no serialization; each device gets the
functor (plus shared state) once per call and then a stream of item blocks,
batched to its worker count and shipped as single bulk transfers, with
double buffering so the device rarely starves. Results scatter back into the
sequence by item index, so completion order never affects the outcome.

Work allocation is a single priority queue: a plain counter hands out fresh
indices, and a high-priority list serves put-backs (items taken but not
shipped, e.g. when a block buffer fills, or items stranded on a lost
device) before any counter index.
"""

from __future__ import annotations

import os
import queue as queue_mod
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from collections import deque
from typing import Callable, Sequence

from . import transport
from .transport import (DeviceHandle, LinkConfig, Message, MessageKind,
                        PeerClosedError, TraceRecorder, TransportError)
from .wire import ByteReader, ByteWriter, Codec, encode_functor

BLOCK_HEADER = struct.Struct("<QI")      # block_id u64, item_count u32
ITEM_PREFIX = struct.Struct("<Q")        # sequence_index u64
WORK_BLOCK_MSG = struct.Struct("<QQ")    # block_id, payload byte count
BLOCK_ACK_MSG = struct.Struct("<Q")      # block_id
FUNCTOR_HEADER = struct.Struct("<BQ")    # inline flag u8, byte count u64

DEFAULT_BUFFER_CAPACITY = 1 << 20
FUNCTOR_INLINE_MAX = 4096


class ItemTooLargeError(Exception):
    """A single serialized item exceeds the transfer buffer capacity."""


class WorkQueue:
    """Index dispenser with exactly-once semantics.

    Low-priority work is just a counter over [0, end_index); put-backs go to
    a FIFO high-priority list served before any counter index. All
    operations are atomic with respect to concurrent takers.
    """

    def __init__(self, end_index: int, trace: list | None = None):
        self._lock = threading.Lock()
        self._next = 0
        self._end = end_index
        self._high: deque[int] = deque()
        self._trace = trace
        self._aborted = False

    def take(self, k: int) -> list[int]:
        """Up to k indices: high-priority first (in list order), then
        ascending counter indices. Empty means no work remains right now."""
        if k < 1:
            raise ValueError("k must be >= 1")
        with self._lock:
            if self._trace is not None:
                high_before = tuple(self._high)
            out: list[int] = []
            high = self._high
            while high and len(out) < k:
                out.append(high.popleft())
            room = k - len(out)
            if room > 0 and self._next < self._end:
                top = min(self._next + room, self._end)
                out.extend(range(self._next, top))
                self._next = top
            if self._trace is not None:
                self._trace.append(("take", tuple(out), high_before))
            return out

    def put_back(self, indices: Sequence[int]) -> None:
        """Return taken-but-unprocessed indices; they are served next."""
        if not indices:
            return
        with self._lock:
            self._high.extend(indices)
            if self._trace is not None:
                self._trace.append(("put_back", tuple(indices), ()))

    def empty_hint(self) -> bool:
        """Snapshot emptiness check (racy by nature; confirm with take)."""
        with self._lock:
            return not self._high and self._next >= self._end

    def abort(self) -> None:
        with self._lock:
            self._aborted = True

    @property
    def aborted(self) -> bool:
        return self._aborted


class TransferBuffer:
    """Reusable byte buffer holding one block of framed items."""

    __slots__ = ("data", "capacity", "block_id", "item_count")

    def __init__(self, capacity: int):
        self.data = bytearray()
        self.capacity = capacity
        self.block_id = 0
        self.item_count = 0

    @property
    def used(self) -> int:
        return len(self.data)

    def begin(self, block_id: int) -> ByteWriter:
        """Reset and open the buffer for packing one block."""
        del self.data[:]
        self.block_id = block_id
        self.item_count = 0
        writer = ByteWriter(self.data, capacity=self.capacity)
        writer.write_bytes(BLOCK_HEADER.pack(block_id, 0))
        return writer

    def finalize(self) -> None:
        BLOCK_HEADER.pack_into(self.data, 0, self.block_id, self.item_count)


class BufferPool:
    """Reuses transfer buffers; tracks how many were ever allocated."""

    def __init__(self):
        self._lock = threading.Lock()
        self._free: list[TransferBuffer] = []
        self.allocated = 0

    def acquire(self, min_capacity: int) -> TransferBuffer:
        with self._lock:
            for i in range(len(self._free) - 1, -1, -1):
                if self._free[i].capacity >= min_capacity:
                    return self._free.pop(i)
            self.allocated += 1
        return TransferBuffer(min_capacity)

    def release(self, buf: TransferBuffer) -> None:
        with self._lock:
            self._free.append(buf)


def acquire_buffer(pool: BufferPool, min_capacity: int) -> TransferBuffer:
    return pool.acquire(min_capacity)


def release_buffer(pool: BufferPool, buf: TransferBuffer) -> None:
    pool.release(buf)


def pack_block(queue: WorkQueue, sequence: Sequence, buffer: TransferBuffer,
               batch: int, item_codec: Codec) -> list[int]:
    """Take up to ``batch`` indices and serialize their items into the buffer.

    Serialized sizes are only known per item, so the take can overshoot the
    buffer: excess indices go back to the queue at high priority. Returns
    the indices actually packed, in order. The buffer must have been opened
    with ``begin`` (block id already assigned).
    """
    indices = queue.take(batch)
    if not indices:
        return []
    writer = ByteWriter(buffer.data, capacity=buffer.capacity)
    packed: list[int] = []
    for pos, idx in enumerate(indices):
        item = sequence[idx]
        need = ITEM_PREFIX.size + item_codec.size(item)
        if buffer.used + need > buffer.capacity:
            if not packed:
                queue.put_back(indices[pos + 1:])
                raise ItemTooLargeError(
                    f"item {idx} needs {need} bytes, buffer capacity is "
                    f"{buffer.capacity}")
            queue.put_back(indices[pos:])
            break
        writer.write_u64(idx)
        item_codec.serialize(item, writer)
        buffer.item_count += 1
        packed.append(idx)
    buffer.finalize()
    return packed


def parse_block(blob: bytes | memoryview) -> tuple[int, int, ByteReader]:
    """Split a block payload into (block_id, item_count, reader at first item)."""
    reader = ByteReader(blob)
    block_id = reader.read_u64()
    count = reader.read_u32()
    return block_id, count, reader


@dataclass
class DeviceSpec:
    """How to bring up one device: link parameters and worker count."""

    worker_count: int = 4
    link: LinkConfig = field(default_factory=LinkConfig)


@dataclass
class DeviceState:
    """Host-side view of one connected device during a call."""

    handle: DeviceHandle
    worker_count: int
    label: str = "device/0"
    pool: BufferPool = field(default_factory=BufferPool)
    blocks_on_device: int = 0
    in_flight: dict[int, list[int]] = field(default_factory=dict)
    lost: bool = False

    @property
    def endpoint(self):
        return self.handle.endpoint


def connect_device(spec: DeviceSpec, index: int = 0,
                   trace: TraceRecorder | None = None,
                   device_pool: BufferPool | None = None) -> DeviceState:
    """Connect one device per its spec; the returned state serves one
    hybrid_for_each call (the controller shuts the device down at the end)."""
    handle = transport.connect(spec.link, spec.worker_count, trace=trace,
                               device_pool=device_pool)
    return DeviceState(handle=handle, worker_count=handle.worker_count,
                       label=f"device/{index}")


@dataclass
class RunStatistics:
    """Accounting for one hybrid_for_each call."""

    total_items: int = 0
    items_by_unit: dict[str, int] = field(default_factory=dict)
    bytes_sent: dict[str, int] = field(default_factory=dict)
    bytes_received: dict[str, int] = field(default_factory=dict)
    busy_seconds: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0
    devices_lost: list[str] = field(default_factory=list)
    unit_of_index: list | None = None

    def csv_rows(self) -> list[tuple]:
        rows = [("unit", "items", "bytes_tx", "bytes_rx", "busy_seconds")]
        for unit in sorted(self.items_by_unit):
            rows.append((unit, self.items_by_unit[unit],
                         self.bytes_sent.get(unit, 0),
                         self.bytes_received.get(unit, 0),
                         round(self.busy_seconds.get(unit, 0.0), 6)))
        return rows

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as f:
            csv.writer(f).writerows(self.csv_rows())


# ---------------------------------------------------------------------------
# Shared host pool
# ---------------------------------------------------------------------------

_pool_lock = threading.Lock()
_shared_pool: ThreadPoolExecutor | None = None


def shared_pool() -> ThreadPoolExecutor:
    """Process-wide worker pool shared by hybrid loops and the renderer.

    Sized generously past the logical core count because tasks are often
    waiting (simulated delays, transfers) rather than computing; explicit
    worker-count requests up to this size behave as asked even on small
    machines.
    """
    global _shared_pool
    with _pool_lock:
        if _shared_pool is None:
            size = min(64, max(16, 2 * (os.cpu_count() or 1)))
            _shared_pool = ThreadPoolExecutor(max_workers=size,
                                              thread_name_prefix="hybrid-pool")
        return _shared_pool


def default_host_workers() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Host worker
# ---------------------------------------------------------------------------

def run_host_worker(queue: WorkQueue, sequence, functor, chunk: int = 1,
                    unit_of_index: list | None = None,
                    unit: str = "host/0") -> int:
    """Take-and-apply loop; items transform in place, no serialization.

    Terminates on the first empty take. Returns the item count processed.
    """
    done = 0
    apply = functor.apply
    take = queue.take
    while not queue.aborted:
        indices = take(chunk)
        if not indices:
            break
        for i in indices:
            sequence[i] = apply(sequence[i])
            if unit_of_index is not None:
                unit_of_index[i] = unit
        done += len(indices)
    return done


# ---------------------------------------------------------------------------
# Device controller
# ---------------------------------------------------------------------------

class _SupportWorker(threading.Thread):
    """Runs serialization-heavy tasks so the control loop stays responsive."""

    def __init__(self, name: str, events: queue_mod.Queue):
        super().__init__(name=name, daemon=True)
        self._tasks: queue_mod.Queue = queue_mod.Queue()
        self._events = events
        self.start()

    def submit(self, fn: Callable[[], None]) -> None:
        self._tasks.put(fn)

    def stop(self) -> None:
        self._tasks.put(None)
        self.join(timeout=30.0)

    def run(self):
        while True:
            fn = self._tasks.get()
            if fn is None:
                return
            # Tasks report expected failures through controller events
            # themselves. Anything escaping would leave the controller
            # waiting for an event that never comes, so surface it as a
            # device loss rather than dying silently.
            try:
                fn()
            except Exception as exc:
                self._events.put(("lost", exc))


def run_device_controller(device: DeviceState, queue: WorkQueue,
                          sequence, functor_name: str, functor_bytes: bytes,
                          item_codec: Codec, *,
                          hot_buffers: int = 2,
                          buffer_capacity: int = DEFAULT_BUFFER_CAPACITY,
                          unit_of_index: list | None = None) -> dict:
    """Drive one device through a full call.

    Ships FUNCTOR_STATE first (inline in the message when small, as a bulk
    transfer otherwise), then keeps up to ``hot_buffers`` un-resulted blocks
    on the device: whenever the count drops below that and the queue has
    work, the next block is packed (on a support thread) and sent. Results
    scatter into the sequence by index as they arrive. When the queue is
    exhausted and every sent block has come back, the device gets
    NO_MORE_WORK and then SHUTDOWN.

    If the device dies mid-call, its un-resulted indices go back to the
    queue at high priority and the fragment reports the loss.
    """
    ep = device.endpoint
    events: queue_mod.Queue = queue_mod.Queue()
    support = _SupportWorker(f"{device.label}-support", events)
    started = time.perf_counter()
    items_done = 0
    next_block_id = 0
    packing = False
    closing = False
    fatal: Exception | None = None

    def pump_messages():
        while True:
            try:
                msg = ep.recv_message()
            except (PeerClosedError, TransportError) as exc:
                events.put(("closed" if closing else "lost", exc))
                return
            if msg.kind == MessageKind.RESULT_BLOCK:
                bid, nbytes = WORK_BLOCK_MSG.unpack(msg.payload)
                # Blob receive and deserialization happen off the control
                # loop; blob order matches message order per direction.
                def scatter(bid=bid):
                    try:
                        blob = ep.recv_blob()
                    except (PeerClosedError, TransportError) as exc:
                        events.put(("closed" if closing else "lost", exc))
                        return
                    try:
                        blk_id, count, reader = parse_block(blob)
                        if blk_id != bid:
                            raise TransportError(
                                f"result block id {blk_id} does not match "
                                f"announcement {bid}")
                        deser = item_codec.deserialize
                        for _ in range(count):
                            idx = reader.read_u64()
                            sequence[idx] = deser(reader)
                            if unit_of_index is not None:
                                unit_of_index[idx] = device.label
                    except Exception as exc:  # malformed result: drop device
                        events.put(("lost", exc))
                        return
                    events.put(("scattered", bid, count))
                support.submit(scatter)
            elif msg.kind == MessageKind.BLOCK_ACK:
                pass  # receipt confirmation; scheduling keys off results
            elif msg.kind == MessageKind.SHUTDOWN:
                events.put(("lost", TransportError(
                    f"device reported failure: {msg.payload!r}")))
                return
            # other kinds are not expected host-bound; ignore defensively

    receiver = threading.Thread(target=pump_messages,
                                name=f"{device.label}-recv", daemon=True)

    def submit_pack():
        nonlocal packing, next_block_id
        packing = True
        block_id = next_block_id
        next_block_id += 1

        def do_pack():
            buf = device.pool.acquire(buffer_capacity)
            try:
                buf.begin(block_id)
                packed = pack_block(queue, sequence, buf,
                                    device.worker_count, item_codec)
            except Exception as exc:  # item too large, codec failure
                events.put(("fatal", exc, buf))
                return
            events.put(("packed", buf, packed))
        support.submit(do_pack)

    def top_up():
        if not packing and device.blocks_on_device < hot_buffers:
            submit_pack()

    try:
        header = FUNCTOR_HEADER.pack(
            1 if len(functor_bytes) <= FUNCTOR_INLINE_MAX else 0,
            len(functor_bytes))
        w = ByteWriter()
        w.write_str(functor_name)
        w.write_bytes(header)
        if len(functor_bytes) <= FUNCTOR_INLINE_MAX:
            w.write_bytes(functor_bytes)
            ep.send_message(Message(MessageKind.FUNCTOR_STATE, bytes(w.data)))
        else:
            ep.send_message(Message(MessageKind.FUNCTOR_STATE, bytes(w.data)))
            ep.send_blob(functor_bytes)
        receiver.start()
        top_up()

        while True:
            event = events.get()
            kind = event[0]
            if kind == "packed":
                _, buf, packed = event
                packing = False
                if not packed:
                    device.pool.release(buf)
                    if device.blocks_on_device == 0:
                        break  # queue drained and nothing outstanding
                    # Blocks still out; their results re-trigger packing,
                    # and the final empty pack confirms exhaustion.
                    continue
                ep.send_message(Message(
                    MessageKind.WORK_BLOCK,
                    WORK_BLOCK_MSG.pack(buf.block_id, len(buf.data))))
                handle = ep.send_blob(buf.data)
                handle.add_done_callback(
                    lambda h, b=buf: events.put(("sent", b)))
                device.blocks_on_device += 1
                device.in_flight[buf.block_id] = packed
                top_up()
            elif kind == "sent":
                device.pool.release(event[1])
            elif kind == "scattered":
                _, bid, count = event
                items_done += count
                device.blocks_on_device -= 1
                device.in_flight.pop(bid, None)
                top_up()
            elif kind == "lost":
                device.lost = True
                stranded = [i for ids in device.in_flight.values() for i in ids]
                device.in_flight.clear()
                queue.put_back(stranded)
                break
            elif kind == "closed":
                break
            elif kind == "fatal":
                _, exc, buf = event
                device.pool.release(buf)
                fatal = exc
                queue.abort()
                device.lost = True
                break
    finally:
        closing = True
        if not device.lost:
            try:
                ep.send_message(Message(MessageKind.NO_MORE_WORK))
                ep.send_message(Message(MessageKind.SHUTDOWN))
            except (PeerClosedError, TransportError):
                device.lost = True
        support.stop()
        device.handle.close()
        if receiver.is_alive():
            receiver.join(timeout=30.0)

    fragment = {
        "unit": device.label,
        "items": items_done,
        "bytes_tx": ep.bytes_sent,
        "bytes_rx": ep.bytes_received,
        "busy_seconds": time.perf_counter() - started,
        "lost": device.lost,
        "fatal": fatal,
    }
    return fragment


# ---------------------------------------------------------------------------
# hybrid_for_each
# ---------------------------------------------------------------------------

def hybrid_for_each(sequence, functor, devices: Sequence[DeviceState] = (), *,
                    host_workers: int | None = None, chunk: int = 1,
                    buffer_capacity: int = DEFAULT_BUFFER_CAPACITY,
                    hot_buffers: int = 2,
                    pool: ThreadPoolExecutor | None = None,
                    queue_trace: list | None = None,
                    record_units: bool = False) -> RunStatistics:
    """Apply ``functor`` to every item of ``sequence``, in place, using the
    host pool and every connected device.

    Each item is transformed exactly once; items handled on the host never
    touch a serializer, items handled on a device travel as bytes both ways
    and the device's functor copy is discarded afterwards. Blocks until all
    results are back in the sequence.

    ``devices`` are consumed: their controllers end the session with
    SHUTDOWN. A device lost mid-call only costs time; its pending items are
    re-queued at high priority and the call completes on the remaining
    units.
    """
    n = len(sequence)
    stats = RunStatistics(total_items=n)
    unit_of_index = [None] * n if record_units else None
    started = time.perf_counter()

    queue = WorkQueue(n, trace=queue_trace)
    functor_bytes = b""
    item_codec = None
    if devices:
        # Encoded once, before any worker can mutate an item, so every
        # device receives the same pre-call snapshot.
        functor_bytes = encode_functor(functor)
        item_codec = functor.item_codec

    fragments: list[dict] = []
    controller_errors: list[BaseException] = []

    def controller_main(dev: DeviceState):
        try:
            fragments.append(run_device_controller(
                dev, queue, sequence, functor.wire_name, functor_bytes,
                item_codec, hot_buffers=hot_buffers,
                buffer_capacity=buffer_capacity,
                unit_of_index=unit_of_index))
        except BaseException as exc:  # keep the call joinable
            controller_errors.append(exc)
            queue.put_back([i for ids in dev.in_flight.values() for i in ids])
            dev.in_flight.clear()

    controllers = [threading.Thread(target=controller_main, args=(dev,),
                                    name=f"{dev.label}-controller")
                   for dev in devices]
    for t in controllers:
        t.start()

    k = default_host_workers() if host_workers is None else host_workers
    executor = pool or shared_pool()
    worker_results = []
    worker_errors: list[BaseException] = []

    def worker_task(label: str):
        t0 = time.perf_counter()
        try:
            count = run_host_worker(queue, sequence, functor, chunk,
                                    unit_of_index, unit=label)
        except BaseException as exc:
            # Functor failure: stop handing out work, keep the call joinable
            # so controllers wind down, then re-raise to the caller.
            queue.abort()
            worker_errors.append(exc)
            count = 0
        return label, count, time.perf_counter() - t0

    # The calling thread is host worker 0, so the call always makes progress
    # even when the shared pool is saturated by a concurrent call.
    futures = [executor.submit(worker_task, f"host/{i}") for i in range(1, k)]
    if k >= 1:
        worker_results.append(worker_task("host/0"))
    worker_results.extend(f.result() for f in futures)
    for t in controllers:
        t.join()

    # Mop up anything re-queued after the workers exited (lost devices).
    t0 = time.perf_counter()
    drained = run_host_worker(queue, sequence, functor, max(chunk, 16),
                              unit_of_index, unit="host/drain")
    if drained:
        stats.items_by_unit["host/drain"] = drained
        stats.busy_seconds["host/drain"] = time.perf_counter() - t0

    for exc in worker_errors + controller_errors:
        raise exc
    for frag in fragments:
        if frag["fatal"] is not None:
            raise frag["fatal"]

    for label, count, busy in worker_results:
        stats.items_by_unit[label] = count
        stats.busy_seconds[label] = busy
    for frag in fragments:
        stats.items_by_unit[frag["unit"]] = frag["items"]
        stats.bytes_sent[frag["unit"]] = frag["bytes_tx"]
        stats.bytes_received[frag["unit"]] = frag["bytes_rx"]
        stats.busy_seconds[frag["unit"]] = frag["busy_seconds"]
        if frag["lost"]:
            stats.devices_lost.append(frag["unit"])
    stats.wall_seconds = time.perf_counter() - started
    stats.unit_of_index = unit_of_index
    return stats
