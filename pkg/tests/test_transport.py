"""Link contract: timing model, FIFO, handshake, faults, transport parity."""

import time

import pytest

from hybridsph.functors import AffineAction
from hybridsph.runtime import DeviceSpec, connect_device, hybrid_for_each
from hybridsph.transport import (HandshakeTimeoutError, LinkConfig, Message,
                                 MessageKind, PeerClosedError, SpawnError,
                                 TraceRecorder, VersionMismatchError, connect,
                                 create_endpoint_pair, decode_message,
                                 encode_message, link_time)


class TestLinkTime:
    def test_zero_bytes_costs_latency_only(self):
        cfg = LinkConfig(bandwidth=1e9, latency=10e-6)
        assert link_time(0, cfg) == 10e-6

    def test_hand_checked_megabyte(self):
        cfg = LinkConfig(bandwidth=float(1 << 30), latency=10e-6)
        # 2^20 / 2^30 s = 976.5625 us, plus 10 us latency
        assert link_time(1 << 20, cfg) == pytest.approx(986.5625e-6, rel=1e-12)

    def test_doubling_bandwidth_halves_transfer_term(self):
        # with zero latency, link_time is the bytes/bandwidth term itself,
        # and halving by a power of two is exact in floating point
        a = LinkConfig(bandwidth=5e8, latency=0.0)
        b = LinkConfig(bandwidth=1e9, latency=0.0)
        for n in (1, 4096, 1 << 20, 999_999):
            assert link_time(n, a) == 2 * link_time(n, b)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LinkConfig(bandwidth=0)
        with pytest.raises(ValueError):
            LinkConfig(latency=-1e-9)
        with pytest.raises(ValueError):
            LinkConfig(kind="carrier-pigeon")


class TestMessageCodec:
    def test_roundtrip(self):
        msg = Message(MessageKind.WORK_BLOCK, b"payload-bytes")
        assert decode_message(encode_message(msg)) == msg

    def test_frame_layout(self):
        frame = encode_message(Message(MessageKind.SHUTDOWN, b"ab"))
        # kind u32 | length u64 | payload, little-endian
        assert frame == b"\x05\x00\x00\x00\x02\x00\x00\x00\x00\x00\x00\x00ab"


class TestInProcessPair:
    def test_message_fifo(self):
        host, dev = create_endpoint_pair(LinkConfig())
        try:
            payloads = [bytes([i]) * (i % 17) for i in range(60)]
            for p in payloads:
                host.send_message(Message(MessageKind.WORK_BLOCK, p))
            got = [dev.recv_message().payload for _ in payloads]
            assert got == payloads
        finally:
            host.close()
            dev.close()

    def test_blob_roundtrip_and_completion(self):
        host, dev = create_endpoint_pair(LinkConfig())
        try:
            handle = host.send_blob(b"x" * 1000)
            assert dev.recv_blob() == b"x" * 1000
            assert handle.wait(5.0)
            assert handle.error is None
        finally:
            host.close()
            dev.close()

    def test_zero_length_blob_completes_after_latency(self):
        cfg = LinkConfig(bandwidth=1e12, latency=0.05)
        host, dev = create_endpoint_pair(cfg)
        try:
            t0 = time.perf_counter()
            handle = host.send_blob(b"")
            assert not handle.done() or time.perf_counter() - t0 >= 0.04
            assert dev.recv_blob() == b""
            assert handle.wait(5.0)
            assert handle.completed_at - t0 >= 0.045
        finally:
            host.close()
            dev.close()

    def test_same_direction_transfers_serialize(self):
        # three transfers, each ~60 ms of simulated time
        cfg = LinkConfig(bandwidth=100_000.0, latency=0.01)
        host, dev = create_endpoint_pair(cfg)
        try:
            sizes = [5000, 5000, 5000]
            t0 = time.perf_counter()
            handles = [host.send_blob(b"z" * n) for n in sizes]
            for h in handles:
                assert h.wait(10.0)
            done = [h.completed_at for h in handles]
            assert done == sorted(done)  # completion order == submit order
            total = done[-1] - t0
            expected = sum(link_time(n, cfg) for n in sizes)
            assert total >= 0.9 * expected
            for _ in sizes:
                dev.recv_blob()
        finally:
            host.close()
            dev.close()

    def test_opposite_directions_are_full_duplex(self):
        cfg = LinkConfig(bandwidth=100_000.0, latency=0.001)
        host, dev = create_endpoint_pair(cfg)
        try:
            n = 10_000  # ~100 ms each way
            t0 = time.perf_counter()
            h1 = host.send_blob(b"a" * n)
            h2 = dev.send_blob(b"b" * n)
            assert dev.recv_blob() == b"a" * n
            assert host.recv_blob() == b"b" * n
            assert h1.wait(10.0) and h2.wait(10.0)
            elapsed = time.perf_counter() - t0
            one_way = link_time(n, cfg)
            assert elapsed < 1.8 * one_way  # far below the serialized 2x
        finally:
            host.close()
            dev.close()

    def test_recv_after_peer_close_reports_peer_closed(self):
        host, dev = create_endpoint_pair(LinkConfig())
        host.send_message(Message(MessageKind.SHUTDOWN))
        assert dev.recv_message().kind == MessageKind.SHUTDOWN
        host.close()
        with pytest.raises(PeerClosedError):
            dev.recv_message()
        dev.close()

    def test_two_pairs_no_cross_talk(self):
        a_host, a_dev = create_endpoint_pair(LinkConfig())
        b_host, b_dev = create_endpoint_pair(LinkConfig())
        try:
            a_host.send_message(Message(MessageKind.WORK_BLOCK, b"for-a"))
            b_host.send_message(Message(MessageKind.WORK_BLOCK, b"for-b"))
            assert a_dev.recv_message().payload == b"for-a"
            assert b_dev.recv_message().payload == b"for-b"
        finally:
            for ep in (a_host, a_dev, b_host, b_dev):
                ep.close()


class TestConnect:
    def test_inprocess_hello_reports_worker_count(self):
        handle = connect(LinkConfig(), worker_count=8)
        assert handle.worker_count == 8
        handle.endpoint.send_message(Message(MessageKind.SHUTDOWN))
        handle.close()

    def test_subprocess_hello_reports_worker_count(self):
        handle = connect(LinkConfig(kind="subprocess"), worker_count=3)
        assert handle.worker_count == 3
        handle.endpoint.send_message(Message(MessageKind.SHUTDOWN))
        handle.close()

    def test_version_mismatch_rejected(self):
        with pytest.raises(VersionMismatchError):
            connect(LinkConfig(), worker_count=1, _device_version=99)

    def test_missing_executable_is_spawn_failure(self):
        with pytest.raises(SpawnError):
            connect(LinkConfig(kind="subprocess"), worker_count=1,
                    worker_command=["/nonexistent/device-worker"])

    def test_unresponsive_worker_is_handshake_timeout(self):
        # a command that starts fine but never connects back
        import sys
        with pytest.raises(HandshakeTimeoutError):
            connect(LinkConfig(kind="subprocess"), worker_count=1,
                    worker_command=[sys.executable, "-c",
                                    "import time; time.sleep(5)"],
                    handshake_timeout=0.8)

    def test_worker_count_validation(self):
        with pytest.raises(ValueError):
            connect(LinkConfig(), worker_count=0)


def _golden_trace(kind: str):
    """Drive the same deterministic schedule through one transport."""
    trace = TraceRecorder()
    spec = DeviceSpec(worker_count=1, link=LinkConfig(kind=kind))
    dev = connect_device(spec, 0, trace=trace)
    items = list(range(6))
    # Lockstep: one hot buffer, no host workers, single device worker.
    hybrid_for_each(items, AffineAction(5), [dev], host_workers=0,
                    hot_buffers=1)
    assert items == [v * 5 + 2 for v in range(6)]
    return trace


class TestTransportEquivalence:
    def test_golden_trace_matches_across_transports(self):
        a = _golden_trace("in-process")
        b = _golden_trace("subprocess")
        # Byte-identical outbound message and blob streams...
        assert a.frames("send_msg") == b.frames("send_msg")
        assert a.frames("send_blob") == b.frames("send_blob")
        # ... and byte-identical inbound streams (lockstep scheduling makes
        # the ack/result interleaving deterministic too).
        assert a.frames("recv_msg") == b.frames("recv_msg")
        assert a.frames("recv_blob") == b.frames("recv_blob")
        kinds = a.message_kinds("send_msg")
        assert kinds[0] == MessageKind.HELLO
        assert kinds[1] == MessageKind.FUNCTOR_STATE
        assert kinds[-2:] == [MessageKind.NO_MORE_WORK, MessageKind.SHUTDOWN]
