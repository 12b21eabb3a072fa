import os
import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedanomaly.transport import (AGGREGATOR, HEADER_BYTES, HUB, FrameError, FrameTooLargeError,
                                  MalformedFrameError, MsgType, PartyId, ProtocolMessage, Role,
                                  SimNetwork, TcpEndpoint, TransportError, TruncatedFrameError,
                                  UnknownMessageTypeError, UnknownPartyError,
                                  VersionMismatchError, bank, decode_frame, encode_frame,
                                  pack_payload, unpack_payload)

SID = bytes(range(16))


def test_header_size():
    assert HEADER_BYTES == 4 + 2 + 16 + 1 + 2 + 1 + 4


@pytest.mark.parametrize("mtype", list(MsgType))
def test_round_trip_each_type(mtype):
    msg = ProtocolMessage(SID, bank(3), mtype, b"payload-" + bytes([mtype]))
    frame = encode_frame(msg)
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 4
    assert decode_frame(frame) == msg


def test_zero_length_payload():
    msg = ProtocolMessage(SID, HUB, MsgType.CONTROL)
    frame = encode_frame(msg)
    assert len(frame) == HEADER_BYTES
    assert decode_frame(frame) == msg


def test_frame_layout_is_big_endian():
    frame = encode_frame(ProtocolMessage(SID, bank(258), MsgType.OT_MSG2, b"\x01\x02"))
    assert frame[4:6] == b"\x00\x01"           # version
    assert frame[6:22] == SID
    assert frame[22] == int(Role.BANK)
    assert frame[23:25] == b"\x01\x02"         # bank index 258
    assert frame[25] == int(MsgType.OT_MSG2)
    assert frame[26:30] == b"\x00\x00\x00\x02"


def test_decode_errors():
    frame = bytearray(encode_frame(ProtocolMessage(SID, HUB, MsgType.CONTROL, b"abc")))
    with pytest.raises(TruncatedFrameError):
        decode_frame(bytes(frame[:-1]))
    with pytest.raises(TruncatedFrameError):
        decode_frame(b"\x00\x00")
    with pytest.raises(MalformedFrameError):
        decode_frame(bytes(frame) + b"x")
    bad = bytearray(frame)
    bad[5] = 9
    with pytest.raises(VersionMismatchError):
        decode_frame(bytes(bad))
    bad = bytearray(frame)
    bad[25] = 200
    with pytest.raises(UnknownMessageTypeError):
        decode_frame(bytes(bad))
    with pytest.raises(FrameTooLargeError):
        decode_frame(bytes(frame), max_payload=2)
    with pytest.raises(FrameTooLargeError):
        encode_frame(ProtocolMessage(SID, HUB, MsgType.CONTROL, b"x" * 10), max_payload=5)
    with pytest.raises(FrameTooLargeError):
        decode_frame(b"\xff\xff\xff\xff" + bytes(40))


def test_hub_with_index_rejected():
    frame = bytearray(encode_frame(ProtocolMessage(SID, HUB, MsgType.CONTROL)))
    frame[24] = 1
    with pytest.raises(MalformedFrameError):
        decode_frame(bytes(frame))


def test_fuzz_never_crashes():
    rng = np.random.default_rng(0)
    valid = encode_frame(ProtocolMessage(SID, bank(1), MsgType.SHARE_FORWARD, b"x" * 20))
    for i in range(2000):
        if i % 2:
            data = rng.bytes(int(rng.integers(0, 80)))
        else:
            data = bytearray(valid)
            for _ in range(int(rng.integers(1, 4))):
                data[int(rng.integers(len(data)))] = int(rng.integers(256))
            data = bytes(data)
        try:
            decode_frame(data)
        except FrameError:
            pass


@given(st.binary(max_size=64))
def test_fuzz_payload_codec(data):
    try:
        unpack_payload(data)
    except FrameError:
        pass


@given(st.dictionaries(st.text(max_size=5), st.integers()), st.lists(st.binary(max_size=30), max_size=4))
def test_payload_round_trip(meta, parts):
    got_meta, got_parts = unpack_payload(pack_payload(meta, parts))
    assert got_meta == meta
    assert [bytes(p) for p in got_parts] == parts


def test_party_id_text():
    assert str(bank(2)) == "bank:2" and PartyId.parse("bank:2") == bank(2)
    assert PartyId.parse("HUB") == HUB and str(AGGREGATOR) == "aggregator"
    with pytest.raises(ValueError):
        PartyId.parse("mallory")


class Sender:
    def __init__(self, me, dst, n):
        self.me, self.dst, self.n = me, dst, n

    def start(self):
        return [(self.dst, ProtocolMessage(SID, self.me, MsgType.CONTROL, str(i).encode()))
                for i in range(self.n)]

    def handle(self, msg):
        return []


class Recorder:
    def __init__(self):
        self.seen = []

    def start(self):
        return []

    def handle(self, msg):
        self.seen.append((msg.sender, int(bytes(msg.payload))))
        return []


@pytest.mark.parametrize("latency", [None, (0.001, 1e-6)])
def test_sim_fifo_and_counters(latency):
    rec = Recorder()
    parties = {HUB: Sender(HUB, AGGREGATOR, 50), bank(0): Sender(bank(0), AGGREGATOR, 50),
               AGGREGATOR: rec}
    net = SimNetwork(parties, seed=3, latency=latency)
    net.run()
    for who in (HUB, bank(0)):
        assert [i for s, i in rec.seen if s == who] == list(range(50))
    frame_sizes = {str(i): len(encode_frame(ProtocolMessage(SID, HUB, MsgType.CONTROL, str(i).encode())))
                   for i in range(50)}
    assert net.counters.total_bytes == 2 * sum(frame_sizes.values())
    assert net.counters.total_frames == 100


def test_sim_interleaving_depends_on_seed_and_replays():
    def order(seed):
        rec = Recorder()
        net = SimNetwork({HUB: Sender(HUB, AGGREGATOR, 30), bank(0): Sender(bank(0), AGGREGATOR, 30),
                          AGGREGATOR: rec}, seed=seed)
        net.run()
        return rec.seen, net.counters.to_json()

    assert order(1) == order(1)
    assert order(1)[0] != order(2)[0]


def test_sim_unknown_party():
    net = SimNetwork({HUB: Sender(HUB, bank(7), 1)})
    with pytest.raises(UnknownPartyError):
        net.run()


def test_sim_rejects_spoofed_sender():
    class Spoofer(Sender):
        def start(self):
            return [(AGGREGATOR, ProtocolMessage(SID, bank(1), MsgType.CONTROL, b"0"))]

    with pytest.raises(TransportError):
        SimNetwork({HUB: Spoofer(HUB, AGGREGATOR, 1), AGGREGATOR: Recorder()}).run()


def _pair(timeout=5.0):
    addrs = {HUB: ("127.0.0.1", 0), AGGREGATOR: ("127.0.0.1", 0)}
    a = TcpEndpoint(HUB, addrs, timeout=timeout)
    addrs[HUB] = a.addresses[HUB]
    b = TcpEndpoint(AGGREGATOR, addrs, timeout=timeout)
    a.addresses[AGGREGATOR] = b.addresses[AGGREGATOR]
    return a, b


def test_tcp_round_trip_and_fifo():
    a, b = _pair()
    with a, b:
        msgs = [ProtocolMessage(SID, HUB, MsgType.MASKED_PAIR, os.urandom(i * 100)) for i in range(20)]
        for m in msgs:
            a.send(AGGREGATOR, m)
        got = [b.recv() for _ in msgs]
        assert [(g.type, bytes(g.payload)) for g in got] == [(m.type, m.payload) for m in msgs]
        assert a.counters.total_bytes == sum(len(encode_frame(m)) for m in msgs)


def test_tcp_receive_timeout():
    a, b = _pair(timeout=0.2)
    with a, b:
        with pytest.raises(TransportError):
            b.recv()


def test_tcp_abrupt_peer_close():
    addrs = {HUB: ("127.0.0.1", 0), AGGREGATOR: ("127.0.0.1", 0)}
    ep = TcpEndpoint(HUB, addrs, timeout=5.0)
    with ep:
        sock = socket.create_connection(ep.addresses[HUB])
        sock.sendall(encode_frame(ProtocolMessage(SID, AGGREGATOR, MsgType.CONTROL, b"hi"))[:10])
        sock.close()
        with pytest.raises(TransportError):
            ep.recv(timeout=3.0)


def test_tcp_garbage_is_typed_error():
    addrs = {HUB: ("127.0.0.1", 0)}
    ep = TcpEndpoint(HUB, addrs, timeout=5.0)
    with ep:
        sock = socket.create_connection(ep.addresses[HUB])
        sock.sendall(b"\x00\x00\x00\x01\x00")
        with pytest.raises(TransportError):
            ep.recv(timeout=3.0)
        sock.close()


def test_tcp_connect_failure():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        dead_port = s.getsockname()[1]
    addrs = {HUB: ("127.0.0.1", 0), AGGREGATOR: ("127.0.0.1", dead_port)}
    with TcpEndpoint(HUB, addrs, connect_timeout=1.0) as ep:
        with pytest.raises(TransportError):
            ep.send(AGGREGATOR, ProtocolMessage(SID, HUB, MsgType.CONTROL))


def test_tcp_connect_waits_for_late_peer():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    addrs = {HUB: ("127.0.0.1", 0), AGGREGATOR: ("127.0.0.1", port)}
    late = {}

    def start_later():
        threading.Event().wait(0.3)
        late["ep"] = TcpEndpoint(AGGREGATOR, dict(addrs), timeout=5.0)

    t = threading.Thread(target=start_later)
    t.start()
    with TcpEndpoint(HUB, addrs, connect_timeout=5.0) as hub_ep:
        hub_ep.send(AGGREGATOR, ProtocolMessage(SID, HUB, MsgType.CONTROL, b"hello"))
        t.join()
        with late["ep"] as agg:
            assert bytes(agg.recv().payload) == b"hello"
