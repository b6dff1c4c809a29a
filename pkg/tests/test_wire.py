import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gflsim.encoder import AggregatedContext, HiddenPacket, ModelParams
from gflsim.fedruntime.transport import SERVER, InProcTransport, SocketTransport, TransportError
from gflsim.fedruntime.wire import (
    BROADCAST_ID,
    FrameError,
    MessageKind,
    RoundMessage,
    decode_message,
    encode_message,
    read_checkpoint,
    write_checkpoint,
)


def payload_for(kind, rng, p=3, hidden=2, c=2):
    w = ModelParams.glorot(p, hidden, c, rng)
    if kind in (MessageKind.MODEL_UPLOAD, MessageKind.MODEL_BROADCAST):
        return w
    vec, jac = rng.standard_normal(c), rng.standard_normal((c, w.size))
    return HiddenPacket(vec, jac) if kind is MessageKind.HIDDEN_UPLOAD else AggregatedContext(vec, jac)


def same_payload(a, b):
    if isinstance(a, ModelParams):
        return np.array_equal(a.flat(), b.flat()) and a.shape == b.shape
    fa, fb = a.to_bytes(), b.to_bytes()
    return fa == fb


@given(st.sampled_from(list(MessageKind)), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 2), st.integers(0, 2**31))
def test_round_trip(kind, rnd, client, seed):
    m = RoundMessage(kind, rnd, None if kind is MessageKind.MODEL_BROADCAST else client, payload_for(kind, np.random.default_rng(seed)))
    back = decode_message(encode_message(m))
    assert back.kind is m.kind and back.round == m.round and back.client_id == m.client_id
    assert same_payload(back.payload, m.payload)


def test_frame_layout():
    w = ModelParams.from_flat(np.arange(3.0), 1, 1, 2)
    raw = encode_message(RoundMessage(MessageKind.MODEL_BROADCAST, 7, None, w))
    length, kind, rnd, client = struct.unpack_from("<IBII", raw)
    assert length == len(raw) - 4
    assert (kind, rnd, client) == (2, 7, BROADCAST_ID)
    assert raw[13:] == w.to_bytes()


def test_decode_errors():
    with pytest.raises(FrameError, match="incomplete frame"):
        decode_message(b"")
    good = encode_message(RoundMessage(MessageKind.MODEL_UPLOAD, 1, 2, payload_for(MessageKind.MODEL_UPLOAD, np.random.default_rng(0))))
    bad_tag = good[:4] + bytes([0x7F]) + good[5:]
    with pytest.raises(FrameError, match="unknown message kind"):
        decode_message(bad_tag)
    with pytest.raises(FrameError, match="incomplete"):
        decode_message(good[:-1])
    with pytest.raises(FrameError, match="length mismatch"):
        decode_message(good + b"\0")


def test_message_validation():
    rng = np.random.default_rng(1)
    with pytest.raises(TypeError):
        RoundMessage(MessageKind.HIDDEN_UPLOAD, 0, 1, payload_for(MessageKind.MODEL_UPLOAD, rng))
    with pytest.raises(ValueError):
        RoundMessage(MessageKind.MODEL_UPLOAD, -1, 1, payload_for(MessageKind.MODEL_UPLOAD, rng))
    with pytest.raises(ValueError):
        RoundMessage(MessageKind.MODEL_UPLOAD, 0, None, payload_for(MessageKind.MODEL_UPLOAD, rng))


def test_checkpoint_round_trip(tmp_path):
    w = ModelParams.glorot(4, 3, 2, np.random.default_rng(2))
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, w, 42)
    raw = path.read_bytes()
    assert raw[:8] == b"GFLCKPT1" and len(raw) == 16 + len(w.to_bytes())
    rnd, back = read_checkpoint(path)
    assert rnd == 42 and np.array_equal(back.flat(), w.flat())
    path.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(path)


@pytest.mark.parametrize("factory", [InProcTransport, SocketTransport])
def test_transport_routing(factory):
    rng = np.random.default_rng(3)
    tr = factory([0, 1, 2])
    try:
        up = payload_for(MessageKind.MODEL_UPLOAD, rng)
        tr.send(RoundMessage(MessageKind.MODEL_UPLOAD, 0, 1, up))
        assert tr.recv(SERVER).client_id == 1
        tr.send(RoundMessage(MessageKind.MODEL_BROADCAST, 0, None, up))
        for k in range(3):
            assert tr.recv(k).kind is MessageKind.MODEL_BROADCAST
        ctx = payload_for(MessageKind.AGG_BROADCAST, rng)
        tr.send(RoundMessage(MessageKind.AGG_BROADCAST, 0, 2, ctx))
        got = tr.recv(2)
        assert got.client_id == 2 and same_payload(got.payload, ctx)
        with pytest.raises(TransportError):
            tr.send(RoundMessage(MessageKind.AGG_BROADCAST, 0, 9, ctx))
        assert tr.sent[(SERVER, MessageKind.MODEL_BROADCAST)] == 1
        assert tr.received[(2, MessageKind.AGG_BROADCAST)] == 1
    finally:
        tr.close()


def test_inproc_empty_queue_is_an_error():
    tr = InProcTransport([0])
    with pytest.raises(TransportError):
        tr.recv(0)
    with pytest.raises(TransportError):
        tr.recv(5)


def test_socket_timeout_is_an_error():
    tr = SocketTransport([0], timeout=0.05)
    try:
        with pytest.raises(TransportError, match="timed out"):
            tr.recv(SERVER)
    finally:
        tr.close()
