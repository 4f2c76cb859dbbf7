import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import msg_equal
from sfps.comm.wire import (
    HEADER_LEN,
    AckStatus,
    FrameReader,
    MsgType,
    PullBody,
    UpdateMessage,
    decode,
    decode_from,
    encode,
)
from sfps.errors import EncodingError, NeedMoreBytes, ProtocolError
from sfps.factors import SufficientFactorSet
from sfps.network import LayerParams


def test_clock_advance_is_header_only():
    frame = encode(UpdateMessage(MsgType.CLOCK_ADVANCE, 3, 0, 7))
    assert HEADER_LEN == 20 and len(frame) == 20
    assert frame[:2] == b"PD" and frame[2] == 0x01 and frame[3] == MsgType.CLOCK_ADVANCE
    assert int.from_bytes(frame[12:20], "little") == 0


def test_push_full_payload_size():
    w = np.arange(4, dtype=np.float32).reshape(2, 2)
    frame = encode(UpdateMessage(MsgType.PUSH_FULL, 1, 2, 5, LayerParams(w)))
    assert len(frame) - HEADER_LEN == 24
    assert int.from_bytes(frame[12:20], "little") == 24
    assert msg_equal(decode(frame), UpdateMessage(MsgType.PUSH_FULL, 1, 2, 5, LayerParams(w)))


def test_wide_flag():
    w = np.ones((2, 2))
    frame = encode(UpdateMessage(MsgType.PUSH_FULL, 1, 2, 5, LayerParams(w)))
    assert frame[2] == 0x81 and len(frame) == HEADER_LEN + 8 + 32
    assert decode(frame).body.weight.dtype == np.float64


def test_bad_magic():
    frame = bytearray(encode(UpdateMessage(MsgType.CLOCK_ADVANCE, 1, 0, 1)))
    frame[0:2] = b"XX"
    with pytest.raises(ProtocolError):
        decode(bytes(frame))


def test_bad_version_and_type():
    frame = bytearray(encode(UpdateMessage(MsgType.CLOCK_ADVANCE, 1, 0, 1)))
    frame[2] = 0x02
    with pytest.raises(ProtocolError):
        decode(bytes(frame))
    frame[2] = 0x01
    frame[3] = 99
    with pytest.raises(ProtocolError):
        decode(bytes(frame))


def test_short_input_needs_more():
    frame = encode(UpdateMessage(MsgType.PUSH_FULL, 1, 2, 5, LayerParams(np.ones((3, 3), np.float32))))
    with pytest.raises(NeedMoreBytes):
        decode_from(frame[:10])
    with pytest.raises(NeedMoreBytes):
        decode_from(frame[:-1])


def test_out_of_range_fields():
    with pytest.raises(EncodingError):
        UpdateMessage(MsgType.CLOCK_ADVANCE, 70_000)
    with pytest.raises(EncodingError):
        UpdateMessage(MsgType.CLOCK_ADVANCE, 1, 0, -1)
    with pytest.raises(EncodingError):
        UpdateMessage(MsgType.PUSH_FULL, 1, 1, 1, None)


def test_trailing_bytes_rejected():
    frame = encode(UpdateMessage(MsgType.CLOCK_ADVANCE, 1, 0, 1))
    with pytest.raises(ProtocolError):
        decode(frame + b"\0")


def test_frame_reader_handles_split_stream():
    msgs = [
        UpdateMessage(MsgType.ACK, 0, 1, 1, AckStatus.OK),
        UpdateMessage(MsgType.PULL_REQUEST, 2, 3, 4),
        UpdateMessage(MsgType.PUSH_FULL, 2, 3, 4, LayerParams(np.ones((2, 3), np.float32), np.zeros(2, np.float32))),
    ]
    stream = b"".join(encode(m) for m in msgs)
    r = FrameReader()
    got = []
    for i in range(0, len(stream), 7):
        got += r.feed(stream[i : i + 7])
    assert r.pending == 0
    assert len(got) == 3 and all(msg_equal(a, b) for a, b in zip(got, msgs))


def _arr(rng, shape, dt):
    return rng.standard_normal(shape).astype(dt)


@st.composite
def messages(draw):
    dt = draw(st.sampled_from([np.float32, np.float64]))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    kind = draw(st.sampled_from(list(MsgType)))
    wid = draw(st.integers(0, 65535))
    lid = draw(st.integers(0, 65535))
    clk = draw(st.integers(0, 2**32 - 1))
    M, N, K = draw(st.integers(1, 6)), draw(st.integers(1, 6)), draw(st.integers(0, 5))
    bias = draw(st.booleans())
    params = LayerParams(_arr(rng, (M, N), dt), _arr(rng, (M,), dt) if bias else None)
    body = {
        MsgType.PUSH_FULL: params,
        MsgType.PULL_RESPONSE: PullBody(params, draw(st.integers(0, 1000)), draw(st.integers(0, 1000)),
                                        tuple(draw(st.lists(st.integers(0, 2**32 - 1), max_size=4)))),
        MsgType.PUSH_SF: SufficientFactorSet(lid, clk, wid, _arr(rng, (K, M), dt), _arr(rng, (K, N), dt),
                                             draw(st.floats(-1e3, 1e3)), _arr(rng, (M,), dt) if bias else None),
        MsgType.ACK: draw(st.sampled_from(list(AckStatus))),
        MsgType.CHECKPOINT: draw(st.binary(max_size=64)),
    }
    body[MsgType.SF_BROADCAST] = body[MsgType.PUSH_SF]
    return UpdateMessage(kind, wid, lid, clk, body.get(kind))


@settings(max_examples=200, deadline=None)
@given(messages())
def test_round_trip(m):
    frame = encode(m)
    back = decode(frame)
    assert msg_equal(back, m)
    assert encode(back) == frame
