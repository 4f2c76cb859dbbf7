"""Binary frame codec.

Frame layout, all integers little-endian::

    offset size field
    0      2    magic b"PD"
    2      1    version: 0x01, high bit set when scalars are 64-bit
    3      1    msg_type
    4      2    worker_id (u16)
    6      2    layer_id (u16)
    8      4    clock (u32)
    12     8    payload length (u64)
    20     n    payload

Payload bodies:

* matrix block: ``u32 rows, u32 cols`` then ``rows*cols`` scalars.
* PushFull: weight block, then an ``M x 1`` bias block when the layer has one.
* PullResponse: ``u32 applied_through, u32 min_clock, u16 n`` and ``n`` u32
  per-worker stamps, then the same blocks as PushFull.
* PushSF / SFBroadcast: ``u32 K, u32 M, u32 N, u8 has_bias, f64 scale``, then
  ``K*M`` u-scalars, ``K*N`` v-scalars and ``M`` bias scalars if present.
* Ack: one status byte. Checkpoint: opaque bytes.
* PullRequest and ClockAdvance carry no payload.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import EncodingError, NeedMoreBytes, ProtocolError
from ..factors import SufficientFactorSet
from ..network import LayerParams

MAGIC = b"PD"
VERSION = 0x01
WIDE_FLAG = 0x80
HEADER = struct.Struct("<2sBBHHIQ")
HEADER_LEN = HEADER.size
MAX_PAYLOAD = (1 << 63) - 1

_MAT = struct.Struct("<II")
_PULL = struct.Struct("<IIH")
_SF = struct.Struct("<IIIBd")


class MsgType(enum.IntEnum):
    PUSH_FULL = 1
    PUSH_SF = 2
    PULL_REQUEST = 3
    PULL_RESPONSE = 4
    SF_BROADCAST = 5
    CLOCK_ADVANCE = 6
    ACK = 7
    CHECKPOINT = 8


class AckStatus(enum.IntEnum):
    OK = 0
    DUPLICATE = 1
    STALE = 2
    HELLO = 3


@dataclass(frozen=True)
class PullBody:
    params: LayerParams
    applied_through: int
    min_clock: int
    stamps: tuple = ()


@dataclass(frozen=True)
class UpdateMessage:
    msg_type: MsgType
    worker_id: int
    layer_id: int = 0
    clock: int = 0
    body: object = None
    wide: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        expected = _BODY_TYPES[self.msg_type]
        if expected is None:
            if self.body is not None:
                raise EncodingError(f"{self.msg_type.name} carries no payload")
        elif not isinstance(self.body, expected):
            raise EncodingError(f"{self.msg_type.name} needs a {expected.__name__} body")
        for name, v, bits in (("worker_id", self.worker_id, 16), ("layer_id", self.layer_id, 16), ("clock", self.clock, 32)):
            if not 0 <= v < (1 << bits):
                raise EncodingError(f"{name}={v} does not fit in {bits} bits")
        arr = _first_array(self.body)
        if arr is not None:
            object.__setattr__(self, "wide", arr.dtype == np.float64)

    @property
    def float_count(self) -> int:
        return payload_floats(self)


_BODY_TYPES = {
    MsgType.PUSH_FULL: LayerParams,
    MsgType.PUSH_SF: SufficientFactorSet,
    MsgType.PULL_REQUEST: None,
    MsgType.PULL_RESPONSE: PullBody,
    MsgType.SF_BROADCAST: SufficientFactorSet,
    MsgType.CLOCK_ADVANCE: None,
    MsgType.ACK: AckStatus,
    MsgType.CHECKPOINT: bytes,
}


def _first_array(body):
    if isinstance(body, LayerParams):
        return body.weight
    if isinstance(body, PullBody):
        return body.params.weight
    if isinstance(body, SufficientFactorSet):
        return body.us
    return None


def payload_floats(msg: UpdateMessage) -> int:
    """Number of model scalars a message carries (headers excluded)."""
    b = msg.body
    if isinstance(b, LayerParams):
        return sum(a.size for a in b.arrays())
    if isinstance(b, PullBody):
        return sum(a.size for a in b.params.arrays())
    if isinstance(b, SufficientFactorSet):
        return b.float_count
    return 0


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def _mat_bytes(a: np.ndarray, dt: np.dtype) -> bytes:
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    return _MAT.pack(*a.shape) + np.ascontiguousarray(a, dtype=dt).tobytes()


def _params_bytes(p: LayerParams, dt) -> bytes:
    out = _mat_bytes(p.weight, dt)
    if p.bias is not None:
        out += _mat_bytes(p.bias, dt)
    return out


def encode_payload(msg: UpdateMessage) -> bytes:
    dt = _le(np.float64 if msg.wide else np.float32)
    b = msg.body
    t = msg.msg_type
    if t is MsgType.PUSH_FULL:
        return _params_bytes(b, dt)
    if t is MsgType.PULL_RESPONSE:
        head = _PULL.pack(b.applied_through, b.min_clock, len(b.stamps))
        head += struct.pack(f"<{len(b.stamps)}I", *b.stamps)
        return head + _params_bytes(b.params, dt)
    if t in (MsgType.PUSH_SF, MsgType.SF_BROADCAST):
        head = _SF.pack(b.K, b.M, b.N, int(b.bias_u is not None), float(b.scale))
        parts = [head, np.ascontiguousarray(b.us, dtype=dt).tobytes(), np.ascontiguousarray(b.vs, dtype=dt).tobytes()]
        if b.bias_u is not None:
            parts.append(np.ascontiguousarray(b.bias_u, dtype=dt).tobytes())
        return b"".join(parts)
    if t is MsgType.ACK:
        return bytes([int(b)])
    if t is MsgType.CHECKPOINT:
        return bytes(b)
    return b""


def encode(msg: UpdateMessage) -> bytes:
    payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise EncodingError("payload exceeds 2^63 bytes")
    version = VERSION | (WIDE_FLAG if msg.wide else 0)
    return HEADER.pack(MAGIC, version, int(msg.msg_type), msg.worker_id, msg.layer_id, msg.clock, len(payload)) + payload


class _Cursor:
    def __init__(self, buf: memoryview, dt: np.dtype):
        self.buf = buf
        self.pos = 0
        self.dt = dt

    def unpack(self, st: struct.Struct):
        if self.pos + st.size > len(self.buf):
            raise ProtocolError("payload truncated")
        vals = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return vals

    def array(self, n: int) -> np.ndarray:
        nbytes = n * self.dt.itemsize
        if self.pos + nbytes > len(self.buf):
            raise ProtocolError("payload truncated")
        a = np.frombuffer(self.buf, dtype=self.dt, count=n, offset=self.pos).astype(self.dt.newbyteorder("="))
        self.pos += nbytes
        return a

    def matrix(self) -> np.ndarray:
        rows, cols = self.unpack(_MAT)
        return self.array(rows * cols).reshape(rows, cols)

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def _read_params(cur: _Cursor) -> LayerParams:
    w = cur.matrix()
    bias = None
    if not cur.done:
        bias = cur.matrix()
        if bias.shape != (w.shape[0], 1):
            raise ProtocolError("bias block must be M x 1")
        bias = bias.reshape(-1)
    if not cur.done:
        raise ProtocolError("trailing bytes in parameter payload")
    return LayerParams(w, bias)


def decode_payload(msg_type: MsgType, worker_id: int, layer_id: int, clock: int, payload, wide: bool):
    dt = _le(np.float64 if wide else np.float32)
    cur = _Cursor(memoryview(payload), dt)
    if msg_type is MsgType.PUSH_FULL:
        return _read_params(cur)
    if msg_type is MsgType.PULL_RESPONSE:
        applied, mc, n = cur.unpack(_PULL)
        stamps = cur.unpack(struct.Struct(f"<{n}I")) if n else ()
        return PullBody(_read_params(cur), applied, mc, tuple(stamps))
    if msg_type in (MsgType.PUSH_SF, MsgType.SF_BROADCAST):
        K, M, N, has_bias, scale = cur.unpack(_SF)
        us = cur.array(K * M).reshape(K, M)
        vs = cur.array(K * N).reshape(K, N)
        bias_u = cur.array(M) if has_bias else None
        if not cur.done:
            raise ProtocolError("trailing bytes in factor payload")
        return SufficientFactorSet(layer_id, clock, worker_id, us, vs, scale, bias_u)
    if msg_type is MsgType.ACK:
        if len(payload) != 1:
            raise ProtocolError("ack payload must be one byte")
        return AckStatus(payload[0])
    if msg_type is MsgType.CHECKPOINT:
        return bytes(payload)
    if len(payload):
        raise ProtocolError(f"{msg_type.name} must have an empty payload")
    return None


def decode_from(data, offset: int = 0) -> tuple[UpdateMessage, int]:
    """Decode one frame starting at ``offset``; returns ``(message, frame_length)``.

    Raises :class:`NeedMoreBytes` if the frame is incomplete.
    """
    avail = len(data) - offset
    if avail < HEADER_LEN:
        raise NeedMoreBytes(HEADER_LEN - avail)
    magic, version, mtype, worker, layer, clock, plen = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version & ~WIDE_FLAG != VERSION:
        raise ProtocolError(f"unsupported version byte 0x{version:02x}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    total = HEADER_LEN + plen
    if avail < total:
        raise NeedMoreBytes(total - avail)
    payload = memoryview(data)[offset + HEADER_LEN : offset + total]
    wide = bool(version & WIDE_FLAG)
    body = decode_payload(mtype, worker, layer, clock, payload, wide)
    msg = UpdateMessage(mtype, worker, layer, clock, body)
    if _first_array(body) is None:
        object.__setattr__(msg, "wide", wide)
    return msg, total


def decode(data) -> UpdateMessage:
    msg, n = decode_from(data)
    if n != len(data):
        raise ProtocolError(f"{len(data) - n} trailing bytes after frame")
    return msg


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list:
        self._buf.extend(chunk)
        out = []
        pos = 0
        while True:
            try:
                msg, n = decode_from(self._buf, pos)
            except NeedMoreBytes:
                break
            out.append(msg)
            pos += n
        del self._buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
