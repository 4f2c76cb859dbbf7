"""Shaped channels and the two transports (in-process and TCP).

Every directed pair of nodes gets one :class:`Channel`. A channel queues
encoded frames, releases them at the link's byte budget (token bucket) in
priority order, and hands each frame to its sink ``latency`` seconds later.
The in-process sink decodes and delivers to the destination node; the TCP
sink writes to a socket. Time comes from the running loop, so channels work
unchanged on :class:`~sfps.comm.vclock.VirtualTimeLoop`.

Node ids: the server is 0, workers are 1..P.
"""
from __future__ import annotations

import asyncio
import enum
import heapq
import itertools
import logging
from collections import defaultdict, deque
from dataclasses import dataclass

from ..errors import ConfigError, TransportError
from .wire import AckStatus, FrameReader, MsgType, UpdateMessage, decode, encode

log = logging.getLogger(__name__)

SERVER_ID = 0


class PriorityPolicy(str, enum.Enum):
    FIFO = "fifo"
    UPPER_LAYERS_FIRST = "upper_layers_first"


@dataclass(frozen=True)
class LinkShape:
    bandwidth: float = 0.0  # bytes/second, 0 = unlimited
    latency_ms: float = 0.0
    priority: PriorityPolicy = PriorityPolicy.FIFO
    burst: int = 0  # bucket capacity in bytes

    def __post_init__(self):
        object.__setattr__(self, "priority", PriorityPolicy(self.priority))
        if self.bandwidth < 0 or self.latency_ms < 0 or self.burst < 0:
            raise ConfigError("link bandwidth, latency and burst must be non-negative")

    @property
    def latency(self) -> float:
        return self.latency_ms / 1000.0


class TokenBucket:
    """Byte budget: ``rate`` bytes/s refill, at most ``burst`` bytes banked.

    The bucket starts empty. :meth:`take` returns the time at which ``n`` bytes
    have been paid for; requests are served in call order.
    """

    def __init__(self, rate: float, burst: float = 0.0, now: float = 0.0):
        self.rate = float(rate)
        self.burst = float(burst)
        self._tokens = 0.0
        self._last = now

    def take(self, now: float, n: int) -> float:
        if self.rate <= 0:
            return now
        start = max(now, self._last)
        self._tokens = min(self.burst, self._tokens + (start - self._last) * self.rate)
        self._last = start
        if self._tokens >= n:
            self._tokens -= n
            return start
        done = start + (n - self._tokens) / self.rate
        self._tokens = 0.0
        self._last = done
        return done


class ByteCounter:
    """Monotonic tallies of model floats and frame bytes, keyed by layer and type."""

    def __init__(self):
        self.floats = defaultdict(int)  # (layer_id, msg_type) -> floats
        self.bytes = defaultdict(int)
        self.messages = 0

    def record(self, msg: UpdateMessage, nbytes: int) -> None:
        key = (msg.layer_id, msg.msg_type)
        self.floats[key] += msg.float_count
        self.bytes[key] += nbytes
        self.messages += 1

    def floats_for_layer(self, layer_id: int) -> int:
        return sum(v for (l, _), v in self.floats.items() if l == layer_id)

    def total_floats(self) -> int:
        return sum(self.floats.values())

    def total_bytes(self) -> int:
        return sum(self.bytes.values())

    def merge(self, other: "ByteCounter") -> "ByteCounter":
        for k, v in other.floats.items():
            self.floats[k] += v
        for k, v in other.bytes.items():
            self.bytes[k] += v
        self.messages += other.messages
        return self

    def by_layer(self) -> dict:
        out = defaultdict(int)
        for (l, _), v in self.floats.items():
            out[l] += v
        return dict(out)


class Channel:
    """One directed, shaped, ordered link."""

    def __init__(self, src: int, dst: int, shape: LinkShape, sink):
        self.src = src
        self.dst = dst
        self.shape = shape
        self.counter = ByteCounter()
        self._sink = sink
        self._loop = asyncio.get_running_loop()
        self._bucket = TokenBucket(shape.bandwidth, shape.burst, self._loop.time())
        self._queue = []
        self._seq = itertools.count()
        self._inflight = deque()
        self._outstanding = set()
        self._wake = asyncio.Event()
        self._closed = False
        self._pump_task = self._loop.create_task(self._pump())

    def _priority(self, msg: UpdateMessage) -> int:
        if self.shape.priority is PriorityPolicy.UPPER_LAYERS_FIRST:
            return -msg.layer_id
        return 0

    def send(self, msg: UpdateMessage) -> asyncio.Future:
        """Queue ``msg``; the returned future resolves to its delivery time."""
        if self._closed:
            raise TransportError(f"channel {self.src}->{self.dst} is closed")
        frame = encode(msg)
        fut = self._loop.create_future()
        self._outstanding.add(fut)
        fut.add_done_callback(self._outstanding.discard)
        heapq.heappush(self._queue, (self._priority(msg), next(self._seq), msg, frame, fut))
        self._wake.set()
        return fut

    async def _pump(self):
        while True:
            while not self._queue:
                self._wake.clear()
                await self._wake.wait()
            _, _, msg, frame, fut = heapq.heappop(self._queue)
            now = self._loop.time()
            done = self._bucket.take(now, len(frame))
            if done > now:
                await asyncio.sleep(done - now)
            self.counter.record(msg, len(frame))
            self._inflight.append((frame, fut))
            self._loop.call_at(done + self.shape.latency, self._deliver_next)

    def _deliver_next(self):
        frame, fut = self._inflight.popleft()
        try:
            self._sink(frame)
        except Exception as exc:  # surfaced through the handle
            if not fut.done():
                fut.set_exception(exc)
            log.exception("delivery on %d->%d failed", self.src, self.dst)
            return
        if not fut.done():
            fut.set_result(self._loop.time())

    async def drain(self) -> None:
        """Wait until everything sent so far has been delivered."""
        while self._outstanding:
            await asyncio.gather(*list(self._outstanding), return_exceptions=True)

    @property
    def idle(self) -> bool:
        return not self._queue and not self._inflight

    def close(self):
        self._closed = True
        self._pump_task.cancel()


class Transport:
    """Common bookkeeping for both transports."""

    def __init__(self, shape: LinkShape | None = None):
        self.shape = shape or LinkShape()
        self.channels = {}

    def send(self, src: int, dst: int, msg: UpdateMessage) -> asyncio.Future:
        return self.channel(src, dst).send(msg)

    def channel(self, src: int, dst: int) -> Channel:
        raise NotImplementedError

    def counter(self) -> ByteCounter:
        total = ByteCounter()
        for ch in self.channels.values():
            total.merge(ch.counter)
        return total

    async def drain(self) -> None:
        while not all(ch.idle for ch in self.channels.values()):
            for ch in list(self.channels.values()):
                await ch.drain()

    def close(self):
        for ch in self.channels.values():
            ch.close()


class SimTransport(Transport):
    """In-process links; frames are really encoded and decoded in transit."""

    def __init__(self, shape: LinkShape | None = None, link_shapes: dict | None = None):
        super().__init__(shape)
        self.nodes = {}
        self.link_shapes = dict(link_shapes or {})

    def register(self, node_id: int, node) -> None:
        self.nodes[node_id] = node

    def channel(self, src: int, dst: int) -> Channel:
        ch = self.channels.get((src, dst))
        if ch is None:
            if dst not in self.nodes:
                raise TransportError(f"no node {dst}")
            node = self.nodes[dst]

            def sink(frame, _src=src, _node=node):
                _node.deliver(_src, decode(frame))

            ch = Channel(src, dst, self.link_shapes.get((src, dst), self.shape), sink)
            self.channels[(src, dst)] = ch
        return ch


@dataclass(frozen=True)
class NodeAddress:
    node_id: int
    host: str
    port: int


class TcpTransport(Transport):
    """One long-lived connection per directed pair, opened from a manifest.

    Each node runs one :class:`TcpTransport`. Outgoing connections start with a
    hello frame (an Ack carrying the sender's id) so the accepting side knows
    which peer is on the other end.
    """

    def __init__(self, node_id: int, addresses: dict, node, shape: LinkShape | None = None):
        super().__init__(shape)
        self.node_id = node_id
        self.addresses = addresses
        self.node = node
        self._server = None
        self._writers = {}
        self._readers = []
        self._peers_seen = set()
        self._peers_gone = set()
        self._peer_event = asyncio.Event()

    async def start(self):
        me = self.addresses[self.node_id]
        self._server = await asyncio.start_server(self._accept, me.host, me.port)

    async def connect(self, peers, timeout: float = 30.0):
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        for peer in peers:
            addr = self.addresses[peer]
            while True:
                try:
                    reader, writer = await asyncio.open_connection(addr.host, addr.port)
                    break
                except OSError:
                    if loop.time() > deadline:
                        raise TransportError(f"node {self.node_id} could not reach node {peer} at {addr}") from None
                    await asyncio.sleep(0.05)
            hello = UpdateMessage(MsgType.ACK, self.node_id, 0, 0, AckStatus.HELLO)
            writer.write(encode(hello))
            await writer.drain()
            self._writers[peer] = writer

            def sink(frame, _w=writer):
                _w.write(frame)

            self.channels[(self.node_id, peer)] = Channel(self.node_id, peer, self.shape, sink)

    async def _wait_for(self, pred, timeout):
        async def _wait():
            while not pred():
                self._peer_event.clear()
                await self._peer_event.wait()

        await asyncio.wait_for(_wait(), timeout)

    async def wait_for_peers(self, peers, timeout: float = 30.0):
        """Wait until every peer in ``peers`` has connected to us."""
        await self._wait_for(lambda: set(peers) <= self._peers_seen, timeout)

    async def wait_for_disconnect(self, peers, timeout: float | None = None):
        """Wait until every peer in ``peers`` has closed its connection to us."""
        await self._wait_for(lambda: set(peers) <= self._peers_gone, timeout)

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        frames = FrameReader()
        src = None
        try:
            while True:
                chunk = await reader.read(1 << 16)
                if not chunk:
                    break
                for msg in frames.feed(chunk):
                    if src is None:
                        if msg.msg_type is not MsgType.ACK or msg.body is not AckStatus.HELLO:
                            raise TransportError("connection did not open with a hello frame")
                        src = msg.worker_id
                        self._peers_seen.add(src)
                        self._peer_event.set()
                        continue
                    self.node.deliver(src, msg)
        except asyncio.CancelledError:
            raise
        except Exception:
            log.exception("connection from node %s failed", src)
        finally:
            if src is not None:
                self._peers_gone.add(src)
                self._peer_event.set()
                lost = getattr(self.node, "peer_lost", None)
                if lost is not None:
                    lost(src)
            writer.close()

    def channel(self, src: int, dst: int) -> Channel:
        try:
            return self.channels[(src, dst)]
        except KeyError:
            raise TransportError(f"no connection {src}->{dst}") from None

    async def flush(self):
        await self.drain()
        for w in self._writers.values():
            await w.drain()

    async def aclose(self):
        await self.flush()
        self.close()
        for w in self._writers.values():
            w.close()
        if self._server is not None:
            self._server.close()
