import asyncio

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfps.comm.transport import LinkShape, PriorityPolicy, SimTransport, TokenBucket
from sfps.comm.vclock import run_virtual
from sfps.comm.wire import MsgType, UpdateMessage, encode
from sfps.errors import ConfigError
from sfps.network import LayerParams


class Sink:
    def __init__(self):
        self.got = []

    def deliver(self, src, msg):
        self.got.append((asyncio.get_running_loop().time(), src, msg))


def push(layer, n):
    return UpdateMessage(MsgType.PUSH_FULL, 1, layer, 1, LayerParams(np.zeros((1, n), np.float32)))


def test_one_megabyte_takes_a_second():
    msg = push(1, 250_000)  # 1 MB of payload plus framing
    nbytes = len(encode(msg))

    async def main():
        net = SimTransport(LinkShape(bandwidth=1e6, latency_ms=5))
        sink = Sink()
        net.register(0, sink)
        t = await net.send(1, 0, msg)
        net.close()
        return t, sink.got

    t, got = run_virtual(main())
    assert t >= 1.0
    assert t == pytest.approx(nbytes / 1e6 + 0.005, rel=1e-9)
    assert got[0][0] == t


def test_latency_only():
    async def main():
        net = SimTransport(LinkShape(latency_ms=40))
        net.register(0, Sink())
        t = await net.send(1, 0, UpdateMessage(MsgType.CLOCK_ADVANCE, 1, 0, 1))
        net.close()
        return t

    assert run_virtual(main()) == pytest.approx(0.04)


def order_of(policy):
    async def main():
        net = SimTransport(LinkShape(bandwidth=1000, priority=policy))
        sink = Sink()
        net.register(0, sink)
        futs = [net.send(1, 0, push(l, 10)) for l in (1, 2, 3, 4)]
        await asyncio.gather(*futs)
        net.close()
        return [m.layer_id for _, _, m in sink.got]

    return run_virtual(main())


def test_upper_layers_first():
    # all four are queued before the pump runs
    assert order_of(PriorityPolicy.UPPER_LAYERS_FIRST) == [4, 3, 2, 1]


def test_fifo():
    assert order_of(PriorityPolicy.FIFO) == [1, 2, 3, 4]


def test_bad_shape():
    with pytest.raises(ConfigError):
        LinkShape(bandwidth=-1)


def test_byte_counter():
    async def main():
        net = SimTransport()
        net.register(0, Sink())
        await net.send(1, 0, push(3, 7))
        await net.send(1, 0, UpdateMessage(MsgType.PULL_REQUEST, 1, 3, 1))
        net.close()
        return net.counter()

    c = run_virtual(main())
    assert c.floats_for_layer(3) == 7 and c.messages == 2
    assert c.total_bytes() == 20 + 8 + 28 + 20


@settings(max_examples=100, deadline=None)
@given(
    st.floats(100, 1e6),
    st.integers(0, 5000),
    st.lists(st.tuples(st.floats(0, 2), st.integers(1, 10_000)), min_size=1, max_size=20),
)
def test_bucket_never_exceeds_budget(rate, burst, reqs):
    b = TokenBucket(rate, burst)
    now = 0.0
    sent = 0
    for gap, n in reqs:
        now += gap
        done = b.take(now, n)
        assert done >= now
        sent += n
        # everything paid for by `done` fits in burst + rate * elapsed
        assert sent <= burst + rate * done + 1e-6 * sent
        now = done
