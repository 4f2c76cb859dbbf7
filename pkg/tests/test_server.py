import numpy as np
import pytest

from sfps.comm.wire import AckStatus, MsgType, UpdateMessage
from sfps.errors import ProtocolError
from sfps.factors import Strategy, SufficientFactorSet, reconstruct
from sfps.network import LayerParams, ModelState
from sfps.server import ParameterServer
from sfps.solver import SolverConfig


def make(P=2, s=0, mom=0.0, bias=False):
    st = ModelState({1: LayerParams(np.zeros((2, 3)), np.zeros(2) if bias else None)})
    return ParameterServer(st, SolverConfig(epsilon=1.0, momentum=mom, total_iters=100), P, s, {1: Strategy.FULL_MATRIX_PS})


def push(w, clock, g):
    return UpdateMessage(MsgType.PUSH_FULL, w, 1, clock, LayerParams(np.asarray(g, dtype=np.float64)))


def clock(w, c):
    return UpdateMessage(MsgType.CLOCK_ADVANCE, w, 0, c)


def pull(w, t):
    return UpdateMessage(MsgType.PULL_REQUEST, w, 1, t)


def test_single_worker_push_then_pull():
    srv = make(P=1)
    assert srv.handle_push(push(1, 1, np.ones((2, 3)))) is AckStatus.OK
    assert np.array_equal(srv.params[1].weight, -np.ones((2, 3)))
    srv.handle_clock(clock(1, 1))
    resp = srv.handle_pull(pull(1, 2))
    assert resp.msg_type is MsgType.PULL_RESPONSE
    assert resp.body.applied_through == 1 and resp.body.min_clock == 1
    assert np.array_equal(resp.body.params.weight, -np.ones((2, 3)))


def test_two_pushes_one_update():
    srv = make(P=2, mom=0.9)
    srv.handle_push(push(2, 1, np.full((2, 3), 2.0)))
    assert srv.applied_through[1] == 0 and np.all(srv.params[1].weight == 0)
    srv.handle_push(push(1, 1, np.full((2, 3), 1.0)))
    assert srv.applied_through[1] == 1
    # one momentum step on the summed gradient, not two
    assert np.array_equal(srv.params[1].weight, np.full((2, 3), -3.0))


def test_sf_push_matches_full_push():
    rng = np.random.default_rng(0)
    us, vs = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
    sfs = SufficientFactorSet(1, 1, 1, us, vs, 0.25)
    a, b = make(P=1), make(P=1)
    a.handle_push(UpdateMessage(MsgType.PUSH_SF, 1, 1, 1, sfs))
    b.handle_push(push(1, 1, reconstruct(sfs).weight))
    assert np.array_equal(a.params[1].weight, b.params[1].weight)


def test_duplicate_and_stale():
    srv = make(P=1)
    srv.handle_push(push(1, 1, np.ones((2, 3))))
    before = srv.params[1].weight.copy()
    assert srv.handle_push(push(1, 1, np.ones((2, 3)))) is AckStatus.DUPLICATE
    assert srv.duplicates == 1
    srv.handle_clock(clock(1, 1))
    srv.handle_push(push(1, 2, np.ones((2, 3))))
    assert srv.handle_push(push(1, 1, np.ones((2, 3)))) is AckStatus.STALE
    assert srv.applied_through[1] == 2
    assert not np.array_equal(before, srv.params[1].weight)


def test_bad_push():
    srv = make(P=1)
    with pytest.raises(ProtocolError):
        srv.handle_push(push(1, 1, np.ones((3, 3))))
    with pytest.raises(ProtocolError):
        srv.handle_push(UpdateMessage(MsgType.PUSH_FULL, 1, 9, 1, LayerParams(np.ones((2, 3)))))
    with pytest.raises(ProtocolError):
        srv.handle_push(push(5, 1, np.ones((2, 3))))


def test_deliver_collects_errors():
    srv = make(P=1)
    srv.deliver(1, UpdateMessage(MsgType.SF_BROADCAST, 1, 1, 1, SufficientFactorSet(1, 1, 1, np.ones((1, 2)), np.ones((1, 3)), 1.0)))
    assert srv.errors and isinstance(srv.errors[0], ProtocolError)


def test_parked_pull_released_on_clock():
    srv = make(P=2)
    for w in (1, 2):
        srv.handle_push(push(w, 1, np.ones((2, 3))))
    srv.handle_clock(clock(1, 1))
    assert srv.handle_pull(pull(1, 2)) is None
    assert srv.waiting == [(1, 1, 2)]
    out = srv.handle_clock(clock(2, 1))
    assert len(out) == 1 and out[0].clock == 2 and out[0].body.min_clock == 1
    assert srv.waiting == []


def test_stale_read_allowed_within_bound():
    srv = make(P=2, s=1)
    srv.handle_push(push(1, 1, np.ones((2, 3))))
    srv.handle_clock(clock(1, 1))
    # worker 1 at clock 1, worker 2 at 0: reading iteration 2 needs nothing yet
    resp = srv.handle_pull(pull(1, 2))
    assert resp is not None and resp.body.applied_through == 0
    assert srv.handle_pull(pull(1, 3)) is None


def test_release_order_lowest_layer_first():
    st = ModelState({l: LayerParams(np.zeros((1, 1))) for l in (1, 2, 3)})
    strat = {l: Strategy.FULL_MATRIX_PS for l in (1, 2, 3)}
    srv = ParameterServer(st, SolverConfig(total_iters=10), 1, 0, strat)
    for l in (3, 1, 2):
        assert srv.handle_pull(UpdateMessage(MsgType.PULL_REQUEST, 1, l, 2)) is None
    for l in (1, 2, 3):
        srv.handle_push(UpdateMessage(MsgType.PUSH_FULL, 1, l, 1, LayerParams(np.ones((1, 1)))))
    out = srv.handle_clock(clock(1, 1))
    assert [m.layer_id for m in out] == [1, 2, 3]


def test_snapshot_round_trip():
    srv = make(P=1, mom=0.5, bias=True)
    srv.handle_push(UpdateMessage(MsgType.PUSH_FULL, 1, 1, 1, LayerParams(np.ones((2, 3)), np.ones(2))))
    srv.handle_clock(clock(1, 1))
    snap = srv.snapshot()
    other = make(P=1, mom=0.5, bias=True)
    other.restore(snap)
    for s in (srv, other):
        s.handle_push(UpdateMessage(MsgType.PUSH_FULL, 1, 1, 2, LayerParams(np.ones((2, 3)), np.ones(2))))
    assert np.array_equal(srv.params[1].weight, other.params[1].weight)
    assert np.array_equal(srv.params[1].bias, other.params[1].bias)
