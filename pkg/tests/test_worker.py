import numpy as np
import pytest

from conftest import SmallRun, state_rel_diff, states_equal
from sfps.comm.transport import LinkShape
from sfps.errors import ConfigError
from sfps.factors import Strategy
from sfps.harness.cluster import run_inproc, train_single
from sfps.worker import Protocol, WorkerConfig, choose_strategies


def ev(events, name, layer, t):
    return next(e["t"] for e in events if (e["event"], e["layer"], e["iteration"]) == (name, layer, t))


def delays(w, t, layer, phase):
    return 0.002 + 0.001 * ((w * 7 + t * 3 + layer) % 5)


def run(r, protocol="full-ps", dwbp=True, s=0, shape=None, iters=None, d=delays):
    return run_inproc(
        r.spec, r.state, r.solver, r.P, r.K, r.batches, iters or r.iters, staleness=s,
        protocol=protocol, dwbp=dwbp, shape=shape or LinkShape(bandwidth=2e5, latency_ms=1), delays=d,
    )


def param_layers(res):
    return sorted(res.strategies)


def test_config_validation():
    with pytest.raises(ConfigError):
        WorkerConfig(0, 2, 4)
    with pytest.raises(ConfigError):
        WorkerConfig(3, 2, 4)
    with pytest.raises(ConfigError):
        WorkerConfig(1, 2, 0)


def test_forced_protocols():
    r = SmallRun(P=4, K=4, iters=1)
    for proto, st in (("full-ps", Strategy.FULL_MATRIX_PS), ("sf-ps", Strategy.SF_PS), ("sfb", Strategy.SF_BROADCAST)):
        assert set(choose_strategies(r.spec, Protocol(proto), 4, 4).values()) == {st}


@pytest.mark.parametrize("protocol", ["full-ps", "sfb"])
def test_dwbp_on_launches_during_backward(protocol):
    r = SmallRun(P=2, K=4, iters=4, widths=(16, 16, 4))
    res = run(r, protocol, dwbp=True)
    layers = param_layers(res)
    for evs in res.events.values():
        for t in range(1, r.iters + 1):
            for lo, hi in zip(layers, layers[1:]):
                assert ev(evs, "comm_start", hi, t) <= ev(evs, "compute_end", lo, t)


def test_dwbp_off_waits_for_whole_backward():
    r = SmallRun(P=2, K=4, iters=4, widths=(16, 16, 4))
    res = run(r, "full-ps", dwbp=False)
    bottom = param_layers(res)[0]
    for evs in res.events.values():
        for t in range(1, r.iters + 1):
            for l in param_layers(res):
                assert ev(evs, "comm_start", l, t) >= ev(evs, "compute_end", bottom, t)


def test_single_worker_equals_plain_sgd():
    r = SmallRun(P=1, K=8, iters=15)
    res = run(r, "full-ps")
    ref, losses = train_single(r.spec, r.state, r.solver, r.union, r.iters)
    assert state_rel_diff(res.params, ref) < 1e-12
    assert np.allclose(res.losses(), losses, rtol=1e-12)


def test_sfb_replicas_identical():
    r = SmallRun(P=3, K=4, iters=10)
    res = run(r, "sfb", s=1)
    assert res.replicas_consistent
    ws = list(res.workers.values())
    for wk in ws[1:]:
        assert states_equal(wk.params, ws[0].params)


@pytest.mark.parametrize("protocol", ["full-ps", "sf-ps", "sfb", "auto"])
def test_no_violations_under_staleness(protocol):
    r = SmallRun(P=3, K=4, iters=12)
    res = run(r, protocol, s=2)
    assert res.violations == []
    for w, l, t, mc, applied in res.server_grants:
        assert t - mc <= 3 and applied >= t - 3


def test_reports_carry_floats_and_staleness():
    r = SmallRun(P=2, K=4, iters=5)
    res = run(r, "full-ps", s=1)
    for reps in res.reports.values():
        assert [rep.iteration for rep in reps] == list(range(1, 6))
        assert all(rep.floats_sent > 0 and rep.floats_received > 0 for rep in reps)
        assert all(0 <= rep.staleness <= 2 for rep in reps)


def test_stale_run_matches_version_exact_oracle():
    # replay plain SGD where each worker's gradient uses the exact weight
    # versions its reads were granted; the cluster must agree bit for bit
    from sfps.network import LayerParams, ModelState, gradients
    from sfps.server import sum_in_worker_order
    from sfps.solver import SolverState, apply_model_update

    r = SmallRun(P=4, K=4, iters=30)
    res = run(r, "full-ps", s=1, d=delays)
    version = {(w, l, t): applied for w, l, t, _, applied in res.server_grants}
    assert any(v < t - 1 for (_, _, t), v in version.items())  # staleness was really used
    hist = [r.state.copy()]
    state, sol = r.state.copy(), SolverState.zeros_like(r.state)
    for t in range(1, r.iters + 1):
        per_worker = {}
        for w in range(1, r.P + 1):
            src = ModelState({l: hist[version.get((w, l, t), 0)][l] for l in state})
            x, y = r.batches(t, w)
            per_worker[w] = gradients(r.spec, src, x, y)[1]
        total = {
            l: sum_in_worker_order({w: LayerParams(g[l].weight / r.P, g[l].bias / r.P) for w, g in per_worker.items()})
            for l in state
        }
        apply_model_update(state, total, sol, r.solver, t - 1)
        hist.append(state.copy())
    assert states_equal(res.params, state)
