import numpy as np
import pytest

from sfps.comm.wire import PullBody
from sfps.factors import SufficientFactorSet
from sfps.harness.data import BatchSchedule, batch_source, synth_dataset
from sfps.harness.models import deep_fc
from sfps.network import LayerParams, init_params
from sfps.solver import SolverConfig


def arrays_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)


def body_equal(a, b):
    if isinstance(a, LayerParams):
        return isinstance(b, LayerParams) and arrays_equal(a.weight, b.weight) and arrays_equal(a.bias, b.bias)
    if isinstance(a, SufficientFactorSet):
        return (
            isinstance(b, SufficientFactorSet)
            and (a.layer_id, a.clock, a.worker_id, a.scale) == (b.layer_id, b.clock, b.worker_id, b.scale)
            and arrays_equal(a.us, b.us)
            and arrays_equal(a.vs, b.vs)
            and arrays_equal(a.bias_u, b.bias_u)
        )
    if isinstance(a, PullBody):
        return (
            isinstance(b, PullBody)
            and body_equal(a.params, b.params)
            and (a.applied_through, a.min_clock, tuple(a.stamps)) == (b.applied_through, b.min_clock, tuple(b.stamps))
        )
    return a == b


def msg_equal(a, b):
    head = lambda m: (m.msg_type, m.worker_id, m.layer_id, m.clock, m.wide)
    return head(a) == head(b) and body_equal(a.body, b.body)


def states_equal(a, b):
    return set(a) == set(b) and all(
        arrays_equal(a[l].weight, b[l].weight) and arrays_equal(a[l].bias, b[l].bias) for l in a
    )


def state_rel_diff(a, b):
    from sfps.tensor import max_rel_diff

    out = 0.0
    for l in a:
        out = max(out, max_rel_diff(a[l].weight, b[l].weight))
        if a[l].bias is not None:
            out = max(out, max_rel_diff(a[l].bias, b[l].bias))
    return out


class SmallRun:
    """A tiny FC model, data and batch sources for cluster tests."""

    def __init__(self, P=4, K=4, iters=20, seed=0, widths=(16, 4), dim=8, classes=4, dtype=np.float64, n=400):
        self.P, self.K, self.iters = P, K, iters
        self.spec = deep_fc(list(widths), dim, classes)
        self.ds = synth_dataset(classes, dim, n, seed)
        self.sched = BatchSchedule(len(self.ds), P, K, seed + 1)
        self.batches = batch_source(self.ds, self.sched, dtype)
        self.state = init_params(self.spec, seed + 2, dtype)
        self.solver = SolverConfig(epsilon=0.1, momentum=0.9, weight_decay=1e-3, total_iters=max(iters, 1))

    def union(self, t):
        idx = self.sched.union_indices(t)
        return self.ds.features[idx], self.ds.labels[idx]


@pytest.fixture
def small_run():
    return SmallRun


# acceptance summary ---------------------------------------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if rep.when == "call" or failed:
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        if failed and rep.longrepr is not None:
            msg = getattr(rep.longrepr, "reprcrash", None)
            detail = (detail + "; " if detail else "") + (msg.message.splitlines()[0] if msg else "error")
        prev = _criteria.get(n)
        ok = not failed and (prev is None or prev[1])
        if prev is not None and prev[2]:
            detail = prev[2] + ("; " + detail if detail else "")
        _criteria[n] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_criteria):
        title, ok, detail = _criteria[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
