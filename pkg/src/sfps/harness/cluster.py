"""In-process clusters on virtual time, and the single-process reference run."""
from __future__ import annotations

import asyncio
from dataclasses import dataclass, field

import numpy as np

from ..comm.transport import LinkShape, SimTransport, ByteCounter, SERVER_ID
from ..comm.vclock import SimulationDeadlock, run_virtual
from ..factors import Strategy
from ..network import ModelSpec, ModelState, gradients
from ..server import ParameterServer
from ..solver import SolverConfig, SolverState, apply_model_update
from ..worker import Protocol, Worker, WorkerConfig, choose_strategies, no_delay


@dataclass
class ClusterResult:
    params: ModelState
    strategies: dict
    reports: dict  # worker_id -> [IterationReport]
    events: dict  # worker_id -> [event dict]
    counter: ByteCounter
    per_iteration_floats: dict  # layer_id -> floats per iteration (cluster)
    server_grants: list
    worker_grants: dict
    violations: list
    elapsed: float
    server: ParameterServer | None = None
    workers: dict = field(default_factory=dict)
    replicas_consistent: bool = True

    def losses(self) -> list:
        """Mean loss over workers at each iteration."""
        its = sorted({r.iteration for reps in self.reports.values() for r in reps})
        out = []
        for t in its:
            vals = [r.loss for reps in self.reports.values() for r in reps if r.iteration == t]
            out.append(float(np.mean(vals)))
        return out


def run_inproc(
    spec: ModelSpec,
    init_state: ModelState,
    solver_cfg: SolverConfig,
    num_workers: int,
    batch_size: int,
    batches,
    iters: int,
    staleness: int = 0,
    protocol: Protocol = Protocol.AUTO,
    dwbp: bool = True,
    shape: LinkShape | None = None,
    delays=no_delay,
    first: int = 1,
    snapshot: dict | None = None,
) -> ClusterResult:
    """Run iterations ``first..first+iters-1`` of a P-worker cluster on virtual time."""
    strategies = choose_strategies(spec, protocol, num_workers, batch_size)

    async def main():
        net = SimTransport(shape)
        server = ParameterServer(init_state, solver_cfg, num_workers, staleness, strategies, net)
        net.register(SERVER_ID, server)
        nodes.append(server)
        workers = {}
        for w in range(1, num_workers + 1):
            cfg = WorkerConfig(w, num_workers, batch_size, staleness, protocol, dwbp)
            wk = Worker(cfg, spec, init_state, solver_cfg, strategies, net, batches, delays)
            net.register(w, wk)
            nodes.append(wk)
            workers[w] = wk
        if snapshot is not None:
            server.restore(snapshot["server"])
            for w, wk in workers.items():
                wk.restore(snapshot["workers"][str(w)])
        loop = asyncio.get_running_loop()
        t0 = loop.time()
        last = first + iters - 1
        await asyncio.gather(*(wk.run(first, last) for wk in workers.values()))
        elapsed = loop.time() - t0
        # let trailing acks land so tallies are complete
        await net.drain()
        net.close()
        return net, server, workers, elapsed

    nodes = []

    try:
        net, server, workers, elapsed = run_virtual(main())
    except SimulationDeadlock:
        raise_node_errors(nodes)
        raise
    return collect_result(strategies, server, workers, net.counter(), iters, elapsed)


def raise_node_errors(nodes) -> None:
    """Re-raise the first error a node swallowed while handling a message."""
    for node in nodes:
        if node.errors:
            raise node.errors[0]


def collect_result(strategies, server, workers, counter, iters, elapsed) -> ClusterResult:
    params = ModelState()
    for l, st in strategies.items():
        params[l] = (server.params[l] if st.uses_server else workers[1].params[l]).copy()
    consistent = True
    for l, st in strategies.items():
        if not st.uses_server:
            ref = workers[1].params[l]
            for wk in workers.values():
                other = wk.params[l]
                if not np.array_equal(ref.weight, other.weight) or (
                    ref.bias is not None and not np.array_equal(ref.bias, other.bias)
                ):
                    consistent = False
    per_iter = {l: v // iters for l, v in counter.by_layer().items() if l != 0}
    violations = [(w, *v) for w, wk in workers.items() for v in wk.violations]
    return ClusterResult(
        params=params,
        strategies=strategies,
        reports={w: wk.reports for w, wk in workers.items()},
        events={w: wk.events for w, wk in workers.items()},
        counter=counter,
        per_iteration_floats=per_iter,
        server_grants=list(server.grants),
        worker_grants={w: list(wk.grants) for w, wk in workers.items()},
        violations=violations,
        elapsed=elapsed,
        server=server,
        workers=workers,
        replicas_consistent=consistent,
    )


def cluster_snapshot(result: ClusterResult) -> dict:
    return {
        "server": result.server.snapshot(),
        "workers": {str(w): wk.snapshot() for w, wk in result.workers.items()},
    }


def train_single(
    spec: ModelSpec,
    init_state: ModelState,
    solver_cfg: SolverConfig,
    union_batches,
    iters: int,
    first: int = 1,
    solver_state: SolverState | None = None,
):
    """Plain SGD loop. ``union_batches(t) -> (x, labels)``; returns ``(state, losses)``."""
    state = init_state.copy()
    solver = solver_state.copy() if solver_state else SolverState.zeros_like(state)
    losses = []
    for t in range(first, first + iters):
        x, y = union_batches(t)
        loss, grads = gradients(spec, state, x.astype(next(iter(state.values())).weight.dtype, copy=False), y)
        apply_model_update(state, grads, solver, solver_cfg, t - 1)
        losses.append(loss)
    return state, losses


def strategy_names(strategies: dict) -> dict:
    return {l: Strategy(s).value for l, s in strategies.items()}
