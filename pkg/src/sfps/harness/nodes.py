"""Cluster nodes over real TCP sockets.

A node is either the parameter server (id 0) or a worker (ids 1..P). Every
node listens on its manifest address and opens one outgoing connection to
each peer it sends to, so each directed pair has its own stream. A node
shuts down once the peers that talk to it have hung up: workers only close
after their final reads are answered, so the server is done when the last
worker leaves.
"""
from __future__ import annotations

import asyncio
import logging
import socket

from ..comm.transport import LinkShape, NodeAddress, SERVER_ID, TcpTransport
from ..network import ModelSpec, ModelState
from ..server import ParameterServer
from ..solver import SolverConfig
from ..worker import Protocol, Worker, WorkerConfig, choose_strategies, no_delay
from .cluster import ClusterResult, collect_result
from .config import Manifest

log = logging.getLogger(__name__)


def local_manifest(num_workers: int, host: str = "127.0.0.1") -> Manifest:
    """Manifest with OS-assigned free ports on ``host``."""
    nodes = {}
    socks = []
    try:
        for nid in range(num_workers + 1):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
            nodes[nid] = NodeAddress(nid, host, s.getsockname()[1])
    finally:
        for s in socks:
            s.close()
    return Manifest(nodes)


async def serve(
    manifest: Manifest,
    spec: ModelSpec,
    init_state: ModelState,
    solver_cfg: SolverConfig,
    batch_size: int,
    staleness: int,
    protocol: Protocol,
    shape: LinkShape | None = None,
    snapshot: dict | None = None,
    timeout: float = 60.0,
) -> ParameterServer:
    P = manifest.num_workers
    strategies = choose_strategies(spec, protocol, P, batch_size)
    net = TcpTransport(SERVER_ID, manifest.nodes, None, shape)
    server = ParameterServer(init_state, solver_cfg, P, staleness, strategies, net)
    if snapshot is not None:
        server.restore(snapshot["server"])
    net.node = server
    await net.start()
    await net.connect(manifest.worker_ids, timeout)
    await net.wait_for_peers(manifest.worker_ids, timeout)
    while True:
        try:
            await net.wait_for_disconnect(manifest.worker_ids, 0.2)
            break
        except asyncio.TimeoutError:
            if server.errors:
                await net.aclose()
                raise server.errors[0]
    await net.aclose()
    server.counter = net.counter()
    return server


async def work(
    manifest: Manifest,
    worker_id: int,
    spec: ModelSpec,
    init_state: ModelState,
    solver_cfg: SolverConfig,
    batch_size: int,
    staleness: int,
    protocol: Protocol,
    dwbp: bool,
    batches,
    first: int,
    last: int,
    delays=no_delay,
    shape: LinkShape | None = None,
    snapshot: dict | None = None,
    timeout: float = 60.0,
    on_report=None,
) -> Worker:
    P = manifest.num_workers
    strategies = choose_strategies(spec, protocol, P, batch_size)
    net = TcpTransport(worker_id, manifest.nodes, None, shape)
    cfg = WorkerConfig(worker_id, P, batch_size, staleness, protocol, dwbp)
    wk = Worker(cfg, spec, init_state, solver_cfg, strategies, net, batches, delays or no_delay, offload_compute=True)
    if snapshot is not None:
        wk.restore(snapshot["workers"][str(worker_id)])
    net.node = wk
    others = [n for n in manifest.nodes if n != worker_id]
    await net.start()
    await net.connect(others, timeout)
    await net.wait_for_peers(others, timeout)
    # drain() inside run() waits for every message peers owe us, so closing is safe
    await wk.run(first, last, on_report)
    await net.aclose()
    wk.counter = net.counter()
    return wk


def run_tcp_local(
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
    manifest: Manifest | None = None,
) -> ClusterResult:
    """Every node in this process, talking over localhost sockets."""
    manifest = manifest or local_manifest(num_workers)
    last = first + iters - 1
    strategies = choose_strategies(spec, protocol, num_workers, batch_size)

    async def main():
        loop = asyncio.get_running_loop()
        t0 = loop.time()
        srv = asyncio.ensure_future(
            serve(manifest, spec, init_state, solver_cfg, batch_size, staleness, protocol, shape, snapshot)
        )
        wks = [
            work(manifest, w, spec, init_state, solver_cfg, batch_size, staleness, protocol, dwbp,
                 batches, first, last, delays, shape, snapshot)
            for w in manifest.worker_ids
        ]
        workers = await asyncio.gather(*wks)
        server = await srv
        elapsed = loop.time() - t0
        return server, {wk.id: wk for wk in workers}, elapsed

    server, workers, elapsed = asyncio.run(main())
    counter = server.counter
    for wk in workers.values():
        counter.merge(wk.counter)
    return collect_result(strategies, server, workers, counter, iters, elapsed)
