"""Worker node: forward, top-down backward, and per-layer communication.

With wait-free backpropagation on, each parameterized layer's communication
task is launched the moment its backward step finishes, so the pushes of upper
layers travel while lower layers are still computing. The next iteration only
waits for a layer's fresh parameters right before its forward step.

Layers using sufficient-factor broadcast never touch the server: every worker
keeps a replica of those layers, exchanges factor sets with its peers, and
applies the same worker-ordered sum with its own solver state. A replicated
clock table gates those layers the way the server gates pulls.
"""
from __future__ import annotations

import asyncio
import enum
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .consistency import ClockTable
from .errors import ConfigError, ProtocolError, TransportError
from .factors import Strategy, decompose, reconstruct, sacp_decide
from .network import (
    ForwardTrace,
    LayerKind,
    LayerParams,
    ModelSpec,
    ModelState,
    backward_layer,
    check_batch,
    forward_layer,
)
from .server import sum_in_worker_order
from .solver import SolverConfig, SolverState, apply_update
from .comm.transport import SERVER_ID
from .comm.wire import MsgType, UpdateMessage

log = logging.getLogger(__name__)


class Protocol(str, enum.Enum):
    AUTO = "auto"
    FULL_PS = "full-ps"
    SF_PS = "sf-ps"
    SFB = "sfb"


@dataclass(frozen=True)
class WorkerConfig:
    worker_id: int
    num_workers: int
    batch_size: int
    staleness: int = 0
    protocol: Protocol = Protocol.AUTO
    dwbp: bool = True

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        if not 1 <= self.worker_id <= self.num_workers:
            raise ConfigError(f"worker id {self.worker_id} outside 1..{self.num_workers}")
        if self.batch_size <= 0:
            raise ConfigError("batch size must be positive")
        if self.staleness < 0:
            raise ConfigError("staleness must be >= 0")


def choose_strategies(spec: ModelSpec, protocol: Protocol, P: int, K: int) -> dict:
    """Per-layer strategy. Forcing only affects fully-connected layers."""
    protocol = Protocol(protocol)
    out = {}
    for prof in spec.profiles:
        if not prof.kind.parameterized:
            continue
        if prof.kind is not LayerKind.FULLY_CONNECTED or protocol is Protocol.FULL_PS:
            out[prof.layer_id] = Strategy.FULL_MATRIX_PS
        elif protocol is Protocol.SF_PS:
            out[prof.layer_id] = Strategy.SF_PS
        elif protocol is Protocol.SFB:
            out[prof.layer_id] = Strategy.SF_BROADCAST
        else:
            out[prof.layer_id] = sacp_decide(prof, P, K)
    return out


class TaskState(str, enum.Enum):
    PENDING = "pending"
    SENT = "sent"
    UPDATED = "updated"


@dataclass
class LayerCommTask:
    layer_id: int
    clock: int
    strategy: Strategy
    state: TaskState = TaskState.PENDING
    comm_start: float | None = None
    comm_end: float | None = None

    def advance(self, new: TaskState, now: float) -> None:
        order = [TaskState.PENDING, TaskState.SENT, TaskState.UPDATED]
        if order.index(new) != order.index(self.state) + 1:
            raise ProtocolError(f"layer task {self.layer_id}@{self.clock}: {self.state.value} -> {new.value}")
        self.state = new
        if new is TaskState.SENT:
            self.comm_start = now
        else:
            self.comm_end = now


@dataclass
class IterationReport:
    worker_id: int
    iteration: int
    loss: float
    start: float
    end: float
    floats_sent: int = 0
    floats_received: int = 0
    staleness: int = 0
    strategies: dict = field(default_factory=dict)


def no_delay(worker_id: int, iteration: int, layer_id: int, phase: str) -> float:
    return 0.0


class Worker:
    """One data-parallel worker.

    ``batches(t, worker_id) -> (x, labels)`` supplies the local batch.
    ``delays(worker_id, t, layer_id, phase)`` returns seconds of extra compute
    time to spend on a layer step (``phase`` is ``"forward"`` or
    ``"backward"``); on a virtual-time loop this is how compute cost is modeled.
    """

    def __init__(
        self,
        cfg: WorkerConfig,
        spec: ModelSpec,
        state: ModelState,
        solver_cfg: SolverConfig,
        strategies: dict,
        transport,
        batches,
        delays=no_delay,
        offload_compute: bool = False,
    ):
        self.cfg = cfg
        self.id = cfg.worker_id
        self.P = cfg.num_workers
        self.spec = spec
        self.params = state.copy()
        self.solver_cfg = solver_cfg
        self.strategies = dict(strategies)
        self.transport = transport
        self.batches = batches
        self.delays = delays
        self.offload_compute = offload_compute
        self.ps_layers = sorted(l for l, s in self.strategies.items() if s.uses_server)
        self.sfb_layers = sorted(l for l, s in self.strategies.items() if not s.uses_server)
        self.peers = [w for w in range(1, self.P + 1) if w != self.id]
        # ready_for[l] = latest iteration whose read of layer l has been satisfied
        self.ready_for = {l: 1 for l in self.strategies}
        self.versions = {l: 0 for l in self.strategies}
        self.sfb_solver = SolverState.zeros_like(ModelState({l: self.params[l] for l in self.sfb_layers}))
        self.sfb_pending = defaultdict(dict)  # (layer, clock) -> {worker: SufficientFactorSet}
        self.replica = ClockTable(range(1, self.P + 1), cfg.staleness, self.sfb_layers)
        self.clock = 0
        self.events = []
        self.reports = []
        self.violations = []
        self.grants = []
        self.tasks = []
        # (iteration, layer, direction) -> floats, direction in push/pull/bcast_out/bcast_in
        self.floats = defaultdict(int)
        self._pull_origin = {}
        self.unacked = 0
        self.finished = False
        self._last = 0
        self.read_min_clock = {l: 0 for l in self.ps_layers}
        self._comm = set()
        self._changed = None
        self._errors = []

    # time & signalling -----------------------------------------------

    @property
    def now(self) -> float:
        return asyncio.get_running_loop().time()

    def _log(self, event: str, layer: int, t: int) -> None:
        self.events.append({"t": self.now, "event": event, "layer": layer, "iteration": t, "worker": self.id})

    def _notify(self) -> None:
        if self._changed is not None:
            self._changed.set()
            self._changed = asyncio.Event()

    async def _wait_until(self, pred) -> None:
        while not pred():
            if self._errors:
                raise self._errors[0]
            if self._changed is None:
                self._changed = asyncio.Event()
            await self._changed.wait()
        if self._errors:
            raise self._errors[0]

    async def _compute(self, fn, *args):
        if self.offload_compute:
            return await asyncio.to_thread(fn, *args)
        return fn(*args)

    async def _pause(self, t: int, layer: int, phase: str) -> None:
        d = self.delays(self.id, t, layer, phase)
        if d > 0:
            await asyncio.sleep(d)

    def _send(self, dst: int, msg: UpdateMessage):
        try:
            return self.transport.send(self.id, dst, msg)
        except TransportError as exc:
            self._errors.append(exc)
            raise

    # readiness ---------------------------------------------------------

    def layer_ready(self, layer: int, t: int) -> bool:
        if self.strategies[layer].uses_server:
            return self.ready_for[layer] >= t
        return self.versions[layer] >= t - self.cfg.staleness - 1

    def sfb_read_granted(self, t: int) -> bool:
        if not self.sfb_layers:
            return True
        g = self.replica.try_read(self.id, t)
        return g.granted

    # message handling --------------------------------------------------

    def deliver(self, src: int, msg: UpdateMessage) -> None:
        try:
            self._handle(src, msg)
        except Exception as exc:
            self._errors.append(exc)
            log.exception("worker %d failed handling %s", self.id, msg.msg_type.name)
        self._notify()

    def peer_lost(self, src: int) -> None:
        """A connection into this worker closed; fatal only if we still need that node."""
        if src == SERVER_ID:
            needed = bool(self.ps_layers)
        else:
            needed = bool(self.sfb_layers) and self.replica.clock_of(src) < self._last
        if needed and not self.finished:
            self._errors.append(TransportError(f"worker {self.id}: node {src} went away mid-run"))
            self._notify()

    @property
    def errors(self) -> list:
        return list(self._errors)

    def _handle(self, src: int, msg: UpdateMessage) -> None:
        t = msg.msg_type
        if t is MsgType.PULL_RESPONSE:
            self._on_pull_response(msg)
        elif t is MsgType.SF_BROADCAST:
            if src == SERVER_ID or msg.layer_id not in self.sfb_layers:
                raise ProtocolError(f"unexpected factor broadcast for layer {msg.layer_id}")
            self._add_sfb(msg.body)
        elif t is MsgType.CLOCK_ADVANCE:
            self.replica.advance(msg.worker_id, msg.clock)
        elif t is MsgType.ACK:
            if src == SERVER_ID:
                self.unacked -= 1
        else:
            raise ProtocolError(f"worker cannot handle {t.name}")

    def _on_pull_response(self, msg: UpdateMessage) -> None:
        layer, t, body = msg.layer_id, msg.clock, msg.body
        if t < self.ready_for[layer]:
            raise ProtocolError(f"pull response for layer {layer} went backwards to {t}")
        # swap in new arrays: a backward step still in flight keeps the old ones
        dt = self.params[layer].weight.dtype
        fresh = body.params
        self.params[layer] = LayerParams(
            fresh.weight.astype(dt, copy=False), None if fresh.bias is None else fresh.bias.astype(dt, copy=False)
        )
        self.ready_for[layer] = max(self.ready_for[layer], t)
        self.versions[layer] = body.applied_through
        self.read_min_clock[layer] = body.min_clock
        origin = self._pull_origin.pop((layer, t), t - 1)
        self.floats[(origin, layer, "pull")] += msg.float_count
        needed = t - self.cfg.staleness - 1
        self.grants.append((layer, t, body.min_clock, body.applied_through))
        if body.applied_through < needed or min(body.stamps, default=needed) < needed:
            self.violations.append(("version", layer, t, body.applied_through))
        if t - body.min_clock > self.cfg.staleness + 1:
            self.violations.append(("clock", layer, t, body.min_clock))

    def _stamp_sfb_read(self, layer: int, t: int) -> None:
        mc, version = self.replica.min_clock, self.versions[layer]
        self.grants.append((layer, t, mc, version))
        if version < t - self.cfg.staleness - 1:
            self.violations.append(("version", layer, t, version))
        if t - mc > self.cfg.staleness + 1:
            self.violations.append(("clock", layer, t, mc))

    def _add_sfb(self, sfs) -> None:
        key = (sfs.layer_id, sfs.clock)
        if sfs.worker_id in self.sfb_pending[key] or sfs.clock <= self.versions[sfs.layer_id]:
            log.warning("worker %d: duplicate factors from %d for %s", self.id, sfs.worker_id, key)
            return
        self.sfb_pending[key][sfs.worker_id] = sfs
        if sfs.worker_id != self.id:
            self.floats[(sfs.clock, sfs.layer_id, "bcast_in")] += sfs.float_count
        self.replica.record_push(sfs.worker_id, sfs.layer_id, sfs.clock)
        self._apply_sfb(sfs.layer_id)

    def _apply_sfb(self, layer: int) -> None:
        while True:
            nxt = self.versions[layer] + 1
            sets = self.sfb_pending.get((layer, nxt))
            if sets is None or len(sets) < self.P:
                return
            del self.sfb_pending[(layer, nxt)]
            total = sum_in_worker_order({w: reconstruct(s) for w, s in sets.items()})
            fresh = self.params[layer].copy()
            apply_update(fresh, total, self.sfb_solver.velocity[layer], self.solver_cfg, nxt - 1)
            self.params[layer] = fresh
            self.versions[layer] = nxt

    # communication tasks ------------------------------------------------

    def _launch(self, rec, t: int, pull_for: int) -> None:
        layer = rec.layer_id
        strategy = self.strategies[layer]
        task = LayerCommTask(layer, t, strategy)
        self.tasks.append(task)
        task.advance(TaskState.SENT, self.now)
        self._log("comm_start", layer, t)
        if strategy is Strategy.FULL_MATRIX_PS:
            grad = LayerParams(rec.weight_grad, rec.bias_grad)
            msg = UpdateMessage(MsgType.PUSH_FULL, self.id, layer, t, grad)
        elif strategy is Strategy.SF_PS:
            msg = UpdateMessage(MsgType.PUSH_SF, self.id, layer, t, decompose(rec, t, self.id))
        else:
            sfs = decompose(rec, t, self.id)
            for peer in self.peers:
                self._send(peer, UpdateMessage(MsgType.SF_BROADCAST, self.id, layer, t, sfs))
                self.floats[(t, layer, "bcast_out")] += sfs.float_count
            self._add_sfb(sfs)
        if strategy.uses_server:
            self._send(SERVER_ID, msg)
            self.unacked += 1
            self.floats[(t, layer, "push")] += msg.float_count
            self._pull_origin[(layer, pull_for)] = t
            self._send(SERVER_ID, UpdateMessage(MsgType.PULL_REQUEST, self.id, layer, pull_for))
            done = lambda: self.ready_for[layer] >= pull_for
        else:
            done = lambda: self.versions[layer] >= t
        fut = asyncio.ensure_future(self._finish_task(task, done))
        self._comm.add(fut)
        fut.add_done_callback(self._task_done)

    def _task_done(self, fut) -> None:
        self._comm.discard(fut)
        if not fut.cancelled() and fut.exception() is not None:
            log.debug("worker %d: comm task failed: %s", self.id, fut.exception())

    async def _finish_task(self, task: LayerCommTask, done) -> None:
        await self._wait_until(done)
        task.advance(TaskState.UPDATED, self.now)
        self._log("comm_end", task.layer_id, task.clock)

    # the iteration --------------------------------------------------------

    async def run_iteration(self, t: int, last: bool = False) -> IterationReport:
        start = self.now
        if not self.cfg.dwbp:
            await self._wait_until(lambda: all(self.layer_ready(l, t) for l in self.strategies))
        await self._wait_until(lambda: self.sfb_read_granted(t))

        x, labels = self.batches(t, self.id)
        x, labels = check_batch(self.spec, x, labels)
        x = x.astype(self._dtype, copy=False)
        inputs, caches = [], []
        a, loss = x, 0.0
        pinned = ModelState()  # the exact weights this iteration computes with
        for layer in range(1, self.spec.num_layers + 1):
            if layer in self.strategies:
                await self._wait_until(lambda: self.layer_ready(layer, t))
                pinned[layer] = self.params[layer]
                if layer in self.sfb_layers:
                    self._stamp_sfb_read(layer, t)
            self._log("forward_start", layer, t)
            inputs.append(a)
            a, cache, top = await self._compute(forward_layer, self.spec, pinned, layer, a, labels)
            caches.append(cache)
            if top is not None:
                loss = top
            await self._pause(t, layer, "forward")
            self._log("forward_end", layer, t)
        trace = ForwardTrace(tuple(inputs), tuple(caches), loss, labels)
        mins = [self.read_min_clock[l] for l in self.ps_layers]
        if self.sfb_layers:
            mins.append(self.replica.min_clock)
        staleness = max(0, t - 1 - min(mins)) if mins else 0

        # final reads must see every update of the run
        pull_for = t + self.cfg.staleness + 1 if last else t + 1
        scale = 1.0 / (self.cfg.batch_size * self.P)
        deferred = []
        for layer in range(self.spec.num_layers, 0, -1):
            self._log("compute_start", layer, t)
            want_w = self.strategies.get(layer, Strategy.FULL_MATRIX_PS) is Strategy.FULL_MATRIX_PS
            rec = await self._compute(
                backward_layer, self.spec, pinned, trace, layer, scale, None, want_w
            )
            await self._pause(t, layer, "backward")
            self._log("compute_end", layer, t)
            if layer in self.strategies:
                if self.cfg.dwbp:
                    self._launch(rec, t, pull_for)
                else:
                    deferred.append(rec)
        for rec in deferred:
            self._launch(rec, t, pull_for)

        self._commit_clock(t)
        rep = IterationReport(
            self.id, t, loss, start, self.now, floats_sent=self.floats_for(t)[0], staleness=staleness,
            strategies={l: s.value for l, s in self.strategies.items()},
        )
        self.reports.append(rep)
        return rep

    def _commit_clock(self, t: int) -> None:
        if self.ps_layers:
            self._send(SERVER_ID, UpdateMessage(MsgType.CLOCK_ADVANCE, self.id, 0, t))
        if self.sfb_layers:
            for peer in self.peers:
                self._send(peer, UpdateMessage(MsgType.CLOCK_ADVANCE, self.id, 0, t))
            self.replica.advance(self.id, t)
        self.clock = t
        self._notify()

    @property
    def _dtype(self):
        return next(iter(self.params.values())).weight.dtype if self.params else np.float32

    def floats_for(self, t: int) -> tuple[int, int]:
        """Model floats this worker sent and received on behalf of iteration ``t``."""
        sent = recv = 0
        for (it, _, d), n in self.floats.items():
            if it == t:
                if d in ("push", "bcast_out"):
                    sent += n
                else:
                    recv += n
        return sent, recv

    async def run(self, first: int, last: int, on_report=None) -> list:
        """Run iterations ``first..last`` and wait for their communication.

        ``on_report(worker, report)`` is called after every iteration.
        """
        self._changed = asyncio.Event()
        self._last = last
        for layer in self.strategies:
            self.ready_for[layer] = max(self.ready_for[layer], first)
        for t in range(first, last + 1):
            rep = await self.run_iteration(t, last=(t == last))
            if on_report is not None:
                on_report(self, rep)
        await self.drain(last)
        return self.reports

    async def drain(self, last: int) -> None:
        final = last + self.cfg.staleness + 1
        await self._wait_until(
            lambda: all(self.ready_for[l] >= final for l in self.ps_layers)
            and all(self.versions[l] >= last for l in self.sfb_layers)
            and (not self.sfb_layers or self.replica.min_clock >= last)
            and self.unacked == 0
        )
        if self._comm:
            await asyncio.gather(*list(self._comm))
        self.finished = True
        for rep in self.reports:
            rep.floats_sent, rep.floats_received = self.floats_for(rep.iteration)
        self._log("drained", 0, last)

    # checkpointing -------------------------------------------------------

    def snapshot(self) -> dict:
        if self._comm or self.sfb_pending:
            raise ProtocolError("worker snapshot requires a drained iteration boundary")
        arrays = {}
        for l, p in self.params.items():
            arrays[f"worker{self.id}/param/{l}/w"] = p.weight
            if p.bias is not None:
                arrays[f"worker{self.id}/param/{l}/b"] = p.bias
        for l, v in self.sfb_solver.velocity.items():
            arrays[f"worker{self.id}/vel/{l}/w"] = v.weight
            if v.bias is not None:
                arrays[f"worker{self.id}/vel/{l}/b"] = v.bias
        meta = {
            "worker_id": self.id,
            "clock": self.clock,
            "next_iteration": self.clock + 1,
            "versions": {str(k): v for k, v in self.versions.items()},
            "ready_for": {str(k): v for k, v in self.ready_for.items()},
            "replica": self.replica.snapshot(),
            "strategies": {str(k): v.value for k, v in self.strategies.items()},
        }
        return {"meta": meta, "arrays": arrays}

    def restore(self, snap: dict) -> None:
        meta, arrays = snap["meta"], snap["arrays"]
        if meta["strategies"] != {str(k): v.value for k, v in self.strategies.items()}:
            raise ConfigError("snapshot was taken with different per-layer strategies")
        for l, p in self.params.items():
            p = self.params[l] = p.copy()
            p.weight[...] = arrays[f"worker{self.id}/param/{l}/w"]
            if p.bias is not None:
                p.bias[...] = arrays[f"worker{self.id}/param/{l}/b"]
        for l, v in self.sfb_solver.velocity.items():
            v.weight[...] = arrays[f"worker{self.id}/vel/{l}/w"]
            if v.bias is not None:
                v.bias[...] = arrays[f"worker{self.id}/vel/{l}/b"]
        self.clock = int(meta["clock"])
        self.versions = {int(k): int(v) for k, v in meta["versions"].items()}
        self.ready_for = {int(k): int(v) for k, v in meta["ready_for"].items()}
        self.replica.restore(meta["replica"])
