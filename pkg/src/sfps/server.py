"""The parameter server.

Pushes for a ``(layer, clock)`` are accumulated per worker. Once all ``P``
contributions for the layer's next clock are in, they are summed in worker-id
order and applied with one solver step, so momentum and weight decay act once
per layer per clock no matter how the pushes interleave. Pulls are answered
when the clock table grants the read, otherwise parked until a clock advance.
"""
from __future__ import annotations

import logging
from collections import defaultdict

from .consistency import ClockTable
from .errors import ConfigError, ProtocolError
from .factors import Strategy, reconstruct
from .network import LayerParams, ModelState
from .solver import SolverConfig, SolverState, apply_update
from .comm.transport import SERVER_ID
from .comm.wire import AckStatus, MsgType, PullBody, UpdateMessage

log = logging.getLogger(__name__)


def sum_in_worker_order(contribs: dict) -> LayerParams:
    """Deterministic reduction: worker 1 first, then 2, ..."""
    total = None
    for w in sorted(contribs):
        g = contribs[w]
        if total is None:
            total = g.copy()
        else:
            total.weight += g.weight
            if total.bias is not None:
                total.bias += g.bias
    return total


class ParameterServer:
    def __init__(
        self,
        state: ModelState,
        solver_cfg: SolverConfig,
        num_workers: int,
        staleness: int,
        strategies: dict,
        transport=None,
        solver_state: SolverState | None = None,
    ):
        self.P = num_workers
        self.staleness = staleness
        self.cfg = solver_cfg
        self.layers = sorted(l for l, st in strategies.items() if Strategy(st).uses_server)
        self.params = ModelState({l: state[l].copy() for l in self.layers})
        self.solver = solver_state.copy() if solver_state else SolverState.zeros_like(self.params)
        self.table = ClockTable(range(1, num_workers + 1), staleness, self.layers)
        self.transport = transport
        self.pending = defaultdict(dict)  # (layer, clock) -> {worker: grad}
        self.applied_through = {l: 0 for l in self.layers}
        self.last_pushed = defaultdict(int)  # (worker, layer) -> clock
        self.waiting = []  # parked PullRequests
        self.grants = []  # (worker, layer, t, min_clock, applied_through) per answered pull
        self.duplicates = 0
        self.errors = []

    # message handling -------------------------------------------------

    def deliver(self, src: int, msg: UpdateMessage) -> None:
        try:
            self._handle(src, msg)
        except Exception as exc:
            self.errors.append(exc)
            log.exception("server failed handling %s from %d", msg.msg_type.name, src)

    def _handle(self, src: int, msg: UpdateMessage) -> None:
        t = msg.msg_type
        if t in (MsgType.PUSH_FULL, MsgType.PUSH_SF):
            status = self.handle_push(msg)
            self._send(msg.worker_id, UpdateMessage(MsgType.ACK, SERVER_ID, msg.layer_id, msg.clock, status))
        elif t is MsgType.PULL_REQUEST:
            resp = self.handle_pull(msg)
            if resp is not None:
                self._send(msg.worker_id, resp)
        elif t is MsgType.CLOCK_ADVANCE:
            self.handle_clock(msg)
        elif t is MsgType.ACK:
            pass
        else:
            raise ProtocolError(f"server cannot handle {t.name}")

    def _send(self, dst: int, msg: UpdateMessage) -> None:
        if self.transport is not None:
            self.transport.send(SERVER_ID, dst, msg)

    def handle_push(self, msg: UpdateMessage) -> AckStatus:
        layer, worker, clock = msg.layer_id, msg.worker_id, msg.clock
        if layer not in self.applied_through:
            raise ProtocolError(f"layer {layer} is not served here")
        if not 1 <= worker <= self.P:
            raise ProtocolError(f"unknown worker {worker}")
        if clock == self.last_pushed[(worker, layer)]:
            self.duplicates += 1
            log.warning("duplicate push worker=%d layer=%d clock=%d discarded", worker, layer, clock)
            return AckStatus.DUPLICATE
        if clock <= self.last_pushed[(worker, layer)] or clock <= self.applied_through[layer]:
            log.warning("stale push worker=%d layer=%d clock=%d rejected", worker, layer, clock)
            return AckStatus.STALE
        if msg.msg_type is MsgType.PUSH_SF:
            grad = reconstruct(msg.body)
        else:
            grad = msg.body
        target = self.params[layer]
        if grad.weight.shape != target.weight.shape:
            raise ProtocolError(f"layer {layer} gradient shape {grad.weight.shape}, expected {target.weight.shape}")
        grad = LayerParams(
            grad.weight.astype(target.weight.dtype, copy=False),
            None if grad.bias is None else grad.bias.astype(target.weight.dtype, copy=False),
        )
        self.pending[(layer, clock)][worker] = grad
        self.last_pushed[(worker, layer)] = clock
        self.table.record_push(worker, layer, clock)
        self._apply_ready(layer)
        return AckStatus.OK

    def _apply_ready(self, layer: int) -> None:
        while True:
            nxt = self.applied_through[layer] + 1
            contribs = self.pending.get((layer, nxt))
            if contribs is None or len(contribs) < self.P:
                return
            del self.pending[(layer, nxt)]
            total = sum_in_worker_order(contribs)
            apply_update(self.params[layer], total, self.solver.velocity[layer], self.cfg, nxt - 1)
            self.applied_through[layer] = nxt

    def _grantable(self, worker: int, layer: int, t: int) -> bool:
        if not self.table.try_read(worker, t).granted:
            return False
        return self.applied_through[layer] >= self.table.needed_through(t)

    def handle_pull(self, msg: UpdateMessage) -> UpdateMessage | None:
        """Answer now if the read is granted, otherwise park it and return None."""
        if msg.layer_id not in self.applied_through:
            raise ProtocolError(f"pull for unknown layer {msg.layer_id}")
        if self._grantable(msg.worker_id, msg.layer_id, msg.clock):
            return self._response(msg.worker_id, msg.layer_id, msg.clock)
        self.waiting.append((msg.worker_id, msg.layer_id, msg.clock))
        return None

    def _response(self, worker: int, layer: int, t: int) -> UpdateMessage:
        applied = self.applied_through[layer]
        mc = self.table.min_clock
        self.grants.append((worker, layer, t, mc, applied))
        body = PullBody(self.params[layer].copy(), applied, mc, tuple([applied] * self.P))
        return UpdateMessage(MsgType.PULL_RESPONSE, worker, layer, t, body)

    def handle_clock(self, msg: UpdateMessage) -> list:
        self.table.advance(msg.worker_id, msg.clock)
        return self.release_waiting()

    def release_waiting(self) -> list:
        """Answer every parked pull that is now grantable, lowest layer first."""
        ready, still = [], []
        for w, l, t in self.waiting:
            (ready if self._grantable(w, l, t) else still).append((w, l, t))
        self.waiting = still
        out = []
        for w, l, t in sorted(ready, key=lambda r: (r[1], r[0], r[2])):
            resp = self._response(w, l, t)
            self._send(w, resp)
            out.append(resp)
        return out

    # checkpointing -----------------------------------------------------

    def snapshot(self) -> dict:
        if self.pending or self.waiting:
            raise ProtocolError("server snapshot requires a quiescent iteration boundary")
        arrays = {}
        for l in self.layers:
            for name, a in (("w", self.params[l].weight), ("b", self.params[l].bias)):
                if a is not None:
                    arrays[f"server/param/{l}/{name}"] = a
            v = self.solver.velocity[l]
            for name, a in (("w", v.weight), ("b", v.bias)):
                if a is not None:
                    arrays[f"server/vel/{l}/{name}"] = a
        meta = {
            "layers": self.layers,
            "applied_through": {str(k): v for k, v in self.applied_through.items()},
            "clocks": self.table.snapshot(),
            "last_pushed": [[w, l, c] for (w, l), c in self.last_pushed.items()],
        }
        return {"meta": meta, "arrays": arrays}

    def restore(self, snap: dict) -> None:
        meta, arrays = snap["meta"], snap["arrays"]
        if list(meta["layers"]) != self.layers:
            raise ConfigError("server snapshot covers different layers")
        for l in self.layers:
            p = self.params[l]
            p.weight[...] = arrays[f"server/param/{l}/w"]
            if p.bias is not None:
                p.bias[...] = arrays[f"server/param/{l}/b"]
            v = self.solver.velocity[l]
            v.weight[...] = arrays[f"server/vel/{l}/w"]
            if v.bias is not None:
                v.bias[...] = arrays[f"server/vel/{l}/b"]
        self.applied_through = {int(k): int(v) for k, v in meta["applied_through"].items()}
        self.table.restore(meta["clocks"])
        self.last_pushed = defaultdict(int, {(w, l): c for w, l, c in meta["last_pushed"]})

