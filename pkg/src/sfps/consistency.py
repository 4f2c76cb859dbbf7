"""Stale-synchronous clock bookkeeping.

Iterations are numbered from 1. A worker's committed clock ``c_p`` is the last
iteration whose updates it has pushed for every layer. A read at iteration
``t`` is granted once every worker has committed ``t - s - 1``; ``s = 0`` is
lock-step BSP.

The table is plain synchronous state. Whoever owns it (the server, or each
peer's replica in broadcast mode) parks denied readers and retries them after
:meth:`ClockTable.advance`.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

from .errors import ConfigError, ProtocolError


@dataclass(frozen=True)
class ReadGrant:
    worker: int
    iteration: int
    granted: bool
    guaranteed_through: int


class ClockTable:
    def __init__(self, workers, staleness: int, required_layers=()):
        workers = list(workers)
        if not workers:
            raise ConfigError("clock table needs at least one worker")
        if staleness < 0:
            raise ConfigError("staleness must be >= 0")
        self.staleness = staleness
        self.clocks = {w: 0 for w in workers}
        self.required_layers = frozenset(required_layers)
        self._pushed = defaultdict(set)  # (worker, clock) -> layers seen

    @property
    def min_clock(self) -> int:
        return min(self.clocks.values())

    def clock_of(self, worker: int) -> int:
        return self.clocks[worker]

    def record_push(self, worker: int, layer_id: int, clock: int) -> None:
        self._check_worker(worker)
        self._pushed[(worker, clock)].add(layer_id)

    def advance(self, worker: int, to_clock: int | None = None) -> int:
        """Commit the worker's next clock; returns the new ``min_clock``.

        ``to_clock`` (if given) must equal ``c_p + 1``; it guards against
        duplicated or reordered clock messages.
        """
        self._check_worker(worker)
        nxt = self.clocks[worker] + 1
        if to_clock is not None and to_clock != nxt:
            raise ProtocolError(f"worker {worker} advancing to {to_clock}, expected {nxt}")
        missing = self.required_layers - self._pushed.get((worker, nxt), set())
        if missing:
            raise ProtocolError(
                f"worker {worker} committed clock {nxt} before pushing layers {sorted(missing)}"
            )
        self._pushed.pop((worker, nxt), None)
        self.clocks[worker] = nxt
        return self.min_clock

    def needed_through(self, iteration: int) -> int:
        return iteration - self.staleness - 1

    def try_read(self, worker: int, iteration: int) -> ReadGrant:
        self._check_worker(worker)
        needed = self.needed_through(iteration)
        mc = self.min_clock
        return ReadGrant(worker, iteration, mc >= needed, mc)

    def snapshot(self) -> dict:
        return {"staleness": self.staleness, "clocks": dict(self.clocks)}

    def restore(self, snap: dict) -> None:
        if {int(k) for k in snap["clocks"]} != set(self.clocks):
            raise ConfigError("clock snapshot covers a different worker set")
        self.clocks = {int(k): int(v) for k, v in snap["clocks"].items()}
        self._pushed.clear()

    def _check_worker(self, worker: int) -> None:
        if worker not in self.clocks:
            raise ProtocolError(f"unknown worker {worker}")
