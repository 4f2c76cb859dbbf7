"""An asyncio event loop that runs on simulated time.

Whenever the loop would block waiting for the next timer, the clock jumps
straight to that timer instead. Code under test uses ordinary
``asyncio.sleep`` / ``loop.call_at``; only ``loop.time()`` differs. Timer
ordering and callback order are deterministic, so simulations replay exactly.
"""
from __future__ import annotations

import asyncio
import selectors


class SimulationDeadlock(RuntimeError):
    """Every task is waiting and no timer is pending."""


class _JumpingSelector(selectors.DefaultSelector):
    def __init__(self, loop: "VirtualTimeLoop"):
        super().__init__()
        self._vloop = loop

    def select(self, timeout=None):
        events = super().select(0)
        if events:
            return events
        if timeout is None:
            raise SimulationDeadlock("no runnable task and no pending timer")
        if timeout > 0:
            self._vloop._advance(timeout)
        return []


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    def __init__(self, start: float = 0.0):
        self._now = float(start)
        super().__init__(_JumpingSelector(self))

    def time(self) -> float:
        return self._now

    def _advance(self, dt: float) -> None:
        self._now += dt


def run_virtual(coro, start: float = 0.0):
    """Run ``coro`` to completion on a fresh :class:`VirtualTimeLoop`."""
    loop = VirtualTimeLoop(start)
    try:
        return loop.run_until_complete(coro)
    finally:
        try:
            pending = asyncio.all_tasks(loop)
            for task in pending:
                task.cancel()
            if pending:
                loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
            loop.run_until_complete(loop.shutdown_asyncgens())
        finally:
            loop.close()
