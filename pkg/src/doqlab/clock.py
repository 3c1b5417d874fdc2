"""Virtual time for asyncio.

Every timer in the engine goes through the running loop (``asyncio.sleep``,
``wait_for``, ``call_later``), so swapping the loop is enough to run the same
code on simulated time.  When nothing is ready the selector jumps the clock
straight to the next scheduled timer instead of blocking.
"""

import asyncio
import selectors


class VirtualClockDeadlock(RuntimeError):
    """The loop has nothing ready and no timer to advance to."""


class _JumpingSelector(selectors.DefaultSelector):
    def __init__(self):
        super().__init__()
        self.loop = None

    def select(self, timeout=None):
        events = super().select(0)
        if events or timeout == 0:
            return events
        if timeout is None:
            raise VirtualClockDeadlock("no runnable callbacks and no pending timers")
        self.loop._now += timeout
        return []


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    def __init__(self, start: float = 0.0):
        selector = _JumpingSelector()
        super().__init__(selector)
        selector.loop = self
        self._now = start

    def time(self) -> float:
        return self._now


def run_virtual(coro, start: float = 0.0):
    """Run ``coro`` to completion on a fresh virtual-time loop."""
    loop = VirtualTimeLoop(start)
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(coro)
    finally:
        try:
            pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
            for task in pending:
                task.cancel()
            if pending:
                loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        finally:
            asyncio.set_event_loop(None)
            loop.close()
