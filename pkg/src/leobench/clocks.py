"""Clock abstraction so daemons run on wall time and tests on simulated time."""

from __future__ import annotations

import time


class WallClock:
    """Real time, in unix milliseconds."""

    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class SimClock:
    """Manually advanced clock for deterministic tests."""

    def __init__(self, start_ms: int = 0):
        self._now_ms = int(start_ms)

    def now_ms(self) -> int:
        return self._now_ms

    def advance(self, ms: int) -> None:
        if ms < 0:
            raise ValueError("SimClock cannot move backwards")
        self._now_ms += int(ms)

    def sleep(self, seconds: float) -> None:
        # Simulated sleeps advance time instead of blocking.
        self.advance(int(round(seconds * 1000)))
