"""
Rate Limiter for remote extractor calls
Paces request starts so no window of ``time_window`` seconds holds more than
``max_calls`` of them.
"""
import threading
import time
from collections import deque
from typing import Callable


class RateLimiter:
    """Sliding-window pacer that hands out start slots under a lock."""

    def __init__(self, max_calls: int = 10, time_window: float = 1.0,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if max_calls < 1 or time_window <= 0:
            raise ValueError("RateLimiter needs max_calls >= 1 and a positive time_window")
        self.time_window = time_window
        self._starts = deque(maxlen=max_calls)
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()

    def reserve(self) -> float:
        """Claim the next start slot; returns the delay before it opens."""
        with self._lock:
            now = self._clock()
            start = now
            if len(self._starts) == self._starts.maxlen:
                start = max(now, self._starts[0] + self.time_window)
            # Slots may lie in the future; starts stay non-decreasing
            self._starts.append(start)
            return start - now

    def wait(self) -> float:
        """Block until this call's slot opens; returns the seconds slept."""
        delay = self.reserve()
        if delay > 0:
            self._sleep(delay)
        return delay
