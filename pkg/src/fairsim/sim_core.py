"""Deterministic discrete-event engine.

Simulated time is an integer count of nanoseconds. Events with the same
``fire_at`` run in insertion order. Random streams use the Philox4x64-10
counter-based generator keyed by ``(seed, stream_id)``, so every stochastic
source gets its own reproducible sequence.
"""
from __future__ import annotations

import heapq
from typing import Any, Callable

import numpy as np

NS = 1
US = 1_000
MS = 1_000_000
SEC = 1_000_000_000


def ms(value: float) -> int:
    return int(round(value * MS))


def us(value: float) -> int:
    return int(round(value * US))


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


class SimEvent:
    __slots__ = ("fire_at", "seq", "callback", "args", "cancelled")

    def __init__(self, fire_at: int, seq: int, callback: Callable, args: tuple):
        self.fire_at = fire_at
        self.seq = seq
        self.callback = callback
        self.args = args
        self.cancelled = False

    def __repr__(self) -> str:
        name = getattr(self.callback, "__qualname__", repr(self.callback))
        return f"SimEvent(fire_at={self.fire_at}, seq={self.seq}, {name})"


class Simulator:
    """Single-threaded event loop with a monotonic nanosecond clock."""

    def __init__(self) -> None:
        self.now = 0
        self._queue: list[tuple[int, int, SimEvent]] = []
        self._seq = 0
        self.scheduled = 0
        self.processed = 0
        self.cancelled = 0
        self._stopped = False

    def schedule(self, fire_at: int, callback: Callable, *args: Any) -> SimEvent:
        if fire_at < self.now:
            raise SchedulingError(
                f"cannot schedule at {fire_at} ns, clock is already {self.now} ns")
        seq = self._seq
        self._seq = seq + 1
        event = SimEvent(fire_at, seq, callback, args)
        heapq.heappush(self._queue, (fire_at, seq, event))
        self.scheduled += 1
        return event

    def schedule_in(self, delay: int, callback: Callable, *args: Any) -> SimEvent:
        return self.schedule(self.now + delay, callback, *args)

    def cancel(self, event: SimEvent | None) -> None:
        if event is not None and not event.cancelled:
            event.cancelled = True
            self.cancelled += 1

    @property
    def pending(self) -> int:
        return sum(1 for _, _, ev in self._queue if not ev.cancelled)

    def stop(self) -> None:
        """Ask a running loop to return after the current event."""
        self._stopped = True

    def run_until(self, end: int) -> int:
        if end < self.now:
            raise SchedulingError(f"run_until({end}) is before the clock ({self.now})")
        count = self._run(end)
        if not self._stopped:
            self.now = max(self.now, end)
        return count

    def run(self) -> int:
        """Process events until the queue drains or stop() is called."""
        return self._run(None)

    def _run(self, end: int | None) -> int:
        queue = self._queue
        pop = heapq.heappop
        count = 0
        self._stopped = False
        while queue:
            fire_at = queue[0][0]
            if end is not None and fire_at > end:
                break
            event = pop(queue)[2]
            if event.cancelled:
                continue
            self.now = fire_at
            event.callback(*event.args)
            count += 1
            if self._stopped:
                break
        self.processed += count
        return count


# Stream ids, one per stochastic source.
STREAM_LOSS_FORWARD = 1
STREAM_LOSS_REVERSE = 2
STREAM_WORKLOAD = 16  # workload process k uses STREAM_WORKLOAD + k


class RngStream:
    """Buffered uniform draws from Philox keyed by (seed, stream_id)."""

    _BLOCK = 4096

    def __init__(self, seed: int, stream_id: int):
        if seed < 0 or seed >= 1 << 64 or stream_id < 0 or stream_id >= 1 << 64:
            raise ValueError("seed and stream_id must fit in 64 bits")
        self.seed = seed
        self.stream_id = stream_id
        bitgen = np.random.Philox(key=(stream_id << 64) | seed)
        self._gen = np.random.Generator(bitgen)
        self._buf: list[float] = []
        self._pos = 0

    def uniform(self) -> float:
        """Next real in [0, 1)."""
        pos = self._pos
        buf = self._buf
        if pos >= len(buf):
            buf = self._buf = self._gen.random(self._BLOCK).tolist()
            pos = 0
        self._pos = pos + 1
        return buf[pos]

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + int(self.uniform() * (hi - lo + 1))

    def choice_index(self, n: int) -> int:
        return int(self.uniform() * n)


def rng_uniform(stream: RngStream) -> float:
    return stream.uniform()
