"""Discrete-event clock, scheduler and seeded random streams.

Simulated time is an integer count of milliseconds. Every other module
runs its callbacks on the single :class:`Scheduler` loop and draws
randomness from named :class:`RngStream` objects, which is what makes a
run reproducible from ``(config, seed)`` alone.
"""

from __future__ import annotations

import heapq
import math
import queue
from dataclasses import dataclass, field
from typing import Callable

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
TWO_POW_NEG_53 = 2.0**-53


class ClockViolation(ValueError):
    """Raised when an action is scheduled before the current sim time."""


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    return state, mix64(state)


def fnv1a64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def derive_stream_seed(global_seed: int, name: str) -> int:
    if not name:
        raise ValueError("stream name must be non-empty")
    return mix64(fnv1a64(name) ^ (global_seed & MASK64))


def box_muller(u1: float, u2: float) -> float:
    """Standard normal variate from two uniforms; ``u1`` is clamped away from 0."""
    if u1 < TWO_POW_NEG_53:
        u1 = TWO_POW_NEG_53
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


class RngStream:
    """A named splitmix64 stream.

    Uniforms are ``(next_u64 >> 11) * 2**-53``; gaussians use Box-Muller
    with two uniforms per draw and the second variate discarded.
    """

    __slots__ = ("name", "state")

    def __init__(self, name: str, state: int):
        self.name = name
        self.state = state & MASK64

    @classmethod
    def derive(cls, global_seed: int, name: str) -> "RngStream":
        return cls(name, derive_stream_seed(global_seed, name))

    def next_u64(self) -> int:
        self.state, out = splitmix64(self.state)
        return out

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * TWO_POW_NEG_53

    def gaussian(self, mean: float = 0.0, stddev: float = 1.0) -> float:
        if stddev < 0:
            raise ValueError(f"stddev must be >= 0, got {stddev}")
        # two splitmix64 steps inlined; this is the hot path of every noisy generator
        s1 = (self.state + GOLDEN_GAMMA) & MASK64
        s2 = (s1 + GOLDEN_GAMMA) & MASK64
        self.state = s2
        z = ((s1 ^ (s1 >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        u1 = ((z ^ (z >> 31)) >> 11) * TWO_POW_NEG_53
        z = ((s2 ^ (s2 >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        u2 = ((z ^ (z >> 31)) >> 11) * TWO_POW_NEG_53
        return mean + stddev * box_muller(u1, u2)

    def __repr__(self) -> str:
        return f"RngStream({self.name!r}, state=0x{self.state:016x})"


@dataclass(order=True)
class ScheduledAction:
    fire_at: int
    seq: int
    action: Callable[[], None] = field(compare=False)
    cancelled: bool = field(default=False, compare=False)

    def cancel(self) -> None:
        self.cancelled = True


class Scheduler:
    """Single-threaded event loop owning the sim clock.

    Actions fire in ``(fire_at, seq)`` order, where ``seq`` is a global
    scheduling counter. Other threads must go through :meth:`submit`.
    """

    def __init__(self) -> None:
        self.now = 0
        self._queue: list[ScheduledAction] = []
        self._seq = 0
        self._inbox: queue.SimpleQueue[Callable[[], None]] = queue.SimpleQueue()
        self.executed = 0

    def schedule(self, fire_at: int, action: Callable[[], None]) -> ScheduledAction:
        if fire_at < self.now:
            raise ClockViolation(f"cannot schedule at t={fire_at}, clock is at t={self.now}")
        item = ScheduledAction(int(fire_at), self._seq, action)
        self._seq += 1
        heapq.heappush(self._queue, item)
        return item

    def call_later(self, delay: int, action: Callable[[], None]) -> ScheduledAction:
        return self.schedule(self.now + delay, action)

    def submit(self, action: Callable[[], None]) -> None:
        """Thread-safe hand-off; runs at the loop's next ingestion point."""
        self._inbox.put(action)

    def drain_submissions(self) -> int:
        n = 0
        while True:
            try:
                action = self._inbox.get_nowait()
            except queue.Empty:
                return n
            action()
            n += 1

    def next_fire_time(self) -> int | None:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].fire_at if self._queue else None

    def pending(self) -> int:
        return sum(1 for a in self._queue if not a.cancelled)

    def run_until(self, t: int) -> int:
        if t < self.now:
            raise ClockViolation(f"cannot run back to t={t}, clock is at t={self.now}")
        self.drain_submissions()
        while self._queue and self._queue[0].fire_at <= t:
            item = heapq.heappop(self._queue)
            if item.cancelled:
                continue
            self.now = item.fire_at
            self.executed += 1
            item.action()
        self.now = t
        return self.now
