"""Deterministic discrete-event engine on a shared picosecond timeline.

All components schedule callbacks against one :class:`Engine`.  Time is an
integer count of picoseconds; clock domains convert cycle counts to that
timeline with a floor rule so that nothing drifts.
"""
from __future__ import annotations

import heapq
import zlib
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

PS_PER_SECOND = 10**12
_U64_MAX = 2**64 - 1


class ContractViolation(RuntimeError):
    """Raised when a caller breaks an engine precondition."""


@dataclass(frozen=True)
class ClockDomain:
    name: str
    frequency_hz: int

    def __post_init__(self):
        if self.frequency_hz <= 0:
            raise ValueError(f"clock {self.name!r}: frequency_hz must be > 0")

    def cycles(self, n: int) -> int:
        return cycles_to_time(n, self)

    def to_cycles(self, ps: int) -> int:
        """Whole cycles elapsed in ``ps`` picoseconds (floor)."""
        return ps * self.frequency_hz // PS_PER_SECOND

    def to_cycles_float(self, ps: int) -> float:
        return ps * self.frequency_hz / PS_PER_SECOND


def cycles_to_time(cycles: int, domain: ClockDomain) -> int:
    """floor(cycles * 1e12 / f) picoseconds, exact integer arithmetic."""
    if cycles < 0:
        raise ContractViolation("negative cycle count")
    ps = cycles * PS_PER_SECOND // domain.frequency_hz
    if ps > _U64_MAX:
        raise OverflowError(f"{cycles} cycles @ {domain.frequency_hz} Hz overflows 64-bit picoseconds")
    return ps


class Event:
    """Handle returned by :meth:`Engine.schedule`; supports cancellation.

    The heap stores plain ``[time, seq, callback, payload, target]`` lists;
    cancelling clears the callback slot so the entry is skipped when popped.
    """

    __slots__ = ("_entry",)

    def __init__(self, entry: list):
        self._entry = entry

    fire_time = property(lambda self: self._entry[0])
    sequence = property(lambda self: self._entry[1])
    payload = property(lambda self: self._entry[3])
    target = property(lambda self: self._entry[4])

    @property
    def cancelled(self) -> bool:
        return self._entry[2] is None

    def cancel(self):
        self._entry[2] = None

    def __repr__(self):
        return f"Event(t={self.fire_time}, seq={self.sequence}, target={self.target!r})"


@dataclass(frozen=True)
class SimStats:
    events_fired: int
    final_time: int


class Engine:
    """Single-threaded event loop.

    Equal-time events fire in insertion order.  The engine owns the only RNG
    root; components obtain independent, name-derived streams through
    :meth:`rng` so adding a component never perturbs another one's draws.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.now = 0
        self._queue: list[tuple[int, int, Event]] = []
        self._seq = 0
        self._fired = 0
        self._streams: dict[str, np.random.Generator] = {}
        self.log: list[tuple[int, str]] | None = None
        self.horizon: int | None = None  # deadline of the loop currently running

    def rng(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
            gen = np.random.Generator(np.random.PCG64(ss))
            self._streams[name] = gen
        return gen

    def schedule(self, fire_time: int, callback: Callable[..., Any], payload: Any = None,
                 target: str = "") -> Event:
        if fire_time < self.now:
            raise ContractViolation(
                f"cannot schedule {target or callback!r} at {fire_time} ps; current time is {self.now} ps")
        entry = [fire_time, self._seq, callback, payload, target]
        heapq.heappush(self._queue, entry)
        self._seq += 1
        return Event(entry)

    def post(self, fire_time: int, callback: Callable[..., Any], payload: Any = None):
        """Hot-path variant of :meth:`schedule` without a handle or checks."""
        heapq.heappush(self._queue, [fire_time, self._seq, callback, payload, ""])
        self._seq += 1

    def after(self, delay: int, callback, payload=None, target: str = "") -> Event:
        return self.schedule(self.now + delay, callback, payload, target)

    def pending(self) -> int:
        return sum(1 for e in self._queue if e[2] is not None)

    def peek_time(self) -> int | None:
        q = self._queue
        while q and q[0][2] is None:
            heapq.heappop(q)
        return q[0][0] if q else None

    def _loop(self, deadline: int | None, stop: Callable[[], bool] | None) -> int:
        q = self._queue
        pop = heapq.heappop
        fired = 0
        log = self.log
        self.horizon = deadline
        while q:
            entry = q[0]
            t = entry[0]
            if deadline is not None and t > deadline:
                break
            pop(q)
            cb = entry[2]
            if cb is None:
                continue
            self.now = t
            if log is not None:
                log.append((t, entry[4]))
            payload = entry[3]
            if payload is None:
                cb()
            else:
                cb(payload)
            fired += 1
            if stop is not None and stop():
                break
        self._fired += fired
        return fired

    def run_until(self, deadline: int) -> SimStats:
        """Fire every event with fire_time <= deadline."""
        fired = self._loop(deadline, None)
        # queue exhausted: time stays at the last event fired
        if self._queue and deadline > self.now:
            self.now = deadline
        return SimStats(fired, self.now)

    def run(self, stop: Callable[[], bool] | None = None, limit: int | None = None) -> SimStats:
        """Run until the queue empties, ``stop()`` turns true, or ``limit`` ps."""
        fired = self._loop(limit, stop)
        return SimStats(fired, self.now)

    def can_advance_to(self, t: int) -> bool:
        """True if nothing queued fires at or before ``t`` and ``t`` is within
        the running loop's deadline, so a component may move time forward to
        ``t`` itself instead of posting an event."""
        q = self._queue
        if q and q[0][0] <= t:
            return False
        h = self.horizon
        return h is None or t <= h

    @property
    def events_fired(self) -> int:
        return self._fired
