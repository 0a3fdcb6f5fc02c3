"""Shared LLC, its writeback buffer, private filter caches and the coalescer.

The LLC is physically indexed (set = line index modulo the set count, no
slice hash), write-back and write-allocate.  Lines evicted dirty go to the
writeback buffer, which feeds the memory controller's write queues.

Accelerator fills may be confined to ``accel_ways`` ways of every set, so a
streaming accelerator kernel recycles its own lines instead of flushing CPU
data.
"""
from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .addrmap import LINE_SHIFT

DIRTY = 1
ACCEL_OWNED = 2


@dataclass(frozen=True)
class LlcConfig:
    size_bytes: int = 16 * 2**20
    ways: int = 16
    line_bytes: int = 64
    accel_ways: int = 8

    @property
    def sets(self) -> int:
        return self.size_bytes // (self.ways * self.line_bytes)

    def validate(self, prefix: str = "llc") -> list[str]:
        errs = []
        if self.ways <= 0:
            errs.append(f"{prefix}: ways must be > 0")
            return errs
        if self.line_bytes != 64:
            errs.append(f"{prefix}: line_bytes must be 64")
        if self.size_bytes <= 0 or self.size_bytes % (self.ways * self.line_bytes):
            errs.append(f"{prefix}: size must be a positive multiple of ways x line_bytes")
            return errs
        s = self.sets
        if s & (s - 1):
            errs.append(f"{prefix}: set count {s} is not a power of two")
        if not 0 < self.accel_ways <= self.ways:
            errs.append(f"{prefix}: accel_ways must lie in [1, ways]")
        return errs


class AccessResult:
    __slots__ = ("hit", "victim", "victim_dirty", "victim_accel")

    def __init__(self, hit: bool, victim: int | None = None, victim_dirty: bool = False,
                 victim_accel: bool = False):
        self.hit = hit
        self.victim = victim
        self.victim_dirty = victim_dirty
        self.victim_accel = victim_accel  # line was filled by the accelerator

    def __repr__(self):
        return f"AccessResult(hit={self.hit}, victim={self.victim}, dirty={self.victim_dirty})"


_HIT = AccessResult(True)     # shared, read-only
_MISS = AccessResult(False)


class SetAssocCache:
    """LRU set-associative tag store over line indices."""

    def __init__(self, size_bytes: int, ways: int, line_bytes: int = 64, accel_ways: int | None = None):
        self.ways = ways
        self.n_sets = size_bytes // (ways * line_bytes)
        if self.n_sets < 1 or self.n_sets & (self.n_sets - 1):
            raise ValueError(f"set count {self.n_sets} must be a power of two >= 1")
        self.set_mask = self.n_sets - 1
        self.accel_ways = ways if accel_ways is None else accel_ways
        self._sets: dict[int, OrderedDict] = {}
        self._acc: dict[int, int] = {}  # accelerator-owned lines per set
        self.hits = 0
        self.misses = 0
        self.victim_accel = True

    def _set(self, line: int) -> OrderedDict:
        idx = line & self.set_mask
        s = self._sets.get(idx)
        if s is None:
            s = self._sets[idx] = OrderedDict()
        return s

    def contains(self, line: int) -> bool:
        s = self._sets.get(line & self.set_mask)
        return s is not None and line in s

    def is_dirty(self, line: int) -> bool:
        s = self._sets.get(line & self.set_mask)
        return bool(s is not None and s.get(line, 0) & DIRTY)

    def access(self, line: int, write: bool, accel: bool = False) -> AccessResult:
        idx = line & self.set_mask
        s = self._sets.get(idx)
        if s is None:
            s = self._sets[idx] = OrderedDict()
        flags = s.get(line)
        if flags is not None:
            s.move_to_end(line)
            if write:
                s[line] = flags | DIRTY
            self.hits += 1
            return _HIT
        self.misses += 1
        victim = None
        vflags = 0
        if accel and self.accel_ways < self.ways and self._acc.get(idx, 0) >= self.accel_ways:
            # the accelerator recycles its own oldest line
            for ln, f in s.items():
                if f & ACCEL_OWNED:
                    victim = ln
                    break
        elif len(s) >= self.ways:
            victim = next(iter(s))
        if victim is not None:
            vflags = s.pop(victim)
            if vflags & ACCEL_OWNED:
                self._acc[idx] -= 1
        if accel:
            s[line] = (DIRTY | ACCEL_OWNED) if write else ACCEL_OWNED
            self._acc[idx] = self._acc.get(idx, 0) + 1
        else:
            s[line] = DIRTY if write else 0
        if victim is None:
            return _MISS
        return AccessResult(False, victim, bool(vflags & DIRTY), bool(vflags & ACCEL_OWNED))

    def accel_write(self, line: int) -> int:
        """Accelerator store; same effect as ``access(line, True, True)``.

        Returns the evicted line if it was dirty, else -1; ``victim_accel``
        then tells who filled it.  This is the hottest call in a write-heavy
        kernel, hence the separate copy.
        """
        idx = line & self.set_mask
        s = self._sets.get(idx)
        if s is None:
            s = self._sets[idx] = OrderedDict()
        flags = s.get(line)
        if flags is not None:
            s.move_to_end(line)
            s[line] = flags | DIRTY
            self.hits += 1
            return -1
        self.misses += 1
        acc = self._acc
        n = acc.get(idx, 0)
        victim = -1
        if self.accel_ways < self.ways and n >= self.accel_ways:
            for ln, f in s.items():
                if f & ACCEL_OWNED:
                    victim = ln
                    break
        elif len(s) >= self.ways:
            victim = next(iter(s))
        s[line] = DIRTY | ACCEL_OWNED
        if victim < 0:
            acc[idx] = n + 1
            return -1
        vflags = s.pop(victim)
        if not vflags & ACCEL_OWNED:
            acc[idx] = n + 1
        self.victim_accel = bool(vflags & ACCEL_OWNED)
        return victim if vflags & DIRTY else -1

    def invalidate(self, line: int) -> tuple[bool, bool]:
        """Remove ``line``; returns (was_present, was_dirty)."""
        f = self.remove(line)
        return f is not None, bool(f and f & DIRTY)

    def remove(self, line: int) -> int | None:
        """Remove ``line`` and return its flag bits (None if absent)."""
        s = self._sets.get(line & self.set_mask)
        if s is None or line not in s:
            return None
        f = s.pop(line)
        if f & ACCEL_OWNED:
            self._acc[line & self.set_mask] -= 1
        return f

    def lines(self) -> Iterable[int]:
        for s in self._sets.values():
            yield from s

    def dirty_lines(self) -> list[int]:
        return [ln for s in self._sets.values() for ln, f in s.items() if f & DIRTY]


class WritebackBuffer:
    """FIFO of dirty line indices on their way to the memory controller."""

    def __init__(self, capacity: int = 32):
        if capacity < 1:
            raise ValueError("writeback buffer capacity must be >= 1")
        self.capacity = capacity
        self.entries: deque[int] = deque()
        self.waiters: deque[tuple[int, Callable[[], None]]] = deque()
        self.on_push: Callable[[], None] | None = None
        self.max_occupancy = 0
        self.pushed = 0
        self.stall_events = 0

    def __len__(self):
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def push(self, line: int, on_done: Callable[[], None] | None = None) -> bool:
        """Insert ``line``; if full, queue it and call ``on_done`` once inserted."""
        if len(self.entries) < self.capacity and not self.waiters:
            self._insert(line)
            return True
        self.stall_events += 1
        self.waiters.append((line, on_done))
        return False

    def _insert(self, line: int):
        self.entries.append(line)
        self.pushed += 1
        if len(self.entries) > self.max_occupancy:
            self.max_occupancy = len(self.entries)
        if self.on_push is not None:
            self.on_push()

    def pop(self) -> int:
        """Remove the head.  A waiting line moves in without ``on_push``:
        the consumer calling pop already knows the buffer is non-empty."""
        entries = self.entries
        line = entries.popleft()
        if self.waiters:
            wline, cb = self.waiters.popleft()
            entries.append(wline)
            self.pushed += 1
            if cb is not None:
                cb()
        return line


def coalesce(addresses: Sequence[int]) -> list[int]:
    """Distinct cache-line indices touched by one wavefront, first-occurrence order."""
    return list(dict.fromkeys(a >> LINE_SHIFT for a in addresses))


@dataclass(frozen=True)
class Wavefront:
    thread_accesses: tuple[int, ...]

    def __post_init__(self):
        if len(self.thread_accesses) not in (8, 16, 32):
            raise ValueError(f"wavefront size must be 8, 16 or 32, got {len(self.thread_accesses)}")

    def coalesce(self) -> list[int]:
        return coalesce(self.thread_accesses)
