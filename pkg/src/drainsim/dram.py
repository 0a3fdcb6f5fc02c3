"""Per-bank open-row DRAM timing.

Banks track their open row, when they become free and the kind of the last
operation; a kind change costs a bus-turnaround penalty on top of the
row-hit/miss/conflict latency.  A row hit keeps the bank busy only for the
column-command spacing (hits pipeline); misses and conflicts hold it for the
whole activate/precharge latency.  Times are in memory-controller cycles inside
this module; the controller converts to picoseconds.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .addrmap import DramCoordinate


@dataclass(frozen=True)
class DramTiming:
    row_hit_cycles: int = 15
    row_miss_cycles: int = 30
    row_conflict_cycles: int = 45
    turnaround_rw_cycles: int = 8  # read followed by write
    turnaround_wr_cycles: int = 8  # write followed by read
    burst_cycles: int = 4          # command/data-bus occupancy per request
    ccd_cycles: int = 7            # spacing of column commands to an open row (tCCD_L)
    frequency_hz: int = 1_300_000_000

    def validate(self) -> list[str]:
        errs = []
        if not (0 < self.row_hit_cycles <= self.row_miss_cycles <= self.row_conflict_cycles):
            errs.append("dram: need 0 < row_hit_cycles <= row_miss_cycles <= row_conflict_cycles")
        if self.turnaround_rw_cycles < 0 or self.turnaround_wr_cycles < 0:
            errs.append("dram: turnaround penalties must be >= 0")
        if not 1 <= self.ccd_cycles <= self.row_hit_cycles:
            errs.append("dram: need 1 <= ccd_cycles <= row_hit_cycles")
        if self.burst_cycles < 1:
            errs.append("dram: burst_cycles must be >= 1")
        if self.frequency_hz <= 0:
            errs.append("dram: frequency_hz must be > 0")
        return errs


# last_op encoding
NONE, READ, WRITE = 0, 1, 2


class Bank:
    __slots__ = ("timing", "open_row", "busy_until", "last_op",
                 "hits", "misses", "conflicts", "turnarounds")

    def __init__(self, timing: DramTiming):
        self.timing = timing
        self.open_row: int | None = None
        self.busy_until = 0
        self.last_op = NONE
        self.hits = self.misses = self.conflicts = self.turnarounds = 0

    def latency(self, is_write: bool, row: int) -> int:
        t = self.timing
        if self.open_row is None:
            lat = t.row_miss_cycles
        elif self.open_row == row:
            lat = t.row_hit_cycles
        else:
            lat = t.row_conflict_cycles
        op = WRITE if is_write else READ
        if self.last_op != NONE and self.last_op != op:
            lat += t.turnaround_rw_cycles if is_write else t.turnaround_wr_cycles
        return lat

    def service(self, is_write: bool, row: int, now: int) -> int:
        """Serve one request arriving at MC cycle ``now``; return completion cycle."""
        t = self.timing
        if self.open_row is None:
            lat = t.row_miss_cycles
            self.misses += 1
        elif self.open_row == row:
            lat = t.row_hit_cycles
            self.hits += 1
        else:
            lat = t.row_conflict_cycles
            self.conflicts += 1
        op = WRITE if is_write else READ
        if self.last_op != NONE and self.last_op != op:
            lat += t.turnaround_rw_cycles if is_write else t.turnaround_wr_cycles
            self.turnarounds += 1
        start = now if now > self.busy_until else self.busy_until
        done = start + lat
        occupancy = lat if self.open_row != row else lat - t.row_hit_cycles + t.ccd_cycles
        self.open_row = row
        self.busy_until = start + occupancy
        self.last_op = op
        return done


class ConflictKind(str, Enum):
    NONE = "none"
    CHANNEL = "channel"
    BANK_GROUP = "bank_group"
    BANK = "bank"


def conflict_kind(prev: DramCoordinate, nxt: DramCoordinate) -> ConflictKind:
    """Finest DRAM resource two coordinates share."""
    if prev.channel != nxt.channel:
        return ConflictKind.NONE
    if prev.bank_group != nxt.bank_group:
        return ConflictKind.CHANNEL
    if prev.bank != nxt.bank:
        return ConflictKind.BANK_GROUP
    return ConflictKind.BANK
