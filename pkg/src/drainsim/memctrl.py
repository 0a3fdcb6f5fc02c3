"""Dual-channel memory controller with per-channel read and write queues.

Scheduling is FCFS within each queue.  Which queue is served is decided by
the controller policy:

* ``drain_when_full`` -- once the write queue fills, only writes are served
  until it is empty; reads wait.  Outside a drain reads go first and writes
  are served opportunistically when no read is waiting.
* ``read_priority`` -- a waiting read always goes first.
* ``staged_reads`` -- like drain_when_full, but during a drain a read to a
  bank no queued write touches may proceed.
* ``channel_partition`` -- drain_when_full with each channel owned by one
  agent class; requests from a non-owner are rejected.

The controller runs on its own clock.  Requests are dispatched at most once
per ``burst_cycles`` per channel, and a request also waits until its bank has finished the
previous one (FIFO head-of-line blocking).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .addrmap import AddressMapping, decode_array
from .dram import Bank, DramTiming
from .simcore import ClockDomain, ContractViolation, Engine, PS_PER_SECOND


class Policy(str, Enum):
    DRAIN_WHEN_FULL = "drain_when_full"
    READ_PRIORITY = "read_priority"
    STAGED_READS = "staged_reads"
    CHANNEL_PARTITION = "channel_partition"


ACCEPTED = "accepted"
STALLED_FULL = "stalled_full"

CPU = "cpu"
ACCEL = "accelerator"


def origin_class(origin: str) -> str:
    return ACCEL if origin.startswith("acc") else CPU


class MemoryRequest:
    __slots__ = ("id", "is_write", "addr", "origin", "issue_time", "complete_time",
                 "channel", "bank", "row", "enqueue_time", "dispatch_time", "on_complete",
                 "return_ps", "bare")

    def __init__(self, id, is_write, addr, origin, issue_time, on_complete=None):
        self.id = id
        self.is_write = is_write
        self.addr = addr
        self.origin = origin
        self.issue_time = issue_time
        self.complete_time = None
        self.channel = -1
        self.bank = -1
        self.row = -1
        self.enqueue_time = None
        self.dispatch_time = None
        self.on_complete = on_complete
        self.return_ps = 0  # delivery delay after the DRAM completes
        self.bare = False   # call on_complete without the request argument

    @property
    def kind(self) -> str:
        return "write" if self.is_write else "read"

    def __repr__(self):
        return (f"MemoryRequest(id={self.id}, {self.kind}, addr={self.addr:#x}, "
                f"origin={self.origin}, ch={self.channel}, bank={self.bank})")


@dataclass
class ControllerConfig:
    policy: Policy = Policy.DRAIN_WHEN_FULL
    write_buffer_entries: int = 64
    read_buffer_entries: int = 32
    pending_write_entries: int = 64
    channel_partition_owner: tuple[str, str] = (CPU, ACCEL)

    def validate(self) -> list[str]:
        errs = []
        if self.write_buffer_entries < 1:
            errs.append("memctrl: write_buffer_entries must be >= 1")
        if self.read_buffer_entries < 1:
            errs.append("memctrl: read_buffer_entries must be >= 1")
        if self.pending_write_entries < 0:
            errs.append("memctrl: pending_write_entries must be >= 0")
        for o in self.channel_partition_owner:
            if o not in (CPU, ACCEL):
                errs.append(f"memctrl: channel_partition_owner entry {o!r} must be 'cpu' or 'accelerator'")
        return errs


@dataclass
class ControllerStats:
    channel: int
    reads_enqueued: int = 0
    writes_enqueued: int = 0
    reads_completed: int = 0
    writes_completed: int = 0
    drain_episodes: int = 0
    max_write_q: int = 0
    max_read_q: int = 0
    read_stall_ps: list = field(default_factory=list)
    reads_during_drain: int = 0
    drain_windows: list = field(default_factory=list)  # (start_ps, end_ps)
    row_hits: int = 0
    row_misses: int = 0
    row_conflicts: int = 0

    def stall_histogram(self, bins: Sequence[float] = (0, 100, 250, 500, 1000, 2500, 5000, 1e12)):
        """Counts of read queueing delays (ns) per bin."""
        ns = np.asarray(self.read_stall_ps, dtype=float) / 1000.0
        hist, _ = np.histogram(ns, bins=np.asarray(bins, dtype=float))
        return hist.tolist()

    def csv_row(self) -> dict:
        stalls = np.asarray(self.read_stall_ps, dtype=float)
        return {
            "channel": self.channel,
            "reads_enqueued": self.reads_enqueued,
            "writes_enqueued": self.writes_enqueued,
            "reads_completed": self.reads_completed,
            "writes_completed": self.writes_completed,
            "drain_episodes": self.drain_episodes,
            "max_write_q": self.max_write_q,
            "max_read_q": self.max_read_q,
            "mean_read_stall_ns": float(stalls.mean() / 1000) if stalls.size else 0.0,
            "reads_during_drain": self.reads_during_drain,
            "row_hits": self.row_hits,
            "row_misses": self.row_misses,
            "row_conflicts": self.row_conflicts,
        }


class ChannelBuffers:
    __slots__ = ("index", "read_q", "write_q", "pending_writes", "draining", "bus_free",
                 "armed", "banks", "stats", "write_banks", "drain_start",
                 "pending_waiters", "read_waiters", "in_tick")

    def __init__(self, index: int, n_banks: int, timing: DramTiming):
        self.index = index
        self.read_q: deque[MemoryRequest] = deque()
        self.write_q: deque[MemoryRequest] = deque()
        self.pending_writes: deque[MemoryRequest] = deque()
        self.draining = False
        self.bus_free = 0          # MC cycle at which the next dispatch may happen
        self.armed = False
        self.banks = [Bank(timing) for _ in range(n_banks)]
        self.stats = ControllerStats(index)
        self.write_banks = [0] * n_banks  # queued writes per bank
        self.drain_start = 0
        self.pending_waiters: deque[Callable[[], None]] = deque()
        self.read_waiters: deque[tuple[MemoryRequest, Callable]] = deque()
        self.in_tick = False


class MemoryController:
    def __init__(self, engine: Engine, mapping: AddressMapping, cfg: ControllerConfig | None = None,
                 timing: DramTiming | None = None, check_invariants: bool = True):
        self.engine = engine
        self.mapping = mapping
        self.cfg = cfg or ControllerConfig()
        self.timing = timing or DramTiming()
        self.clock = ClockDomain("mc", self.timing.frequency_hz)
        self.policy = Policy(self.cfg.policy)
        self.W = self.cfg.write_buffer_entries
        self.R = self.cfg.read_buffer_entries
        self.P = self.cfg.pending_write_entries
        self.channels = [ChannelBuffers(i, mapping.banks_per_channel, self.timing) for i in range(2)]
        self.check_invariants = check_invariants
        self.drain_family = self.policy in (Policy.DRAIN_WHEN_FULL, Policy.STAGED_READS,
                                            Policy.CHANNEL_PARTITION)
        self._f = self.timing.frequency_hz
        self.burst = self.timing.burst_cycles
        self._next_id = 0
        self._decoded: dict[int, tuple[int, int, int]] = {}
        self._fe_armed = False
        self._fe_running = False
        self._fe_kicked = False
        # called once per front-end cycle; returns True while it has more to send
        self.source: Callable[[], bool] | None = None
        self.dispatch_log: list[tuple[int, int, int, bool]] | None = None  # (ps, ch, id, is_write)
        self.contention: ContentionCounter | None = None
        # whole-drain dispatch is exact only when no read may overtake a drain
        self.batch_drains = self.policy in (Policy.DRAIN_WHEN_FULL, Policy.CHANNEL_PARTITION)

    # --- clock helpers -------------------------------------------------------
    def to_cycle(self, ps: int) -> int:
        """First MC clock edge at or after ``ps``."""
        return -((-ps * self._f) // PS_PER_SECOND)

    def to_ps(self, cycle: int) -> int:
        return cycle * PS_PER_SECOND // self._f

    def new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    # --- enqueue -------------------------------------------------------------
    def channel_for(self, addr: int) -> int:
        coord = self._decoded.get(addr)
        if coord is None:
            m = self.mapping
            coord = self._decoded[addr] = (m.channel_of(addr), m.bank_index(addr), addr >> m.row_shift)
        return coord[0]

    def write_would_stall(self, ch: ChannelBuffers) -> bool:
        """True if a write to ``ch`` would be refused right now."""
        return not self.write_accepts(ch)

    def write_accepts(self, ch: ChannelBuffers) -> bool:
        if not ch.draining and len(ch.write_q) < self.W and not ch.pending_writes:
            return True
        return len(ch.pending_writes) < self.P

    def enqueue_write(self, ch: ChannelBuffers, req: MemoryRequest):
        """Fast path of :meth:`enqueue` for a write the caller has already
        checked with :meth:`write_accepts` on its routed channel ``ch``."""
        req.channel, req.bank, req.row = self._decoded[req.addr]
        if self.policy is Policy.CHANNEL_PARTITION or self.contention is not None:
            if self.enqueue(req) != ACCEPTED:
                raise ContractViolation("write refused after write_accepts")
            return
        req.enqueue_time = req.issue_time
        ch.stats.writes_enqueued += 1
        if not ch.draining and len(ch.write_q) < self.W and not ch.pending_writes:
            self._push_write(ch, req)
            self._arm(ch)
        else:
            ch.pending_writes.append(req)
            if not ch.draining and len(ch.write_q) < self.W:
                self.arm_frontend()

    def route(self, req: MemoryRequest) -> ChannelBuffers:
        coord = self._decoded.get(req.addr)
        if coord is None:
            m = self.mapping
            a = req.addr
            coord = self._decoded[a] = (m.channel_of(a), m.bank_index(a), a >> m.row_shift)
        req.channel, req.bank, req.row = coord
        return self.channels[coord[0]]

    def enqueue(self, req: MemoryRequest, now: int | None = None) -> str:
        r = self._enqueue(req, now)
        if self.contention is not None and r is ACCEPTED:
            self.contention.observe(req)
        return r

    def _enqueue(self, req: MemoryRequest, now: int | None) -> str:
        now = self.engine.now if now is None else now
        ch = self.route(req)
        if self.policy is Policy.CHANNEL_PARTITION:
            owner = self.cfg.channel_partition_owner[req.channel]
            if origin_class(req.origin) != owner:
                raise ContractViolation(
                    f"{req.origin} request {req.addr:#x} routed to channel {req.channel} owned by {owner}")
        st = ch.stats
        if not req.is_write:
            if len(ch.read_q) >= self.R:
                return STALLED_FULL
            req.enqueue_time = now
            ch.read_q.append(req)
            st.reads_enqueued += 1
            if len(ch.read_q) > st.max_read_q:
                st.max_read_q = len(ch.read_q)
            self._arm(ch)
            return ACCEPTED
        if not ch.draining and len(ch.write_q) < self.W and not ch.pending_writes:
            req.enqueue_time = now
            st.writes_enqueued += 1
            self._push_write(ch, req)
            self._arm(ch)
            return ACCEPTED
        if len(ch.pending_writes) < self.P:
            req.enqueue_time = now
            ch.pending_writes.append(req)
            st.writes_enqueued += 1
            self._arm_refill(ch)
            return ACCEPTED
        return STALLED_FULL

    def enqueue_or_wait(self, req: MemoryRequest, on_accept: Callable[[], None] | None = None) -> bool:
        """Enqueue; on back-pressure retry automatically once space frees.

        Equivalent to the agent retrying every cycle: the retry succeeds on the
        first cycle with space, which is exactly when the waiter is woken.
        """
        if self.enqueue(req) == ACCEPTED:
            return True
        ch = self.channels[req.channel]
        if req.is_write:
            ch.pending_waiters.append(lambda: self._retry(req, on_accept))
        else:
            ch.read_waiters.append((req, on_accept))
        return False

    def _retry(self, req, on_accept):
        if self.enqueue_or_wait(req, on_accept) and on_accept is not None:
            on_accept()

    def wait_for_write_space(self, channel: int, waiter: Callable[[], None]):
        self.channels[channel].pending_waiters.append(waiter)

    def _push_write(self, ch: ChannelBuffers, req: MemoryRequest):
        ch.write_q.append(req)
        ch.write_banks[req.bank] += 1
        st = ch.stats
        n = len(ch.write_q)
        if n > st.max_write_q:
            st.max_write_q = n
        if n >= self.W and self.drain_family and not ch.draining:
            ch.draining = True
            ch.drain_start = self.engine.now
            st.drain_episodes += 1

    # --- scheduling ----------------------------------------------------------
    def _arm(self, ch: ChannelBuffers):
        if ch.armed:
            return
        if not ch.read_q and not ch.write_q:
            return
        head = self.pick(ch)
        if head is None:
            return  # a batched drain is in flight; its end re-arms
        at = ch.bus_free
        busy = ch.banks[head.bank].busy_until
        if busy > at:
            at = busy
        t = self.to_ps(at)
        now = self.engine.now
        if t <= now and not ch.in_tick:
            self._step(ch)
            return
        ch.armed = True
        self.engine.post(t if t > now else now, self._step, ch)

    def _refill_ready(self, ch: ChannelBuffers) -> bool:
        return bool(ch.pending_writes) and not ch.draining and len(ch.write_q) < self.W

    def _arm_refill(self, ch: ChannelBuffers):
        if self._refill_ready(ch):
            self.arm_frontend()

    def arm_frontend(self):
        """Run the front end at the next MC clock edge (idempotent)."""
        if self._fe_armed:
            return
        if self._fe_running:
            self._fe_kicked = True
            return
        self._fe_armed = True
        f = self._f
        now = self.engine.now
        self.engine.post((-((-now * f) // PS_PER_SECOND) + 1) * PS_PER_SECOND // f, self._frontend)

    def _frontend(self):
        """Queue transfers, one MC cycle per iteration.

        Each channel moves at most one pending write into its write queue,
        then the attached ``source`` (the LLC writeback buffer) may hand over
        one entry.  While nothing else is scheduled before the next cycle the
        loop advances time itself rather than posting an event per cycle.
        """
        eng = self.engine
        self._fe_armed = False
        self._fe_running = True
        chans = self.channels
        W = self.W
        f = self._f
        while True:
            self._fe_kicked = False
            again = False
            for ch in chans:
                if ch.pending_writes and not ch.draining and len(ch.write_q) < W:
                    self._push_write(ch, ch.pending_writes.popleft())
                    self._arm(ch)
                    if ch.pending_waiters:
                        ch.pending_waiters.popleft()()
                    if ch.pending_writes and not ch.draining and len(ch.write_q) < W:
                        again = True
            if self.source is not None and self.source():
                again = True
            if not (again or self._fe_kicked):
                break
            nxt = (-((-eng.now * f) // PS_PER_SECOND) + 1) * PS_PER_SECOND // f
            if not eng.can_advance_to(nxt):
                self._fe_running = False
                self.arm_frontend()
                return
            eng.now = nxt
        self._fe_running = False

    def pick(self, ch: ChannelBuffers) -> MemoryRequest | None:
        """Policy decision: which queue head to dispatch now (without popping)."""
        rq, wq = ch.read_q, ch.write_q
        pol = self.policy
        if pol is Policy.READ_PRIORITY:
            if rq:
                return rq[0]
            return wq[0] if wq else None
        if ch.draining:
            if pol is Policy.STAGED_READS and rq and ch.write_banks[rq[0].bank] == 0:
                return rq[0]
            return wq[0] if wq else None
        if rq:
            return rq[0]
        return wq[0] if wq else None

    def tick(self, ch: ChannelBuffers | int, now: int | None = None) -> list[MemoryRequest]:
        """Dispatch at most one request on ``ch`` at time ``now`` (ps)."""
        if type(ch) is int:
            ch = self.channels[ch]
        if now is None:
            now = self.engine.now
        cyc = -((-now * self._f) // PS_PER_SECOND)
        if cyc < ch.bus_free:
            return []
        req = self.pick(ch)
        if req is None:
            return []
        if req.is_write and ch.draining and self.batch_drains:
            return self._drain_all(ch, cyc)
        bank = ch.banks[req.bank]
        if bank.busy_until > cyc:
            return []  # head-of-line waits for its bank
        st = ch.stats
        if req.is_write:
            ch.write_q.popleft()
            ch.write_banks[req.bank] -= 1
        else:
            if ch.draining:
                if self.check_invariants and self.policy is not Policy.STAGED_READS:
                    raise AssertionError(f"read dispatched on draining channel {ch.index}")
                st.reads_during_drain += 1
            ch.read_q.popleft()
            st.read_stall_ps.append(now - req.enqueue_time)
            if ch.read_waiters:
                wreq, cb = ch.read_waiters.popleft()
                self.engine.schedule(now, self._retry_read, (wreq, cb), "mc-retry")
        done = bank.service(req.is_write, req.row, cyc)
        ch.bus_free = cyc + self.burst
        req.dispatch_time = now
        req.complete_time = done * PS_PER_SECOND // self._f
        if self.dispatch_log is not None:
            self.dispatch_log.append((now, ch.index, req.id, req.is_write))
        if req.is_write:
            st.writes_completed += 1
            if ch.draining and not ch.write_q:
                ch.draining = False
                st.drain_windows.append((ch.drain_start, now))
            if not ch.draining:
                self._arm_refill(ch)
        else:
            st.reads_completed += 1
            if req.on_complete is not None:
                self.engine.post(req.complete_time + req.return_ps, req.on_complete,
                                 None if req.bare else req)
        return [req]

    def _drain_all(self, ch: ChannelBuffers, cyc: int) -> list[MemoryRequest]:
        """Dispatch a whole drain at once.

        Under drain_when_full nothing can interleave with a drain: new writes
        go to pending_writes and reads wait, so each write's dispatch cycle is
        known now.  The draining flag is cleared by an event at the last
        dispatch, exactly when the one-at-a-time path would clear it.
        """
        wq = ch.write_q
        banks = ch.banks
        burst = self.timing.burst_cycles
        to_ps = self.to_ps
        st = ch.stats
        log = self.dispatch_log
        bus_free = ch.bus_free
        out = []
        while wq:
            req = wq.popleft()
            bank = banks[req.bank]
            c = cyc if cyc > bus_free else bus_free
            if bank.busy_until > c:
                c = bank.busy_until
            done = bank.service(True, req.row, c)
            bus_free = c + burst
            cyc = c
            req.dispatch_time = to_ps(c)
            req.complete_time = to_ps(done)
            if log is not None:
                log.append((req.dispatch_time, ch.index, req.id, True))
            out.append(req)
        ch.write_banks = [0] * len(banks)
        ch.bus_free = bus_free
        st.writes_completed += len(out)
        end = to_ps(cyc)
        now = self.engine.now
        self.engine.post(end if end > now else now, self._end_drain, ch)
        return out

    def _end_drain(self, ch: ChannelBuffers):
        ch.draining = False
        ch.stats.drain_windows.append((ch.drain_start, self.engine.now))
        self._arm_refill(ch)
        self._arm(ch)

    def _retry_read(self, item):
        req, cb = item
        if self.enqueue_or_wait(req, cb) and cb is not None:
            cb()

    def _step(self, ch: ChannelBuffers):
        ch.armed = False
        ch.in_tick = True
        self.tick(ch)
        ch.in_tick = False
        self._arm(ch)

    # --- introspection -------------------------------------------------------
    def stats(self, channel: int) -> ControllerStats:
        ch = self.channels[channel]
        st = ch.stats
        st.row_hits = sum(b.hits for b in ch.banks)
        st.row_misses = sum(b.misses for b in ch.banks)
        st.row_conflicts = sum(b.conflicts for b in ch.banks)
        return st

    def quiescent(self) -> bool:
        return all(not c.read_q and not c.write_q and not c.pending_writes for c in self.channels)

    def outstanding_writes(self) -> int:
        return sum(len(c.write_q) + len(c.pending_writes) for c in self.channels)


class ContentionCounter:
    """Per-read counts of trojan writes sharing channel / bank group / bank.

    Reads and writes are recorded by origin class; :meth:`counts` evaluates
    every (read, write) pair through per-resource histograms, which is exact
    and O(N + M).
    """

    def __init__(self, mapping: AddressMapping, read_origin: str = CPU, write_origin: str = ACCEL):
        self.mapping = mapping
        self.read_origin = read_origin
        self.write_origin = write_origin
        self.reads: list[int] = []
        self.writes: list[int] = []

    def observe(self, req: MemoryRequest):
        cls = origin_class(req.origin)
        if req.is_write and cls == self.write_origin:
            self.writes.append(req.addr)
        elif not req.is_write and cls == self.read_origin:
            self.reads.append(req.addr)

    def replay(self, reads: Iterable[int], writes: Iterable[int]):
        self.reads.extend(reads)
        self.writes.extend(writes)

    def counts(self) -> dict[str, np.ndarray]:
        return contention_counts(self.reads, self.writes, self.mapping)


def contention_counts(reads, writes, mapping: AddressMapping) -> dict[str, np.ndarray]:
    r = decode_array(reads, mapping)
    w = decode_array(writes, mapping)
    nb = mapping.banks_per_group
    ng = mapping.bank_groups
    ch_hist = np.bincount(w["channel"], minlength=2)
    bg_key_w = w["channel"] * ng + w["bank_group"]
    bg_hist = np.bincount(bg_key_w, minlength=2 * ng)
    bank_key_w = bg_key_w * nb + w["bank"]
    bank_hist = np.bincount(bank_key_w, minlength=2 * ng * nb)
    bg_key_r = r["channel"] * ng + r["bank_group"]
    return {
        "channel": ch_hist[r["channel"]],
        "bank_group": bg_hist[bg_key_r],
        "bank": bank_hist[bg_key_r * nb + r["bank"]],
    }
