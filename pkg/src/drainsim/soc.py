"""Wiring of the shared memory path: private L2s, LLC, writeback buffer, MC.

``MemorySystem`` is what the agents talk to.  All latencies are converted to
picoseconds once at construction.  Reads return through callbacks; stores are
posted (the caller only learns whether the store was accepted or had to wait
for writeback-buffer space).
"""
from __future__ import annotations

from typing import Callable

from .cache import ACCEL_OWNED, DIRTY, SetAssocCache, WritebackBuffer
from .config import SocConfig
from .memctrl import ACCEL, CPU, MemoryController, MemoryRequest
from .simcore import ClockDomain, Engine

LINE = 64


class MemorySystem:
    def __init__(self, engine: Engine, cfg: SocConfig, check_invariants: bool = True):
        self.engine = engine
        self.cfg = cfg
        self.mapping = cfg.address_mapping()
        self.mc = MemoryController(engine, self.mapping, cfg.controller_config(),
                                   cfg.dram_timing(), check_invariants)
        c = cfg.cache
        self.llc = SetAssocCache(cfg.scaled(c.llc_size), c.llc_ways, LINE, c.accel_llc_ways)
        self.l2: dict[int, SetAssocCache] = {}
        self.igpu_l3 = SetAssocCache(cfg.scaled(c.igpu_l3_size), c.igpu_l3_ways, LINE)
        self.wb = WritebackBuffer(c.wb_entries)
        self.wb.on_push = self._kick
        self._wb_origin: dict[int, str] = {}
        self._wb_blocked = False
        self.mc.source = self._ingress

        self.cpu_clock = ClockDomain("cpu", cfg.clocks.cpu_hz)
        self.accel_clock = ClockDomain("accelerator", cfg.clocks.accel_hz)
        lat = cfg.latency
        cp, ap = self.cpu_clock.cycles, self.accel_clock.cycles
        self.t_l2 = cp(lat.cpu_l2_hit)
        self.t_llc = cp(lat.cpu_llc_hit)
        self.t_miss = cp(lat.cpu_miss_path)
        self.t_ret = cp(lat.cpu_return_path)
        self.t_cpu_store = cp(lat.cpu_store)
        self.t_gl3 = ap(lat.accel_l3_hit)
        self.t_gllc = ap(lat.accel_llc)
        self.t_gret = ap(lat.accel_return_path)
        self.mem_reads = 0

    # --- helpers -------------------------------------------------------------
    def l2_of(self, core: int) -> SetAssocCache:
        l2 = self.l2.get(core)
        if l2 is None:
            c = self.cfg.cache
            l2 = self.l2[core] = SetAssocCache(self.cfg.scaled(c.l2_size), c.l2_ways, LINE)
        return l2

    def _evict(self, victim, dirty, origin, on_accept=None) -> bool:
        """Send a dirty victim to the writeback buffer; False if it had to wait.

        ``origin`` is the owner of the line (who filled it), which is who the
        memory controller sees as the writer.
        """
        if victim is None or not dirty:
            return True
        if origin != ACCEL:
            self._wb_origin[victim] = origin
        elif self._wb_origin:
            self._wb_origin.pop(victim, None)
        return self.wb.push(victim, on_accept)

    # --- writeback buffer -> memory controller --------------------------------
    def _kick(self):
        if not self._wb_blocked:
            self.mc.arm_frontend()

    def _unblock(self):
        self._wb_blocked = False
        self.mc.arm_frontend()

    def _ingress(self) -> bool:
        """Hand the buffer head to the MC; called once per MC cycle."""
        wb = self.wb
        entries = wb.entries
        if not entries or self._wb_blocked:
            return False
        line = entries[0]
        mc = self.mc
        addr = line << 6
        ch = mc.channels[mc.channel_for(addr)]
        if not mc.write_accepts(ch):
            self._wb_blocked = True
            ch.pending_waiters.append(self._unblock)
            return False
        origin = self._wb_origin.pop(line, ACCEL) if self._wb_origin else ACCEL
        mc.enqueue_write(ch, MemoryRequest(mc.new_id(), True, addr, origin, self.engine.now))
        wb.pop()
        return True

    # --- CPU side --------------------------------------------------------------
    def cpu_flush(self, core: int, addr: int):
        line = addr >> 6
        self.l2_of(core).invalidate(line)
        f = self.llc.remove(line)
        if f is not None and f & DIRTY:
            self._evict(line, True, ACCEL if f & ACCEL_OWNED else CPU)
        return f is not None

    def cpu_load(self, core: int, addr: int, done: Callable[[], None], origin: str = CPU):
        """Timed load; ``done`` fires when data returns to the core."""
        line = addr >> 6
        eng = self.engine
        now = eng.now
        if self.l2_of(core).access(line, False).hit:
            eng.post(now + self.t_l2, done)
            return
        r = self.llc.access(line, False)
        if r.hit:
            eng.post(now + self.t_llc, done)
            return
        self.mem_reads += 1
        self._read_miss(r, line, origin, self.t_miss, self.t_ret, done)

    def _read_miss(self, r, line: int, origin: str, path_ps: int, ret_ps: int, done):
        """Send a fill request after ``path_ps``; a dirty victim that finds the
        writeback buffer full holds the request back until it is accepted."""
        if r.victim_dirty and not self._evict(r.victim, True, ACCEL if r.victim_accel else CPU,
                                              lambda: self._send_read(line, origin, path_ps, ret_ps, done)):
            return
        self._send_read(line, origin, path_ps, ret_ps, done)

    def _send_read(self, line, origin, path_ps, ret_ps, done):
        mc = self.mc
        t = self.engine.now + path_ps
        req = MemoryRequest(mc.new_id(), False, line << 6, origin, t, done)
        req.bare = True
        req.return_ps = ret_ps
        self.engine.post(t, mc.enqueue_or_wait, req)

    def cpu_store(self, core: int, addr: int, done: Callable[[], None]):
        """Store through the LLC (write-allocate, no fill); ``done`` on retire."""
        line = addr >> 6
        eng = self.engine
        r = self.llc.access(line, True)
        t = eng.now + self.t_cpu_store
        if r.hit or not r.victim_dirty:
            eng.post(t, done)
            return
        if self._evict(r.victim, True, ACCEL if r.victim_accel else CPU, lambda: eng.post(max(t, eng.now), done)):
            eng.post(t, done)

    # --- accelerator side -------------------------------------------------------
    def accel_store(self, line: int, on_accept: Callable[[], None]) -> bool:
        """Posted store of one coalesced line.  False: wait for ``on_accept``."""
        llc = self.llc
        victim = llc.accel_write(line)
        if victim < 0:
            return True
        if not llc.victim_accel:
            self._wb_origin[victim] = CPU
        elif self._wb_origin:
            self._wb_origin.pop(victim, None)
        return self.wb.push(victim, on_accept)

    def accel_load(self, line: int, done: Callable[[], None]):
        eng = self.engine
        now = eng.now
        if self.igpu_l3.access(line, False).hit:
            eng.post(now + self.t_gl3, done)
            return
        r = self.llc.access(line, False, True)
        if r.hit:
            eng.post(now + self.t_gllc, done)
            return
        self._read_miss(r, line, ACCEL, self.t_gllc, self.t_gret, done)

    def writeback_all(self) -> int:
        """Write every dirty LLC line back (lines stay resident, now clean).

        Returns the number of lines queued; they reach the controller through
        the writeback buffer like any other eviction.
        """
        llc = self.llc
        n = 0
        for s in llc._sets.values():
            for line, f in list(s.items()):
                if f & DIRTY:
                    s[line] = f & ~DIRTY
                    self._evict(line, True, ACCEL if f & ACCEL_OWNED else CPU)
                    n += 1
        return n

    def writes_in_flight(self) -> int:
        return len(self.wb) + len(self.wb.waiters) + self.mc.outstanding_writes()


def llc_owner_counts(llc: SetAssocCache) -> tuple[int, int]:
    """(cpu_lines, accelerator_lines) currently resident."""
    acc = sum(1 for s in llc._sets.values() for f in s.values() if f & ACCEL_OWNED)
    total = sum(len(s) for s in llc._sets.values())
    return total - acc, acc
