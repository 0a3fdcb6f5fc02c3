"""Traffic generators: the timed CPU reader (spy), a CPU writer/reader, and the
accelerator kernel model with work-group scheduling and coalescing.
"""
from __future__ import annotations

import math
from functools import partial
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .addrmap import decode_array, global_bank_array
from .cache import coalesce
from .config import ConfigError, SocConfig
from .simcore import ClockDomain, Engine
from .soc import MemorySystem

# Disjoint, 1 GiB aligned buffers for the different agents.
KERNEL_BASE = 1 << 30
SPY_BASE = 2 << 30
WRITER_BASE = 3 << 30
INDEX_BASE = (3 << 29)  # int32 index array read by index_read_first kernels

DISTINCT, SAME = "distinct", "same"
READ, WRITE = "read", "write"


@dataclass
class LatencyTrace:
    """Spy samples: issue time (ps), latency (CPU cycles), address."""
    issue_ps: list = field(default_factory=list)
    latency: list = field(default_factory=list)
    addr: list = field(default_factory=list)

    def append(self, issue: int, cycles: int, addr: int):
        if self.issue_ps and issue <= self.issue_ps[-1]:
            raise ValueError("issue times must be strictly increasing")
        self.issue_ps.append(issue)
        self.latency.append(cycles)
        self.addr.append(addr)

    def __len__(self):
        return len(self.issue_ps)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.issue_ps, dtype=np.int64), np.asarray(self.latency, dtype=np.float64)

    def window(self, start: int, end: int) -> "LatencyTrace":
        t, _ = self.arrays()
        a, b = np.searchsorted(t, [start, end])
        return LatencyTrace(self.issue_ps[a:b], self.latency[a:b], self.addr[a:b])

    def mean(self) -> float:
        return float(np.mean(self.latency)) if self.latency else float("nan")


@dataclass
class SpyConfig:
    buffer_bytes: int = 32 * 2**20
    stride_lines: int = 64
    use_flush: bool = False
    channel_filter: int | None = None
    bank_filter: tuple | None = None  # allowed global bank ids
    jitter_cycles: float = 0.0
    sample_sink: LatencyTrace | None = None

    def validate(self, llc_size: int | None = None) -> list[str]:
        errs = []
        if self.stride_lines < 1:
            errs.append("spy: stride_lines must be >= 1")
        if self.buffer_bytes < self.stride_lines * 64:
            errs.append("spy: buffer_bytes smaller than one stride")
        if llc_size is not None and not self.use_flush and self.buffer_bytes < llc_size:
            errs.append("spy: buffer_bytes must be >= llc size when use_flush is false")
        return errs


@dataclass(frozen=True)
class AcceleratorGeometry:
    subslices: int = 3
    eus_per_subslice: int = 8
    threads_per_eu: int = 7

    def __post_init__(self):
        if min(self.subslices, self.eus_per_subslice, self.threads_per_eu) < 1:
            raise ConfigError(["accelerator geometry values must be positive"])

    @property
    def wavefront_slots(self) -> int:
        """Resident wavefronts (hardware threads) per subslice."""
        return self.eus_per_subslice * self.threads_per_eu


@dataclass
class KernelConfig:
    buffer_bytes: int = 32 * 2**20
    stride_lines: int = 8
    global_threads: int = 256
    local_threads: int = 128
    wavefront_size: int = 16
    access_kind: str = WRITE
    target_lines: str = DISTINCT
    channel_filter: int | None = None
    bank_filter: tuple | None = None  # allowed global bank ids
    index_read_first: bool = False
    requests: int | None = None  # raw per-thread accesses in total; None = one pass
    base: int = KERNEL_BASE

    def validate(self) -> list[str]:
        errs = []
        if not 1 <= self.local_threads <= 256:
            errs.append("kernel: local_threads must lie in [1, 256]")
        if self.global_threads < 1:
            errs.append("kernel: global_threads must be >= 1")
        if self.wavefront_size not in (8, 16, 32):
            errs.append("kernel: wavefront_size must be 8, 16 or 32")
        if self.stride_lines < 1:
            errs.append("kernel: stride_lines must be >= 1")
        if self.access_kind not in (READ, WRITE):
            errs.append("kernel: access_kind must be read or write")
        if self.target_lines not in (DISTINCT, SAME):
            errs.append("kernel: target_lines must be distinct or same")
        if self.channel_filter not in (None, 0, 1):
            errs.append("kernel: channel_filter must be 0, 1 or unset")
        if self.requests is not None and self.requests < 0:
            errs.append("kernel: requests must be >= 0")
        return errs

    @property
    def work_groups(self) -> int:
        return math.ceil(self.global_threads / self.local_threads)


@dataclass
class KernelStats:
    requests: int = 0        # thread-level accesses
    coalesced: int = 0       # line requests after coalescing
    index_reads: int = 0
    start_ps: int = 0
    body_start_ps: int = 0
    finish_ps: int = 0
    wg_subslice: list = field(default_factory=list)
    lines: list | None = None  # delivered line indices, when recorded

    @property
    def duration_ps(self) -> int:
        return self.finish_ps - self.start_ps


def round_robin(work_groups: int, subslices: int) -> list[int]:
    return [j % subslices for j in range(work_groups)]


def filtered_offsets(cfg: KernelConfig, mapping, count: int) -> np.ndarray:
    """Line offsets of the first ``count`` stride positions that pass the filter."""
    n_cand = cfg.buffer_bytes // (cfg.stride_lines * 64)
    cand = np.arange(n_cand, dtype=np.int64) * cfg.stride_lines
    if cfg.channel_filter is not None:
        addr = (cfg.base + cand * 64).astype(np.uint64)
        ch = decode_array(addr, mapping)["channel"]
        cand = cand[ch == cfg.channel_filter]
    if cfg.bank_filter is not None:
        addr = (cfg.base + cand * 64).astype(np.uint64)
        cand = cand[np.isin(global_bank_array(addr, mapping), list(cfg.bank_filter))]
    if count < 0:
        return cand
    if count > len(cand):
        raise ConfigError([f"kernel: buffer of {cfg.buffer_bytes} bytes holds {len(cand)} usable "
                           f"lines at stride {cfg.stride_lines}, {count} requested"])
    return cand[:count]


class _Wave:
    __slots__ = ("threads", "eu", "it", "pending", "t_ready", "reads_left", "wg", "same_lines",
                 "op_done")

    def __init__(self, threads, eu, wg):
        self.threads = threads
        self.eu = eu
        self.wg = wg
        self.it = 0
        self.pending = 0
        self.t_ready = 0
        self.reads_left = 0
        self.same_lines = None
        self.op_done = None  # per-wave completion callback, set by the accelerator


class Accelerator:
    """Integrated GPU model: one kernel at a time."""

    def __init__(self, system: MemorySystem, geometry: AcceleratorGeometry | None = None):
        self.sys = system
        self.eng: Engine = system.engine
        cfg: SocConfig = system.cfg
        a = cfg.accelerator
        self.geometry = geometry or AcceleratorGeometry(a.subslices, a.eus_per_subslice, a.threads_per_eu)
        self.clock = ClockDomain("accelerator", cfg.clocks.accel_hz)
        self.launch_ps = int(cfg.scaled(a.launch_overhead_us) * 1e6)
        self.wg_ps = int(cfg.scaled(a.wg_dispatch_us) * 1e6)
        self.store_ps = self.clock.cycles(cfg.latency.accel_store_issue)
        self.load_ps = self.clock.cycles(cfg.latency.accel_load_issue)
        self.cycle_ps = self.clock.cycles(1)
        # stores from different wavefronts to one line serialise at the cache
        self.line_ps = self.clock.cycles(cfg.latency.accel_same_line)
        self._line_free: dict[int, int] = {}
        self.busy = False
        self.record_lines = False

    def launch(self, kcfg: KernelConfig, on_done: Callable[[KernelStats], None] | None = None) -> KernelStats:
        errs = kcfg.validate()
        if errs:
            raise ConfigError(errs)
        if self.busy:
            raise ConfigError(["accelerator already runs a kernel"])
        G = kcfg.global_threads
        if kcfg.target_lines == DISTINCT:
            if kcfg.requests is not None:
                n = kcfg.requests
                offs = filtered_offsets(kcfg, self.sys.mapping, n)
            else:
                offs = filtered_offsets(kcfg, self.sys.mapping, -1)
                n = len(offs)
            self._lines = [int(x) for x in (kcfg.base >> 6) + offs]
        else:
            if kcfg.requests is None:
                raise ConfigError(["kernel: same-line kernels need an explicit request count"])
            n = kcfg.requests
            off = filtered_offsets(kcfg, self.sys.mapping, 1)[0]
            self._same_base = kcfg.base + int(off) * 64
        self.k = kcfg
        self.n = n
        self.iters = math.ceil(n / G) if n else 0
        self.on_done = on_done
        self.busy = True
        now = self.eng.now
        st = self.stats = KernelStats(start_ps=now, body_start_ps=now + self.launch_ps)
        if self.record_lines:
            st.lines = []
        g = self.geometry
        wgs = kcfg.work_groups
        st.wg_subslice = round_robin(wgs, g.subslices)
        self._wg_queue = list(range(wgs))
        self._slots_free = [g.wavefront_slots] * g.subslices
        self._eu_load = [[0] * g.eus_per_subslice for _ in range(g.subslices)]
        self._eu_next = {}
        self._live_waves = 0
        self._wg_waves_left = {}
        self._dispatch_blocked = False
        self._line_free = {}
        if self.iters == 0:
            self.eng.post(st.body_start_ps, self._finish)
        else:
            self.eng.post(st.body_start_ps + self.wg_ps, self._dispatch_next)
        return st

    # --- work-group dispatch -----------------------------------------------------
    def _waves_of(self, wg: int) -> list[range]:
        k = self.k
        lo = wg * k.local_threads
        hi = min(lo + k.local_threads, k.global_threads)
        w = k.wavefront_size
        return [range(t, min(t + w, hi)) for t in range(lo, hi, w)]

    def _dispatch_next(self):
        if not self._wg_queue:
            return
        wg = self._wg_queue[0]
        ss = self.stats.wg_subslice[wg]
        waves = self._waves_of(wg)
        if self._slots_free[ss] < len(waves):
            self._dispatch_blocked = True
            return
        self._wg_queue.pop(0)
        self._slots_free[ss] -= len(waves)
        self._wg_waves_left[wg] = len(waves)
        loads = self._eu_load[ss]
        now = self.eng.now
        for threads in waves:
            eu = min(range(len(loads)), key=loads.__getitem__)
            loads[eu] += 1
            wv = _Wave(threads, (ss, eu), wg)
            wv.op_done = partial(self._op_done, wv)
            self._live_waves += 1
            self.eng.post(now, self._issue, wv)
        if self._wg_queue:
            self.eng.post(now + self.wg_ps, self._dispatch_next)

    def _retire(self, wv: _Wave):
        ss, eu = wv.eu
        self._eu_load[ss][eu] -= 1
        self._slots_free[ss] += 1
        self._live_waves -= 1
        self._wg_waves_left[wv.wg] -= 1
        if self._dispatch_blocked:
            self._dispatch_blocked = False
            self.eng.post(self.eng.now + self.wg_ps, self._dispatch_next)
        if self._live_waves == 0 and not self._wg_queue:
            self._finish()

    def _finish(self):
        self.busy = False
        self.stats.finish_ps = self.eng.now
        if self.on_done is not None:
            self.on_done(self.stats)

    # --- wavefront execution -------------------------------------------------------
    def _addresses(self, wv: _Wave, it: int) -> list[int]:
        G, n = self.k.global_threads, self.n
        base = it * G
        if self.k.target_lines == SAME:
            # neighbouring threads touch consecutive 8-byte words of one line
            return [self._same_base + (t % 8) * 8 for t in wv.threads if base + t < n]
        lines = self._lines
        return [lines[base + t] << 6 for t in wv.threads if base + t < n]

    def _batch(self, wv: _Wave, it: int) -> tuple[int, list[int]]:
        """(thread accesses, coalesced lines) for one iteration of ``wv``."""
        G, n = self.k.global_threads, self.n
        base = it * G
        t0, t1 = wv.threads.start, wv.threads.stop
        full = base + t1 <= n
        if self.k.target_lines == SAME:
            if full:
                if wv.same_lines is None:
                    wv.same_lines = coalesce(self._addresses(wv, it))
                return t1 - t0, wv.same_lines
            addrs = self._addresses(wv, it)
            return len(addrs), coalesce(addrs)
        hi = base + t1 if full else n
        lo = base + t0
        if hi <= lo:
            return 0, []
        # thread t touches line index base + t; distinct by construction
        return hi - lo, list(dict.fromkeys(self._lines[lo:hi]))

    def _index_addresses(self, wv: _Wave, it: int) -> list[int]:
        """Index-array words holding each active thread's next target index."""
        G, n = self.k.global_threads, self.n
        base = it * G
        m = max(len(self._lines) if self.k.target_lines == DISTINCT else n, 1)
        return [INDEX_BASE + 4 * ((base + G + t) % m) for t in wv.threads if base + t < n]

    def _issue(self, wv: _Wave):
        eng = self.eng
        now = eng.now
        key = wv.eu
        t_free = self._eu_next.get(key, 0)
        if t_free > now:
            eng.post(t_free, self._issue, wv)
            return
        self._eu_next[key] = now + self.cycle_ps
        if wv.it >= self.iters:
            self._retire(wv)
            return
        if self.k.index_read_first:
            lines = coalesce(self._index_addresses(wv, wv.it))
            if lines:
                self.stats.index_reads += len(lines)
                wv.reads_left = len(lines)
                done = lambda: self._index_read_done(wv)
                for ln in lines:
                    self.sys.accel_load(ln, done)
                return
        self._body(wv)

    def _index_read_done(self, wv: _Wave):
        wv.reads_left -= 1
        if wv.reads_left == 0:
            self._body(wv)

    def _body(self, wv: _Wave):
        eng = self.eng
        now = eng.now
        n_acc, lines = self._batch(wv, wv.it)
        st = self.stats
        st.requests += n_acc
        st.coalesced += len(lines)
        if st.lines is not None:
            st.lines.extend(lines)
        wv.it += 1
        wv.t_ready = now + self.store_ps
        if self.k.access_kind == READ:
            wv.pending = len(lines)
            if not lines:
                eng.post(wv.t_ready, self._issue, wv)
            cb = wv.op_done
            # the wave's load pipe sends one line request per issue slot
            lp = self.load_ps
            load = self.sys.accel_load
            for i, ln in enumerate(lines):
                if i == 0:
                    load(ln, cb)
                else:
                    eng.post(now + i * lp, partial(load, ln, cb))
            return
        sys = self.sys
        free = self._line_free
        lp = self.line_ps
        for ln in lines:
            t = free.get(ln, 0)
            if t < now:
                t = now
            free[ln] = t + lp
            if t + lp > wv.t_ready:
                wv.t_ready = t + lp
        cb = wv.op_done
        for ln in lines:
            if not sys.accel_store(ln, cb):
                wv.pending += 1
        if not wv.pending:
            eng.post(wv.t_ready, self._issue, wv)

    def _op_done(self, wv: _Wave):
        wv.pending -= 1
        if wv.pending == 0:
            now = self.eng.now
            self.eng.post(wv.t_ready if wv.t_ready > now else now, self._issue, wv)


class Spy:
    """Timed strided reader with one outstanding load."""

    def __init__(self, system: MemorySystem, cfg: SpyConfig, core: int = 0, base: int = SPY_BASE,
                 name: str = "spy"):
        errs = cfg.validate()
        if errs:
            raise ConfigError(errs)
        self.sys = system
        self.eng = system.engine
        self.cfg = cfg
        self.core = core
        self.trace = cfg.sample_sink if cfg.sample_sink is not None else LatencyTrace()
        n = cfg.buffer_bytes // (cfg.stride_lines * 64)
        addrs = base + np.arange(n, dtype=np.int64) * cfg.stride_lines * 64
        if cfg.channel_filter is not None:
            addrs = addrs[decode_array(addrs.astype(np.uint64), system.mapping)["channel"] == cfg.channel_filter]
        if cfg.bank_filter is not None:
            addrs = addrs[np.isin(global_bank_array(addrs.astype(np.uint64), system.mapping),
                                  list(cfg.bank_filter))]
        if len(addrs) == 0:
            raise ConfigError(["spy: no buffer address passes the channel/bank filter"])
        self.addrs = [int(a) for a in addrs]
        self.k = 0
        clk = system.cpu_clock
        self._f = clk.frequency_hz
        self.gap_ps = clk.cycles(system.cfg.latency.cpu_loop_gap)
        self.rng = self.eng.rng(name) if cfg.jitter_cycles > 0 else None
        self.until = 0
        self.running = False

    def start(self, at: int | None = None, until: int | None = None):
        self.until = until if until is not None else 2**62
        self.running = True
        self.eng.post(self.eng.now if at is None else at, self._issue, None)

    def stop(self):
        self.running = False

    def _issue(self):
        if not self.running or self.eng.now >= self.until:
            self.running = False
            return
        addr = self.addrs[self.k]
        self.k = (self.k + 1) % len(self.addrs)
        if self.cfg.use_flush:
            self.sys.cpu_flush(self.core, addr)
        self._t = self.eng.now
        self._addr = addr
        self.sys.cpu_load(self.core, addr, self._done)

    def _done(self):
        now = self.eng.now
        cyc = (now - self._t) * self._f // 10**12
        if self.rng is not None:
            cyc = max(1, int(round(cyc + self.rng.normal(0.0, self.cfg.jitter_cycles))))
        self.trace.append(self._t, int(cyc), self._addr)
        self.eng.post(now + self.gap_ps, self._issue, None)


class CpuWriter:
    """Sequential CPU traffic (one outstanding access) on another core."""

    def __init__(self, system: MemorySystem, buffer_bytes: int, stride_lines: int, kind: str,
                 count: int, core: int = 1, base: int = WRITER_BASE, use_flush: bool = True):
        if kind not in (READ, WRITE):
            raise ConfigError([f"cpu writer: kind must be read or write, got {kind!r}"])
        self.sys = system
        self.eng = system.engine
        self.kind = kind
        self.count = count
        self.core = core
        self.use_flush = use_flush
        self.n_lines = max(1, buffer_bytes // (stride_lines * 64))
        self.base = base
        self.step = stride_lines * 64
        self.done_count = 0
        self.finish_ps: int | None = None
        self.on_done: Callable[[int], None] | None = None

    def start(self, at: int | None = None, on_done: Callable[[int], None] | None = None):
        self.on_done = on_done
        self.eng.post(self.eng.now if at is None else at, self._next, None)

    def _next(self):
        if self.done_count >= self.count:
            self.finish_ps = self.eng.now
            if self.on_done is not None:
                self.on_done(self.finish_ps)
            return
        addr = self.base + (self.done_count % self.n_lines) * self.step
        self.done_count += 1
        if self.kind == WRITE:
            self.sys.cpu_store(self.core, addr, self._next)
        else:
            if self.use_flush:
                self.sys.cpu_flush(self.core, addr)
            self.sys.cpu_load(self.core, addr, self._next)


# --- synchronous convenience wrappers ----------------------------------------------

def run_spy(system: MemorySystem, cfg: SpyConfig, until: int) -> LatencyTrace:
    spy = Spy(system, cfg)
    spy.start(until=until)
    system.engine.run_until(until)
    return spy.trace


def run_kernel(system: MemorySystem, cfg: KernelConfig, accelerator: Accelerator | None = None) -> KernelStats:
    acc = accelerator or Accelerator(system)
    box = []
    acc.launch(cfg, box.append)
    system.engine.run(stop=lambda: bool(box))
    return box[0] if box else acc.stats


def run_cpu_writer(system: MemorySystem, buffer_bytes: int, stride_lines: int, kind: str, count: int) -> int:
    w = CpuWriter(system, buffer_bytes, stride_lines, kind, count)
    box = []
    w.start(on_done=box.append)
    system.engine.run(stop=lambda: bool(box))
    return box[0] if box else system.engine.now
