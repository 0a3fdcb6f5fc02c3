import numpy as np
import pytest

from drainsim.agents import (KERNEL_BASE, READ, SAME, WRITE, Accelerator, KernelConfig, LatencyTrace,
                             Spy, SpyConfig, filtered_offsets, round_robin, run_cpu_writer, run_kernel,
                             run_spy)
from drainsim.config import ConfigError, SocConfig
from drainsim.simcore import Engine
from drainsim.soc import MemorySystem


def system(seed=1, **cfg_changes):
    cfg = SocConfig()
    for k, v in cfg_changes.items():
        sec, key = k.split("__")
        setattr(getattr(cfg, sec), key, v)
    return MemorySystem(Engine(seed), cfg)


def test_trace_is_strictly_increasing_and_windowed():
    tr = LatencyTrace()
    for i in range(10):
        tr.append(i * 10, 100 + i, i * 64)
    with pytest.raises(ValueError):
        tr.append(90, 1, 0)
    w = tr.window(20, 50)
    assert w.issue_ps == [20, 30, 40] and w.mean() == 103
    assert np.isnan(LatencyTrace().mean())


def test_round_robin_dispatch():
    assert round_robin(7, 3) == [0, 1, 2, 0, 1, 2, 0]


def test_filtered_offsets_respect_channel():
    s = system()
    k = KernelConfig(buffer_bytes=1 << 20, stride_lines=1, channel_filter=1)
    offs = filtered_offsets(k, s.mapping, -1)
    assert len(offs) == (1 << 14) // 2
    assert all(s.mapping.channel_of(KERNEL_BASE + int(o) * 64) == 1 for o in offs[:200])
    with pytest.raises(ConfigError):
        filtered_offsets(k, s.mapping, len(offs) + 1)


def test_kernel_config_is_validated():
    errs = KernelConfig(local_threads=0, wavefront_size=12, access_kind="x").validate()
    assert len(errs) == 3
    s = system()
    with pytest.raises(ConfigError):
        Accelerator(s).launch(KernelConfig(target_lines=SAME))


def test_distinct_write_kernel_reaches_memory():
    s = system()
    st = run_kernel(s, KernelConfig(buffer_bytes=4 << 20, stride_lines=1, global_threads=256))
    lines = (4 << 20) // 64
    assert st.requests == lines and st.coalesced == lines
    assert st.body_start_ps > st.start_ps and st.finish_ps > st.body_start_ps
    s.engine.run()
    delivered = sum(s.mc.stats(c).writes_completed for c in (0, 1))
    # everything beyond the accelerator's LLC share was evicted to DRAM
    share = s.cfg.scaled(s.cfg.cache.llc_size) * s.cfg.cache.accel_llc_ways // s.cfg.cache.llc_ways // 64
    assert delivered == lines - share


def test_same_line_kernel_coalesces_away():
    s = system()
    st = run_kernel(s, KernelConfig(buffer_bytes=1 << 20, target_lines=SAME, requests=4096))
    assert st.requests == 4096
    assert st.coalesced == 4096 // 16
    s.engine.run()
    assert sum(s.mc.stats(c).writes_completed for c in (0, 1)) == 0


def test_read_kernel_issues_loads():
    s = system()
    st = run_kernel(s, KernelConfig(buffer_bytes=1 << 20, stride_lines=4, access_kind=READ))
    assert st.coalesced == (1 << 20) // (4 * 64)
    s.engine.run()
    assert sum(s.mc.stats(c).reads_completed for c in (0, 1)) == st.coalesced
    assert s.mem_reads == 0  # only CPU loads are counted there


def test_spy_idle_latency_is_a_dram_round_trip():
    s = system()
    cfg = SpyConfig(buffer_bytes=s.cfg.scaled(32 << 20), stride_lines=64)
    tr = run_spy(s, cfg, 20_000_000)
    assert len(tr) > 100
    lat = np.asarray(tr.latency)
    lo = s.cfg.latency.cpu_miss_path + s.cfg.latency.cpu_return_path
    assert lat.min() >= lo
    assert np.median(lat) < 2 * lo


def test_spy_filter_and_jitter():
    s = system()
    sp = Spy(s, SpyConfig(buffer_bytes=1 << 20, stride_lines=1, channel_filter=0, use_flush=True,
                          jitter_cycles=5.0))
    assert all(s.mapping.channel_of(a) == 0 for a in sp.addrs)
    with pytest.raises(ConfigError):
        Spy(s, SpyConfig(buffer_bytes=32, stride_lines=1))


def test_cpu_writer_completes_its_count():
    s = system()
    t = run_cpu_writer(s, 1 << 20, 1, WRITE, 2000)
    assert t > 0
    with pytest.raises(ConfigError):
        run_cpu_writer(s, 1 << 20, 1, "erase", 1)


def test_same_seed_same_trace():
    def go():
        s = system(seed=5)
        acc = Accelerator(s)
        spy = Spy(s, SpyConfig(buffer_bytes=s.cfg.scaled(32 << 20), jitter_cycles=3.0))
        spy.start()
        acc.launch(KernelConfig(buffer_bytes=4 << 20, stride_lines=1))
        s.engine.run_until(3_000_000)
        return spy.trace.latency, spy.trace.issue_ps
    assert go() == go()
