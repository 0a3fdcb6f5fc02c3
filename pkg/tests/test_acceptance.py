"""Acceptance criteria 1-10, each checked at its stated tolerance.

Every criterion records one PASS/FAIL line in ``RESULTS``; conftest prints
them at the end of the session.  The experiment outputs are produced through
``run_experiment`` exactly as the CLI would.
"""
import contextlib
import json
import random
import time

import numpy as np
import pytest

from drainsim.agents import SpyConfig
from drainsim.cache import SetAssocCache, Wavefront
from drainsim.config import SocConfig
from drainsim.harness import ExperimentSpec, run_experiment
from drainsim.memctrl import ControllerConfig, MemoryController, MemoryRequest, Policy
from drainsim.simcore import Engine
from drainsim.soc import MemorySystem
from test_cache import ReferenceLru, _reference_coalesce

RESULTS: dict[int, str] = {}
REFERENCE_RATE_BPS = 1650.0


@contextlib.contextmanager
def criterion(n: int, title: str):
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        RESULTS[n] = f"criterion {n:2d} FAIL  {title}: {'; '.join(notes)} [{type(exc).__name__}: {exc}]"
        print(RESULTS[n])
        raise
    RESULTS[n] = f"criterion {n:2d} PASS  {title}: {'; '.join(notes)}"
    print(RESULTS[n])


def _run(tmp_path_factory, name, **kw):
    out = tmp_path_factory.mktemp(name)
    t0 = time.perf_counter()
    res = run_experiment(ExperimentSpec(name, out=str(out), **kw))
    res.extra["wall_seconds"] = time.perf_counter() - t0
    return res


def _rows(res):
    return {r["run_id"]: r for r in res.summary}


@pytest.fixture(scope="module")
def e1(tmp_path_factory):
    return _run(tmp_path_factory, "E1_cpu_cpu")


@pytest.fixture(scope="module")
def e2(tmp_path_factory):
    return _run(tmp_path_factory, "E2_cpu_gpu")


@pytest.fixture(scope="module")
def e7(tmp_path_factory):
    return _run(tmp_path_factory, "E7_covert_eval", repetitions=10, seed=1, options={"bits": 1024})


# --- 1 --------------------------------------------------------------------------

def test_c1_drain_slowdown_ratio(e2):
    with criterion(1, "drain-induced slowdown") as notes:
        r = _rows(e2)
        w, same = r["accel_write"]["mean_norm"], r["accel_write_same"]["mean_norm"]
        notes += [f"distinct-line {w:.2f}x", f"same-line {same:.2f}x", f"{e2.extra['wall_seconds']:.1f} s"]
        assert 4.0 <= w <= 6.0
        assert same <= 1.3
        assert e2.extra["wall_seconds"] < 30


# --- 2 --------------------------------------------------------------------------

def test_c2_cpu_vs_accelerator(e1, e2):
    with criterion(2, "CPU vs accelerator asymmetry") as notes:
        r1, r2 = _rows(e1), _rows(e2)
        acc, cpu = r2["accel_write"], r1["cpu_write"]
        ratio = (acc["mean_norm"] - 1) / max(cpu["mean_norm"] - 1, 1e-9)
        notes += [f"accel/cpu write slowdown {acc['mean_norm']:.2f}/{cpu['mean_norm']:.3f}",
                  f"writes {acc['delivered_writes']}/{cpu['delivered_writes']}",
                  f"reads cpu {r1['cpu_read']['mean_norm']:.3f} accel {r2['accel_read']['mean_norm']:.3f}"]
        # equal delivered write counts, up to the last kernel's / store's granularity
        assert abs(acc["delivered_writes"] - cpu["delivered_writes"]) <= 0.02 * cpu["delivered_writes"]
        assert acc["mean_norm"] >= 2.5 * cpu["mean_norm"]
        assert ratio >= 2.5  # also holds for the excess over idle
        assert r1["cpu_read"]["mean_norm"] <= 1.3
        assert r2["accel_read"]["mean_norm"] <= 1.3


# --- 3 --------------------------------------------------------------------------

def test_c3_llc_hit_vs_miss(tmp_path_factory):
    with criterion(3, "LLC hit/miss discrimination") as notes:
        r = _rows(_run(tmp_path_factory, "E3_llc_hit_miss"))
        hit, miss = r["llc_hit"]["mean_norm"], r["llc_miss"]["mean_norm"]
        notes += [f"hit {hit:.2f}x", f"miss {miss:.2f}x", f"ratio {miss / hit:.2f}"]
        assert hit < miss
        assert miss / hit >= 2


# --- 4 --------------------------------------------------------------------------

def _parity(x: np.ndarray) -> np.ndarray:
    for s in (32, 16, 8, 4, 2, 1):
        x = x ^ (x >> np.uint64(s))
    return (x & np.uint64(1)).astype(np.int64)


def _bank_key(addrs: np.ndarray, mapping) -> np.ndarray:
    """Global bank id straight from the XOR masks (no shared decode code)."""
    key = np.zeros(len(addrs), dtype=np.int64)
    for f in mapping.functions():
        key = key * 2 + _parity(addrs & np.uint64(f.bit_mask))
    return key


def test_c4_contention_accounting(tmp_path_factory):
    with criterion(4, "contention-case accounting (full scale)") as notes:
        res = _run(tmp_path_factory, "E4_dram_contention", full_scale=True)
        reads = np.asarray(res.extra["reads"], dtype=np.uint64)
        writes = np.asarray(res.extra["writes"], dtype=np.uint64)
        c = res.extra["counts"]
        notes += [f"{len(reads)} reads", f"{len(writes)} writes",
                  f"channel cases {int(c['channel'].min())}..{int(c['channel'].max())}"]
        assert len(reads) == 2048 and len(writes) == 2**18
        assert np.all(c["channel"] == 131072)
        mapping = SocConfig().address_mapping()
        rk, wk = _bank_key(reads, mapping), _bank_key(writes, mapping)
        ref = np.empty(len(reads), dtype=np.int64)
        for i in range(0, len(reads), 64):
            ref[i:i + 64] = (rk[i:i + 64, None] == wk[None, :]).sum(axis=1)
        notes.append(f"bank cases {int(ref.min())}..{int(ref.max())} match pairwise")
        assert np.array_equal(ref, np.asarray(c["bank"]))


# --- 5 and 6 ----------------------------------------------------------------------

def _by_variant(e7):
    recs = e7.extra["records"]
    v1 = {r["seed"]: r for r in recs if r["variant"] == "channel_oblivious"}
    v2 = {r["seed"]: r for r in recs if r["variant"] == "single_channel"}
    return v1, v2


def test_c5_covert_variant1(e7):
    with criterion(5, "covert channel, channel-oblivious variant") as notes:
        v1, _ = _by_variant(e7)
        err = np.array([r["error_rate"] for r in v1.values()])
        rate = np.array([r["bit_rate_bps"] for r in v1.values()])
        notes += [f"{len(v1)} seeds x {v1[1]['bits']} bits", f"mean err {err.mean():.2%}",
                  f"max err {err.max():.2%}", f"rate {rate.mean():.0f} bps"]
        assert len(v1) == 10 and all(r["bits"] == 1024 for r in v1.values())
        assert err.mean() <= 0.01 and err.max() <= 0.02
        assert 0.5 * REFERENCE_RATE_BPS <= rate.mean() <= 2 * REFERENCE_RATE_BPS


def test_c6_covert_variant2(e7):
    with criterion(6, "covert channel, single-channel variant") as notes:
        v1, v2 = _by_variant(e7)
        err = np.array([r["error_rate"] for r in v2.values()])
        ratios = np.array([v2[s]["bit_rate_bps"] / v1[s]["bit_rate_bps"] for s in v2])
        notes += [f"mean err {err.mean():.2%}", f"rate ratio {ratios.min():.2f}..{ratios.max():.2f}"]
        assert len(v2) == 10
        assert err.mean() <= 0.06
        assert np.all((ratios >= 2.0) & (ratios <= 3.5))


# --- 7 --------------------------------------------------------------------------

def test_c7_sweep_trends(tmp_path_factory):
    with criterion(7, "sweep trends") as notes:
        e5 = _run(tmp_path_factory, "E5_sweep_zero_factor")
        for s in sorted({r["stride"] for r in e5.summary}):
            errs = [r["error_rate"] for r in sorted(e5.summary, key=lambda r: r["zero_factor"])
                    if r["stride"] == s]
            notes.append(f"S={s} err(Z) {[round(e, 3) for e in errs]}")
            assert all(a >= b for a, b in zip(errs, errs[1:]))
        e6 = _run(tmp_path_factory, "E6_sweep_threads")
        loc = [r["error_rate"] for r in e6.summary if r["sweep"] == "local"]
        glob = {r["global_threads"]: r["error_rate"] for r in e6.summary if r["sweep"] == "global"}
        notes += [f"err(L) {[round(e, 3) for e in loc]}", f"err(G=256) {glob[256]:.3f}",
                  f"err(G=4096) {glob[4096]:.3f}"]
        assert all(a >= b for a, b in zip(loc, loc[1:]))
        assert glob[4096] >= 10 * glob[256]
        assert glob[4096] > glob[256]


# --- 8 --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def e8(tmp_path_factory):
    return _run(tmp_path_factory, "E8_mitigations")


def test_c8_mitigations(e8):
    with criterion(8, "mitigations") as notes:
        r = _rows(e8)
        rp, cp = r["read_priority"]["error_rate"], r["channel_partition"]["error_rate"]
        sr = e8.extra["slowdown_staged_reads"]
        notes += [f"baseline err {r['drain_when_full']['error_rate']:.1%}", f"read_priority err {rp:.1%}",
                  f"channel_partition err {cp:.1%}", f"staged_reads slowdown {sr:.2f}x "
                  f"(vs {e8.extra['slowdown_drain_when_full']:.2f}x)"]
        assert rp >= 0.40
        assert cp >= 0.40
        assert sr <= 1.5


# --- 9 --------------------------------------------------------------------------

def test_c9_mapping_recovery(tmp_path_factory):
    with criterion(9, "mapping recovery") as notes:
        res = _run(tmp_path_factory, "E9_recover_mapping")
        ok = [r["match"] for r in res.summary]
        notes += [f"{sum(ok)}/{len(ok)} partitions match", f"{res.extra['wall_seconds']:.1f} s"]
        assert len(ok) == 21 and all(ok)
        assert res.extra["wall_seconds"] < 60


# --- 10 -------------------------------------------------------------------------

REDUCED = {
    "E1_cpu_cpu": dict(options={"writes": 2048}),
    "E2_cpu_gpu": dict(options={"writes": 2048}),
    "E3_llc_hit_miss": dict(),
    "E4_dram_contention": dict(options={"reads": 256, "writes": 4096}),
    "E5_sweep_zero_factor": dict(options={"zero_factors": [8], "strides": [8]}),
    "E6_sweep_threads": dict(options={"local_threads": [128], "global_threads": [256]}),
    "E7_covert_eval": dict(repetitions=1, options={"bits": 128, "variants": [2]}),
    "E8_mitigations": dict(),
    "E9_recover_mapping": dict(options={"random_masks": 2}),
}


def _hashes(res):
    man = json.loads(res.manifest.read_text())
    return man["trace_hashes"], {f["path"]: f["sha256"] for f in man["files"]}


def _writeback_probe(seed: int) -> tuple[int, int, int, int]:
    """Random CPU loads and stores, spaced so the writeback buffer never fills.

    The span is four times the LLC, so most loads miss and many evict a dirty
    line.  Returns (misses, misses whose MC enqueue lagged the load by
    anything but the miss-path latency, writebacks, writeback stall events).
    """
    cfg = SocConfig()
    eng = Engine(seed)
    sysm = MemorySystem(eng, cfg)
    r = random.Random(seed)
    started: dict[int, int] = {}
    lags: list[int] = []
    orig = sysm.mc.enqueue_or_wait

    def spy_enqueue(req, on_accept=None):
        if not req.is_write and req.addr in started:
            lags.append(eng.now - started.pop(req.addr))
        return orig(req, on_accept)

    sysm.mc.enqueue_or_wait = spy_enqueue
    span = 4 * cfg.scaled(cfg.cache.llc_size) // 64
    t = 0
    for _ in range(50_000):
        t += r.randrange(100_000, 300_000)
        addr = (1 << 32) + r.randrange(span) * 64

        def go(addr=addr, store=r.random() < 0.5, core=r.randrange(2)):
            if store:
                sysm.cpu_store(core, addr, lambda: None)
            else:
                started[addr] = eng.now
                sysm.cpu_load(core, addr, lambda: None)
        eng.post(t, go)
    eng.run()
    bad = sum(1 for x in lags if x != sysm.t_miss)
    return len(lags), bad, sysm.wb.pushed, sysm.wb.stall_events


def test_c10_structural_properties(tmp_path_factory, e8):
    with criterion(10, "structural and property suites") as notes:
        # determinism: every experiment, rerun, identical trace and file hashes
        for name, kw in REDUCED.items():
            a = _hashes(_run(tmp_path_factory, name, seed=7, **kw))
            b = _hashes(_run(tmp_path_factory, name, seed=7, **kw))
            assert a == b, name
            assert a[0] or name == "E9_recover_mapping", name
        notes.append("9/9 experiments rerun byte-identical")

        # the no-read-during-drain check ran (check_invariants is on) through every
        # policy in the mitigation runs without firing; drain_when_full let no read
        # through, staged_reads may
        assert {r["policy"] for r in e8.summary} == {p.value for p in Policy}
        eng = Engine()
        mc = MemoryController(eng, SocConfig().address_mapping(), ControllerConfig())
        ch = mc.channels[0]
        ch.draining = True
        rd = MemoryRequest(1, False, 0, "cpu", 0)
        rd.bank, rd.enqueue_time = 0, 0
        ch.read_q.append(rd)
        mc.pick = lambda c: c.read_q[0]
        with pytest.raises(AssertionError):
            mc.tick(ch, 0)
        ch.draining = False
        mc.tick(ch, 0)  # the same read outside a drain is fine
        notes.append("drain assertion silent in all policies, fires only on a read during a drain")

        # LRU oracle over 10^4 random access sequences
        rng = random.Random(10)
        for case in range(10_000):
            ways = rng.choice((1, 2, 4, 8))
            sets = rng.choice((1, 2, 4))
            c, ref = SetAssocCache(sets * ways * 64, ways), ReferenceLru(sets, ways)
            for _ in range(rng.randrange(5, 40)):
                ln, w = rng.randrange(3 * sets * ways), rng.random() < 0.5
                got = c.access(ln, w)
                assert (got.hit, got.victim, got.victim_dirty) == ref.access(ln, w), case
        # coalescing oracle over 10^4 random wavefronts
        for _ in range(10_000):
            size = rng.choice((8, 16, 32))
            base = rng.randrange(1 << 24) * 4
            stride = rng.choice((0, 1, 4, 8, 16, 64, rng.randrange(1, 256)))
            addrs = tuple(base + i * stride for i in range(size))
            assert Wavefront(addrs).coalesce() == _reference_coalesce(addrs)
        notes.append("LRU and coalescing oracles agree on 10^4 cases each")

        # writebacks stay off the critical path of the read that caused them
        total = 0
        for seed in range(5):
            misses, bad, wbs, stalls = _writeback_probe(seed)
            assert wbs > 2000 and bad == 0 and stalls == 0, (seed, misses, bad, wbs, stalls)
            total += misses
        notes.append(f"{total} misses enqueued after exactly the miss path under writeback traffic, 0 stalls")
