"""Named experiments, their CSV/figure outputs and the run manifest.

Every experiment writes into ``<out>/<name>/``:

* ``raw.csv.gz``: one row per spy sample (run_id, sample_index, issue_ps,
  latency_cycles, addr_hex);
* ``summary.csv``: one row per sweep point;
* experiment-specific extras (per-bit decisions, contention counts, ...);
* ``*.png`` figures;
* ``manifest.json``: config hash, seed and the sha256 of every file above.

A failing experiment still writes a manifest, marked ``aborted`` and carrying
the reason, listing whatever files it had produced.
"""
from __future__ import annotations

import csv
import gzip
import hashlib
import io
import json
import math
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .addrmap import make_row_conflict_probe, random_mapping, recover_mapping, same_partition
from .agents import (READ, WRITE, Accelerator, CpuWriter, KernelConfig, LatencyTrace, Spy, SpyConfig,
                     run_kernel)
from .config import SocConfig, load_config, mapping_to_text
from .covert import DecoderState, EncodingParams, SecretMessage, encode_bit, run_covert, spy_config_for
from .memctrl import ContentionCounter, Policy
from .simcore import Engine
from .soc import MemorySystem

RAW_FIELDS = ["run_id", "sample_index", "issue_ps", "latency_cycles", "addr_hex"]
IDLE_PS = 20_000_000


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentSpec:
    name: str
    overrides: list = field(default_factory=list)
    repetitions: int | None = None     # None: the experiment's default
    out: Path | str = "results"
    config_path: str | None = None
    seed: int | None = None            # None: soc.seed from the config
    full_scale: bool = False
    options: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    name: str
    out_dir: Path
    files: list
    summary: list
    manifest: Path
    extra: dict = field(default_factory=dict)


class _Run:
    """Output staging for one experiment."""

    def __init__(self, spec: ExperimentSpec, cfg: SocConfig, seed: int, out_dir: Path):
        self.spec = spec
        self.cfg = cfg
        self.seed = seed
        self.out = out_dir
        self.files: list[Path] = []
        self.summary: list[dict] = []
        self.trace_hashes: dict[str, str] = {}
        self.extra: dict = {}
        # fixed gzip mtime so reruns are byte identical
        gz = gzip.GzipFile(out_dir / "raw.csv.gz", "wb", compresslevel=3, mtime=0)
        self._raw = io.TextIOWrapper(gz, newline="")
        self._raw.write(",".join(RAW_FIELDS) + "\n")
        self.files.append(out_dir / "raw.csv.gz")

    @property
    def opt(self) -> dict:
        return self.spec.options

    def add_trace(self, run_id: str, trace: LatencyTrace):
        t = np.asarray(trace.issue_ps, dtype=np.int64)
        lat = np.asarray(trace.latency, dtype=np.int64)
        self.trace_hashes[run_id] = trace_hash(trace)
        lines = [f"{run_id},{i},{a},{b},{c:#x}\n" for i, (a, b, c) in
                 enumerate(zip(t.tolist(), lat.tolist(), trace.addr))]
        self._raw.write("".join(lines))

    def add_row(self, row: dict):
        self.summary.append(row)

    def write_csv(self, name: str, rows: list[dict], fields: list[str] | None = None) -> Path:
        p = self.out / name
        fields = fields or (list(rows[0].keys()) if rows else [])
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r.get(k)) for k in fields})
        self.files.append(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.out / name
        p.write_text(text)
        self.files.append(p)
        return p

    def figure(self, name: str, fig) -> Path:
        p = self.out / name
        # no timestamp metadata, so figures hash identically across reruns
        fig.savefig(p, dpi=110, metadata={"Software": None}, bbox_inches="tight")
        import matplotlib.pyplot as plt
        plt.close(fig)
        self.files.append(p)
        return p

    def close_raw(self):
        if not self._raw.closed:
            self._raw.close()


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    if isinstance(v, (np.floating,)):
        return _fmt(float(v))
    return v


def trace_hash(trace: LatencyTrace) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(trace.issue_ps, dtype=np.int64).tobytes())
    h.update(np.asarray(trace.latency, dtype=np.int64).tobytes())
    h.update(np.asarray(trace.addr, dtype=np.int64).tobytes())
    return h.hexdigest()


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "drainsim"
    return plt


def _latency_stats(lat, idle: float) -> dict:
    a = np.asarray(lat, dtype=float)
    if a.size == 0 or not idle or math.isnan(idle):
        return {"samples": int(a.size), "mean_norm": float("nan"), "median_norm": float("nan"),
                "p95_norm": float("nan"), "mean_cycles": float("nan")}
    return {"samples": int(a.size), "mean_cycles": float(a.mean()),
            "mean_norm": float(a.mean() / idle), "median_norm": float(np.median(a) / idle),
            "p95_norm": float(np.percentile(a, 95) / idle)}


# --- shared building blocks -----------------------------------------------------------

def _bench(cfg: SocConfig, seed: int, spy_cfg: SpyConfig | None = None, warm_passes: int = 0):
    """Fresh system with the spy running; returns after the idle baseline.

    ``warm_passes`` full passes over the spy buffer come first, so a buffer
    that fits in the caches is measured warm.
    """
    eng = Engine(seed)
    sysm = MemorySystem(eng, cfg)
    spy = Spy(sysm, spy_cfg or SpyConfig(buffer_bytes=cfg.scaled(cfg.spy.buffer_bytes),
                                          stride_lines=cfg.spy.stride_lines,
                                          use_flush=cfg.spy.use_flush,
                                          jitter_cycles=cfg.spy.jitter_cycles))
    spy.start()
    t0 = 0
    if warm_passes:
        eng.run(stop=lambda: len(spy.trace) >= warm_passes * len(spy.addrs))
        t0 = eng.now
    eng.run_until(t0 + IDLE_PS)
    return eng, sysm, spy, spy.trace.window(t0, t0 + IDLE_PS).mean()


def _delivered_writes(sysm: MemorySystem) -> int:
    return sum(sysm.mc.stats(c).writes_enqueued for c in (0, 1))


def _samples_in(trace: LatencyTrace, windows) -> list:
    t, lat = trace.arrays()
    out = []
    for a, b in windows:
        i, j = np.searchsorted(t, [a, b])
        out.extend(lat[i:j].tolist())
    return out


def v1_kernel(cfg: SocConfig, bit: int, **kw) -> KernelConfig:
    params = replace(EncodingParams.variant1(cfg), **kw)
    return encode_bit(bit, params, cfg)


def target_writes(cfg: SocConfig, passes: int = 3) -> int:
    """Delivered-write budget shared by E1 and E2: ``passes`` bit-1 kernels."""
    k = v1_kernel(cfg, 1)
    return passes * (k.buffer_bytes // (k.stride_lines * 64))


def accel_load_run(cfg: SocConfig, seed: int, kernel: KernelConfig, warm: int, measure: int,
                   write_budget: int | None = None):
    """Back-to-back kernels next to the spy.

    ``warm`` kernels run first (they fill the LLC's accelerator ways so later
    stores evict).  Measured kernels follow until ``measure`` have run or, with
    ``write_budget``, until that many writes reached the controller.  Samples
    are taken inside the kernels' execution windows.
    """
    eng, sysm, spy, idle = _bench(cfg, seed)
    acc = Accelerator(sysm)
    for _ in range(warm):
        run_kernel(sysm, kernel, acc)
    base = _delivered_writes(sysm)
    windows = []
    n = 0
    while True:
        st = run_kernel(sysm, kernel, acc)
        windows.append((st.body_start_ps, st.finish_ps))
        n += 1
        if write_budget is not None:
            if _delivered_writes(sysm) - base >= write_budget or n >= 50:
                break
        elif n >= measure:
            break
    spy.stop()
    samples = _samples_in(spy.trace, windows)
    return spy.trace, idle, samples, _delivered_writes(sysm) - base, windows


def cpu_agent_run(cfg: SocConfig, seed: int, kind: str, budget: int, step_ps: int = 1_000_000):
    """CPU writer or reader on another core next to the spy.

    Writes: the window runs from the first write the controller receives to
    the ``budget``-th.  Reads: ``budget`` loads, all inside the window.
    """
    eng, sysm, spy, idle = _bench(cfg, seed)
    w = CpuWriter(sysm, cfg.scaled(64 * 2**20), 1, kind, 10**9 if kind == WRITE else budget,
                  core=1, use_flush=True)
    w.start()
    base = _delivered_writes(sysm)
    t0 = None
    limit = eng.now + 10**12
    while eng.now < limit:
        eng.run_until(eng.now + step_ps)
        if kind == WRITE:
            got = _delivered_writes(sysm) - base
            if t0 is None and got > 0:
                t0 = eng.now - step_ps
            if got >= budget:
                break
        elif w.finish_ps is not None:
            break
    if kind != WRITE:
        t0 = IDLE_PS
    spy.stop()
    window = (t0 if t0 is not None else IDLE_PS, eng.now)
    samples = _samples_in(spy.trace, [window])
    return spy.trace, idle, samples, _delivered_writes(sysm) - base, [window]


# --- experiments -------------------------------------------------------------------

def _load_row(run: _Run, run_id: str, mode: str, trace, idle, samples, delivered, windows, **extra):
    run.add_trace(run_id, trace)
    row = {"run_id": run_id, "mode": mode, "idle_mean_cycles": idle}
    row.update(_latency_stats(samples, idle))
    row["delivered_writes"] = delivered
    row["window_us"] = sum(b - a for a, b in windows) / 1e6
    row.update(extra)
    run.add_row(row)
    return row


def _norm_series(trace: LatencyTrace, idle: float, bin_ps: int = 2_000_000):
    t, lat = trace.arrays()
    if not len(t):
        return np.array([]), np.array([])
    bins = (t // bin_ps).astype(np.int64)
    cnt = np.bincount(bins)
    tot = np.bincount(bins, weights=lat)
    keep = cnt > 0
    x = np.flatnonzero(keep) * bin_ps / 1e6
    return x, tot[keep] / cnt[keep] / idle


def _plot_series(run: _Run, name: str, traces: dict, title: str):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for label, (trace, idle) in traces.items():
        x, y = _norm_series(trace, idle)
        ax.plot(x, y, lw=0.8, label=label)
    ax.set_xlabel("time (us)")
    ax.set_ylabel("spy latency / idle mean")
    ax.set_title(title)
    ax.legend(fontsize=8)
    run.figure(name, fig)


def exp_cpu_cpu(run: _Run):
    cfg, seed = run.cfg, run.seed
    budget = int(run.opt.get("writes", target_writes(cfg)))
    traces = {}
    for i, kind in enumerate((WRITE, READ)):
        trace, idle, samples, delivered, win = cpu_agent_run(cfg, seed + i, kind, budget)
        _load_row(run, f"cpu_{kind}", f"cpu_{kind}", trace, idle, samples, delivered, win)
        traces[f"CPU {kind}s"] = (trace, idle)
    _plot_series(run, "cpu_cpu.png", traces, "Spy latency next to a CPU agent")


def exp_cpu_gpu(run: _Run):
    cfg, seed = run.cfg, run.seed
    budget = int(run.opt.get("writes", target_writes(cfg)))
    one = v1_kernel(cfg, 1)
    zero = v1_kernel(cfg, 0)
    reads = replace(one, access_kind=READ)
    traces = {}
    cases = [("accel_write", "distinct-line stores", one, budget),
             ("accel_write_same", "same-line stores", zero, None),
             ("accel_read", "distinct-line loads", reads, None)]
    for i, (mode, label, k, wb) in enumerate(cases):
        trace, idle, samples, delivered, win = accel_load_run(cfg, seed + i, k, warm=2, measure=3,
                                                               write_budget=wb)
        _load_row(run, mode, mode, trace, idle, samples, delivered, win)
        traces[label] = (trace, idle)
    _plot_series(run, "cpu_gpu.png", traces, "Spy latency next to accelerator kernels")


def exp_llc_hit_miss(run: _Run):
    cfg, seed = run.cfg, run.seed
    one = v1_kernel(cfg, 1)
    sizes = {"llc_hit": int(run.opt.get("hit_buffer", 512 * 2**10)),
             "llc_miss": int(run.opt.get("miss_buffer", cfg.spy.buffer_bytes))}
    rows = []
    for i, (mode, size) in enumerate(sizes.items()):
        spy_cfg = SpyConfig(buffer_bytes=cfg.scaled(size), stride_lines=1 if mode == "llc_hit"
                            else cfg.spy.stride_lines)
        eng, sysm, spy, idle = _bench(cfg, seed + i, spy_cfg, warm_passes=1)
        acc = Accelerator(sysm)
        for _ in range(2):
            run_kernel(sysm, one, acc)
        base = _delivered_writes(sysm)
        wins = []
        for _ in range(3):
            st = run_kernel(sysm, one, acc)
            wins.append((st.body_start_ps, st.finish_ps))
        spy.stop()
        samples = _samples_in(spy.trace, wins)
        rows.append(_load_row(run, mode, mode, spy.trace, idle, samples,
                              _delivered_writes(sysm) - base, wins, spy_buffer_bytes=size))
    hit, miss = rows
    run.extra["miss_over_hit"] = miss["mean_norm"] / hit["mean_norm"]
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar(["LLC hit", "LLC miss"], [hit["mean_norm"], miss["mean_norm"]], color=["tab:green", "tab:red"])
    ax.axhline(1.0, color="k", lw=0.6)
    ax.set_ylabel("mean spy latency / idle mean")
    ax.set_title("Spy hit vs miss under accelerator stores")
    run.figure("llc_hit_miss.png", fig)


def exp_dram_contention(run: _Run):
    """Per spy read, how many trojan writes share its channel / bank group / bank."""
    cfg, seed = run.cfg, run.seed
    n_reads = int(run.opt.get("reads", 2048))
    n_writes = int(run.opt.get("writes", 2**18 // cfg.scale))
    eng = Engine(seed)
    sysm = MemorySystem(eng, cfg)
    counter = ContentionCounter(sysm.mapping)
    sysm.mc.contention = counter
    spy_cfg = SpyConfig(buffer_bytes=n_reads * 64 * 64, stride_lines=64, use_flush=True)
    spy = Spy(sysm, spy_cfg)
    k = KernelConfig(buffer_bytes=n_writes * 64, stride_lines=1,
                     global_threads=cfg.covert.global_threads, local_threads=cfg.covert.local_threads,
                     wavefront_size=cfg.accelerator.wavefront_size)
    acc = Accelerator(sysm)
    spy.start(until=None)
    acc.launch(k)
    # stop the spy after one pass over its buffer
    eng.run(stop=lambda: len(spy.trace) >= n_reads)
    spy.stop()
    eng.run(stop=lambda: not acc.busy)
    # push what is still dirty in the LLC out so every write is delivered
    sysm.writeback_all()
    eng.run()
    reads = counter.reads[:n_reads]
    writes = counter.writes
    if len(reads) < n_reads:
        raise ExperimentError(f"only {len(reads)} spy reads reached the controller")
    counts = ContentionCounter(sysm.mapping)
    counts.replay(reads, writes)
    c = counts.counts()
    run.add_trace("contention", spy.trace)
    rows = [{"read_index": i, "addr_hex": f"{a:#x}", "channel": int(c["channel"][i]),
             "bank_group": int(c["bank_group"][i]), "bank": int(c["bank"][i])} for i, a in enumerate(reads)]
    run.write_csv("contention.csv", rows)
    w = np.asarray(writes, dtype=np.int64)
    summ = {"run_id": "contention", "spy_reads": len(reads), "delivered_writes": len(writes),
            "distinct_writes": int(np.unique(w).size)}
    for key in ("channel", "bank_group", "bank"):
        v = c[key]
        summ.update({f"{key}_min": int(v.min()), f"{key}_max": int(v.max()), f"{key}_mean": float(v.mean())})
    run.add_row(summ)
    run.extra.update(reads=reads, writes=writes, counts=c)
    plt = _pyplot()
    for key, fname in (("bank_group", "contention_bank_group.png"), ("bank", "contention_bank.png")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.hist(c[key], bins=40)
        ax.set_xlabel(f"trojan writes sharing the spy read's {key.replace('_', ' ')}")
        ax.set_ylabel("spy reads")
        run.figure(fname, fig)


# --- covert channel experiments -----------------------------------------------------

def default_state(cfg: SocConfig, seed: int, bits: int = 128) -> DecoderState:
    """Decoder calibration from a default variant-1 transmission."""
    base = replace(cfg, covert=replace(cfg.covert), memctrl=replace(cfg.memctrl, policy=Policy.DRAIN_WHEN_FULL.value))
    res = run_covert(base, SecretMessage.random(bits, seed), EncodingParams.variant1(base), seed)
    return res.state


def _covert_rows(run: _Run, run_id: str, res, extra: dict) -> dict:
    run.add_trace(run_id, res.trace)
    m = res.metrics
    row = {"run_id": run_id}
    row.update(extra)
    row.update({"variant": res.variant, "seed": res.seed, "bits": m.length,
                "bit_rate_bps": m.equivalent_bit_rate_bps, "simulated_bit_rate_bps": m.bit_rate_bps,
                "error_rate": m.error_rate_fraction, "errors": m.errors, "synced": res.synced,
                "low_confidence_bits": m.low_confidence_bits, "threshold_cycles": res.state.threshold_cycles,
                "idle_mean_cycles": res.idle_mean, "contended_mean_cycles": res.contended_mean})
    run.add_row(row)
    return row


def _bits(run: _Run, default: int) -> int:
    return int(run.opt.get("bits", default))


def exp_sweep_zero_factor(run: _Run):
    cfg, seed = run.cfg, run.seed
    zs = run.opt.get("zero_factors", [1, 2, 4, 8])
    strides = run.opt.get("strides", [8, 16, 32])
    n = _bits(run, 128)
    state = default_state(cfg, seed)
    secret = SecretMessage.random(n, seed)
    for s in strides:
        for z in zs:
            p = replace(EncodingParams.variant1(cfg), stride_lines=int(s), zero_factor=int(z))
            res = run_covert(cfg, secret, p, seed, state=state)
            _covert_rows(run, f"S{s}_Z{z}", res, {"stride": s, "zero_factor": z})
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for s in strides:
        ys = [r["error_rate"] * 100 for r in run.summary if r["stride"] == s]
        ax.plot(zs, ys, marker="o", label=f"stride {s}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("bit-0 iteration factor Z")
    ax.set_ylabel("error rate (%)")
    ax.legend()
    run.figure("sweep_zero_factor.png", fig)


def exp_sweep_threads(run: _Run):
    cfg, seed = run.cfg, run.seed
    locals_ = run.opt.get("local_threads", [8, 16, 32, 64, 128])
    globals_ = run.opt.get("global_threads", [256, 512, 1024, 2048, 4096])
    n = _bits(run, 128)
    state = default_state(cfg, seed)
    secret = SecretMessage.random(n, seed)
    for L in locals_:
        p = replace(EncodingParams.variant1(cfg), local_threads=int(L), global_threads=256)
        res = run_covert(cfg, secret, p, seed, state=state)
        _covert_rows(run, f"L{L}_G256", res, {"sweep": "local", "local_threads": L, "global_threads": 256})
    for G in globals_:
        p = replace(EncodingParams.variant1(cfg), local_threads=128, global_threads=int(G))
        res = run_covert(cfg, secret, p, seed, state=state)
        _covert_rows(run, f"L128_G{G}", res, {"sweep": "global", "local_threads": 128, "global_threads": G})
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key, sweep in ((axes[0], "local_threads", "local"), (axes[1], "global_threads", "global")):
        rows = [r for r in run.summary if r["sweep"] == sweep]
        ax.plot([r[key] for r in rows], [r["error_rate"] * 100 for r in rows], marker="o")
        ax.set_xscale("log", base=2)
        ax.set_xlabel(key.replace("_", " "))
        ax.set_ylabel("error rate (%)")
    run.figure("sweep_threads.png", fig)


def exp_covert_eval(run: _Run):
    cfg, seed = run.cfg, run.seed
    reps = run.spec.repetitions or 10
    n = _bits(run, cfg.covert.secret_bits)
    variants = run.opt.get("variants", [1, 2])
    bit_rows = []
    records = []
    for v in variants:
        for s in range(seed, seed + reps):
            res = run_covert(cfg, SecretMessage.random(n, s), EncodingParams.for_variant(v, cfg), s)
            rid = f"v{v}_seed{s}"
            row = _covert_rows(run, rid, res, {"variant_id": v})
            records.append({"variant": res.variant, "seed": s, "bits": row["bits"],
                            "bit_rate_bps": row["bit_rate_bps"], "error_rate": row["error_rate"]})
            d = res.decoded
            bit_rows += [{"run_id": rid, "bit_index": i, "sent": int(res.secret.bits[i]),
                          "decision": int(d.bits[i]), "confidence": float(d.confidence[i]),
                          "low_confidence": bool(d.low_confidence[i])} for i in range(len(d))]
    run.write_csv("bits.csv", bit_rows)
    run.write_text("covert_summary.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    run.extra["records"] = records
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for v in variants:
        rows = [r for r in run.summary if r["variant_id"] == v]
        axes[0].plot([r["seed"] for r in rows], [r["error_rate"] * 100 for r in rows], marker="o", label=f"variant {v}")
        axes[1].plot([r["seed"] for r in rows], [r["bit_rate_bps"] / 1e3 for r in rows], marker="o", label=f"variant {v}")
    axes[0].set_ylabel("error rate (%)")
    axes[1].set_ylabel("bit rate (kbps, full-size equivalent)")
    for ax in axes:
        ax.set_xlabel("seed")
        ax.legend()
    run.figure("covert_eval.png", fig)


def bank_halves(mapping) -> tuple[tuple, tuple]:
    """Global bank ids split into two disjoint halves, each present on both channels."""
    per = mapping.banks_per_channel
    lo = tuple(c * per + b for c in range(2) for b in range(per // 2))
    hi = tuple(c * per + b for c in range(2) for b in range(per // 2, per))
    return lo, hi


def exp_mitigations(run: _Run):
    cfg, seed = run.cfg, run.seed
    n = _bits(run, 128)
    state = default_state(cfg, seed)
    secret = SecretMessage.random(n, seed)
    v1 = EncodingParams.variant1(cfg)

    def with_policy(policy: str) -> SocConfig:
        return replace(cfg, memctrl=replace(cfg.memctrl, policy=policy))

    cases = []
    res = run_covert(cfg, secret, v1, seed, state=state)
    cases.append(("drain_when_full", res, {}))
    res = run_covert(with_policy(Policy.READ_PRIORITY.value), secret, v1, seed, state=state)
    cases.append(("read_priority", res, {}))
    pc = with_policy(Policy.CHANNEL_PARTITION.value)
    owners = list(pc.memctrl.channel_partition_owner)
    acc_ch = owners.index("accelerator")
    cpu_ch = owners.index("cpu")
    res = run_covert(pc, secret, replace(v1, channel=acc_ch), seed, state=state,
                     spy_cfg=spy_config_for(pc, v1, channel_filter=cpu_ch))
    cases.append(("channel_partition", res, {"trojan_channel": acc_ch, "spy_channel": cpu_ch}))
    lo, hi = bank_halves(cfg.address_mapping())
    sc = with_policy(Policy.STAGED_READS.value)
    res = run_covert(sc, secret, replace(v1, bank_filter=lo), seed, state=state,
                     spy_cfg=spy_config_for(sc, v1, bank_filter=hi))
    cases.append(("staged_reads", res, {"disjoint_banks": True}))
    for policy, res, extra in cases:
        _covert_rows(run, policy, res, {"policy": policy, **extra})
    # slowdown seen by a bank-disjoint spy under staged reads, against the baseline policy
    for policy in (Policy.DRAIN_WHEN_FULL.value, Policy.STAGED_READS.value):
        c = with_policy(policy)
        k = v1_kernel(c, 1, bank_filter=lo)
        eng, sysm, spy, idle = _bench(c, seed, spy_config_for(c, v1, bank_filter=hi))
        acc = Accelerator(sysm)
        wins = []
        for i in range(5):
            st = run_kernel(sysm, k, acc)
            if i >= 2:
                wins.append((st.body_start_ps, st.finish_ps))
        spy.stop()
        stats = _latency_stats(_samples_in(spy.trace, wins), idle)
        run.extra[f"slowdown_{policy}"] = stats["mean_norm"]
        for r in run.summary:
            if r["run_id"] == policy:
                r["disjoint_bank_slowdown"] = stats["mean_norm"]
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([r["run_id"] for r in run.summary], [r["error_rate"] * 100 for r in run.summary])
    ax.axhline(50, color="k", lw=0.6, ls="--")
    ax.set_ylabel("variant-1 error rate (%)")
    ax.tick_params(axis="x", labelsize=8)
    run.figure("mitigations.png", fig)


def recover_configured(mapping, lo: int = 6, hi: int = 21, seed: int = 0, rounds: int = 256):
    probe = make_row_conflict_probe(mapping)
    cprobe = lambda a, b: mapping.channel_of(a) == mapping.channel_of(b)  # noqa: E731
    return recover_mapping(probe, range(lo, hi), rounds=rounds, rng=np.random.default_rng(seed),
                           channel_probe=cprobe, row_shift=mapping.row_shift)


def partition_matches(truth, got, seed: int = 0, n: int = 4096) -> bool:
    addrs = [int(a) for a in np.random.default_rng(seed).integers(0, 1 << 34, n)]
    ma = [f.bit_mask for f in truth.functions()]
    mb = [f.bit_mask for f in got.functions()]
    return (same_partition(addrs, ma, mb)
            and same_partition(addrs, [truth.channel_fn.bit_mask], [got.channel_fn.bit_mask]))


def exp_recover_mapping(run: _Run):
    cfg, seed = run.cfg, run.seed
    n_random = int(run.opt.get("random_masks", 20))
    lo, hi = run.opt.get("bits", (6, 21))
    rng = np.random.default_rng(seed)
    cases = [("configured", cfg.address_mapping())]
    cases += [(f"random_{i}", random_mapping(rng, lo, hi)) for i in range(n_random)]
    plt = _pyplot()
    for i, (name, truth) in enumerate(cases):
        t0 = time.process_time()
        got = recover_configured(truth, lo, hi, seed + i)
        ok = partition_matches(truth, got, seed + i)
        run.extra.setdefault("cpu_seconds", {})[name] = time.process_time() - t0
        row = {"run_id": name, "match": ok}
        for key, bits in truth.to_bit_lists().items():
            row[f"true_{key}"] = " ".join(map(str, bits))
        for key, bits in got.to_bit_lists().items():
            row[f"recovered_{key}"] = " ".join(map(str, bits))
        run.add_row(row)
        if i == 0:
            run.write_text("recovered_mapping.ini", mapping_to_text(got))
    # which address bits feed which function, for the configured mapping
    truth = cases[0][1]
    fns = truth.functions()
    grid = np.array([[f.bit_mask >> b & 1 for b in range(lo, hi)] for f in fns])
    fig, ax = plt.subplots(figsize=(7, 2.5))
    ax.imshow(grid, cmap="Greys", aspect="auto")
    ax.set_yticks(range(len(fns)), [f.label for f in fns])
    ax.set_xticks(range(hi - lo), [str(b) for b in range(lo, hi)], fontsize=7)
    ax.set_xlabel("physical address bit")
    run.figure("mapping_bits.png", fig)


@dataclass(frozen=True)
class Experiment:
    name: str
    figure: str  # what the output shows
    run: Callable[[_Run], None]


EXPERIMENTS = {e.name: e for e in [
    Experiment("E1_cpu_cpu", "spy slowdown next to a CPU writer and a CPU reader", exp_cpu_cpu),
    Experiment("E2_cpu_gpu", "spy slowdown next to accelerator stores and loads", exp_cpu_gpu),
    Experiment("E3_llc_hit_miss", "spy slowdown when it hits vs misses the LLC", exp_llc_hit_miss),
    Experiment("E4_dram_contention", "per-read channel, bank-group and bank contention counts", exp_dram_contention),
    Experiment("E5_sweep_zero_factor", "covert error rate over zero factor and stride", exp_sweep_zero_factor),
    Experiment("E6_sweep_threads", "covert error rate over local and global thread counts", exp_sweep_threads),
    Experiment("E7_covert_eval", "bit and error rates of both covert variants over seeds", exp_covert_eval),
    Experiment("E8_mitigations", "covert channel under read priority, staged reads, channel partitioning", exp_mitigations),
    Experiment("E9_recover_mapping", "recovered channel and bank XOR functions", exp_recover_mapping),
]}


def resolve_config(spec: ExperimentSpec) -> SocConfig:
    overrides = list(spec.overrides)
    if spec.full_scale:
        overrides.append("soc.scale=1")
    return load_config(spec.config_path, overrides)


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Run one named experiment and write its outputs.

    Raises ``KeyError`` for an unknown name and ``ConfigError`` for a bad
    config (nothing is written then).  Any other failure leaves an
    ``aborted`` manifest behind and is re-raised as ``ExperimentError``.
    """
    if spec.name not in EXPERIMENTS:
        raise KeyError(spec.name)
    exp = EXPERIMENTS[spec.name]
    cfg = resolve_config(spec)
    seed = cfg.soc.seed if spec.seed is None else int(spec.seed)
    out_dir = Path(spec.out) / spec.name
    out_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(spec, cfg, seed, out_dir)
    status, reason = "complete", None
    try:
        exp.run(run)
        run.close_raw()
        run.write_csv("summary.csv", run.summary, _columns(run.summary))
    except Exception as exc:  # noqa: BLE001 - any failure is recorded, then re-raised
        status, reason = "aborted", f"{type(exc).__name__}: {exc}"
        run.close_raw()
        (out_dir / "error.txt").write_text(traceback.format_exc())
        run.files.append(out_dir / "error.txt")
    manifest = _write_manifest(run, exp, status, reason)
    if status != "complete":
        raise ExperimentError(f"{spec.name} aborted: {reason} (manifest: {manifest})")
    return ExperimentResult(spec.name, out_dir, list(run.files), run.summary, manifest, run.extra)


def _columns(rows: list[dict]) -> list[str]:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def _write_manifest(run: _Run, exp: Experiment, status: str, reason: str | None) -> Path:
    from . import __version__
    files = [{"path": p.name, "sha256": file_sha256(p), "bytes": p.stat().st_size}
             for p in run.files if p.exists()]
    doc = {
        "experiment": exp.name,
        "figure": exp.figure,
        "status": status,
        "failure_reason": reason,
        "config_hash": run.cfg.fingerprint(),
        "seed": run.seed,
        "overrides": list(run.spec.overrides),
        "full_scale": run.spec.full_scale,
        "repetitions": run.spec.repetitions,
        "options": {k: v for k, v in run.spec.options.items()},
        "scale": run.cfg.scale,
        "version": __version__,
        "trace_hashes": run.trace_hashes,
        "files": files,
    }
    p = run.out / "manifest.json"
    p.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return p
