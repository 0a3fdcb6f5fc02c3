"""Covert channel over write-queue drains.

The trojan sends one accelerator kernel per bit, back to back.  A ``1`` is a
pass of stores to distinct lines, enough to fill the memory controller's
write queue again and again; a ``0`` issues as many stores (times the zero
factor) to a single line, which the coalescer turns into almost no memory
traffic.  The spy keeps a strided stream of LLC-missing loads going and sees
its latency jump whenever a drain holds its reads back.

Decoding works on the spy's latency trace only:

1. ``calibrate`` turns an idle and a contended trace into a threshold.
2. ``find_pulses`` turns the trace into high-latency pulses, one per ``1``
   kernel (each starts with a quiet stretch while the queue fills).
3. ``handshake`` finds the preamble among the pulses, learns the ``1`` and
   ``0`` periods and the pulse onset delay, and locks onto the first payload
   bit.
4. ``decode`` walks the pulses from there to lay out one window per bit and
   calls each bit by comparing the window's mean latency with the threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .agents import (Accelerator, KernelConfig, KernelStats, LatencyTrace, SAME, Spy, SpyConfig,
                     filtered_offsets)
from .config import ConfigError, SocConfig
from .simcore import Engine
from .soc import MemorySystem

PREAMBLE = "10101011"
CHANNEL_OBLIVIOUS = "channel_oblivious"
SINGLE_CHANNEL = "single_channel"


class SyncFailure(RuntimeError):
    """The preamble was not found in the scanned part of the trace."""


class WeakSeparation(ValueError):
    def __init__(self, idle_mean: float, contended_mean: float):
        self.idle_mean = idle_mean
        self.contended_mean = contended_mean
        super().__init__(f"contended mean {contended_mean:.1f} is less than twice "
                         f"the idle mean {idle_mean:.1f} cycles")


# --- messages -------------------------------------------------------------------

@dataclass
class SecretMessage:
    bits: np.ndarray  # uint8 zeros and ones

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1 or np.any(self.bits > 1):
            raise ValueError("secret must be a 1-D sequence of 0/1")

    @classmethod
    def random(cls, length: int = 1024, seed: int = 0) -> "SecretMessage":
        if not 128 <= length <= 4096:
            raise ValueError("secret length must lie in [128, 4096]")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0x5EC,))))
        return cls(rng.integers(0, 2, length, dtype=np.uint8))

    @classmethod
    def from_string(cls, text: str) -> "SecretMessage":
        return cls(np.array([int(c) for c in text], dtype=np.uint8))

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join(map(str, self.bits.tolist()))


@dataclass
class DecodedMessage:
    bits: np.ndarray
    confidence: np.ndarray
    low_confidence: np.ndarray     # windows with fewer than 3 samples
    windows: list                  # (start_ps, end_ps) per bit
    window_means: np.ndarray

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join(map(str, self.bits.tolist()))


# --- encoding -------------------------------------------------------------------

@dataclass
class EncodingParams:
    stride_lines: int = 8
    zero_factor: int = 8
    local_threads: int = 128
    global_threads: int = 256
    buffer_bytes: int = 32 * 2**20   # full-size; divided by the desk scale when encoding
    variant: str = CHANNEL_OBLIVIOUS
    channel: int | None = None
    index_read_first: bool = False
    wavefront_size: int = 16
    bank_filter: tuple | None = None  # global bank ids the kernel may touch

    @classmethod
    def variant1(cls, cfg: SocConfig | None = None) -> "EncodingParams":
        k = (cfg or SocConfig()).covert
        wf = (cfg or SocConfig()).accelerator.wavefront_size
        return cls(k.v1_stride, k.v1_zero_factor, k.local_threads, k.global_threads,
                   k.kernel_buffer, CHANNEL_OBLIVIOUS, None, False, wf)

    @classmethod
    def variant2(cls, cfg: SocConfig | None = None) -> "EncodingParams":
        k = (cfg or SocConfig()).covert
        wf = (cfg or SocConfig()).accelerator.wavefront_size
        return cls(k.v2_stride, k.v2_zero_factor, k.local_threads, k.global_threads,
                   k.kernel_buffer, SINGLE_CHANNEL, k.agreed_channel, True, wf)

    @classmethod
    def for_variant(cls, variant: int | str, cfg: SocConfig | None = None) -> "EncodingParams":
        if variant in (1, "1", "v1", CHANNEL_OBLIVIOUS):
            return cls.variant1(cfg)
        if variant in (2, "2", "v2", SINGLE_CHANNEL):
            return cls.variant2(cfg)
        raise ValueError(f"unknown variant {variant!r}")

    def validate(self) -> list[str]:
        errs = []
        if self.stride_lines < 1:
            errs.append("encoding: stride_lines must be >= 1")
        if self.zero_factor < 1:
            errs.append("encoding: zero_factor must be >= 1")
        if not 1 <= self.local_threads <= 256:
            errs.append("encoding: local_threads must lie in [1, 256]")
        if self.global_threads < 1:
            errs.append("encoding: global_threads must be >= 1")
        if self.variant not in (CHANNEL_OBLIVIOUS, SINGLE_CHANNEL):
            errs.append(f"encoding: unknown variant {self.variant!r}")
        if self.variant == SINGLE_CHANNEL and self.channel not in (0, 1):
            errs.append("encoding: single_channel needs channel 0 or 1")
        return errs


def encode_bit(bit: int, params: EncodingParams, cfg: SocConfig | None = None,
               mapping=None) -> KernelConfig:
    """Kernel for one bit period.

    ``1``: one pass over the buffer at the configured stride (restricted to
    the agreed channel, or to ``params.channel`` / ``params.bank_filter``
    whenever those are set).  ``0``: the same
    number of stores times the zero factor, all to one line.
    """
    errs = params.validate()
    if errs:
        raise ConfigError(errs)
    cfg = cfg or SocConfig()
    mapping = mapping or cfg.address_mapping()
    k = KernelConfig(
        buffer_bytes=cfg.scaled(params.buffer_bytes),
        stride_lines=params.stride_lines,
        global_threads=params.global_threads,
        local_threads=params.local_threads,
        wavefront_size=params.wavefront_size,
        channel_filter=params.channel,
        bank_filter=params.bank_filter,
        index_read_first=params.index_read_first,
    )
    if bit:
        return k
    ones = len(filtered_offsets(k, mapping, -1))
    return replace(k, target_lines=SAME, requests=params.zero_factor * ones)


# --- decoder --------------------------------------------------------------------

@dataclass
class DecoderState:
    threshold_cycles: float
    baseline_mean: float
    contended_mean: float
    one_ps: float = 0.0        # period of a 1
    zero_ps: float = 0.0       # period of a 0
    onset_ps: float = 0.0      # bit start to pulse rise
    sync_ps: int | None = None
    window: list = field(default_factory=list)

    @property
    def calibration(self) -> tuple[float, float]:
        return self.baseline_mean, self.contended_mean

    def copy(self) -> "DecoderState":
        return replace(self, window=list(self.window))


def calibrate(idle_trace: LatencyTrace, contended_trace: LatencyTrace,
              min_ratio: float = 2.0) -> DecoderState:
    """Threshold halfway between the idle and contended mean latency."""
    if len(idle_trace) == 0 or len(contended_trace) == 0:
        raise ValueError("calibration needs non-empty idle and contended traces")
    idle = idle_trace.mean()
    busy = contended_trace.mean()
    if busy < min_ratio * idle:
        raise WeakSeparation(idle, busy)
    return DecoderState((idle + busy) / 2.0, idle, busy)


@dataclass(frozen=True)
class Pulse:
    rise_ps: int
    fall_ps: int
    samples: int


def find_pulses(trace: LatencyTrace, theta: float, start_ps: int = 0, end_ps: int | None = None,
                min_samples: int = 3, merge_gap: int = 4) -> list[Pulse]:
    """Runs of above-threshold samples.

    Runs separated by at most ``merge_gap`` low samples are merged, and runs
    shorter than ``min_samples`` are dropped.  A pulse ends when its last high
    sample completes.
    """
    t, lat = trace.arrays()
    a = int(np.searchsorted(t, start_ps))
    b = len(t) if end_ps is None else int(np.searchsorted(t, end_ps))
    t, lat = t[a:b], lat[a:b]
    if len(t) == 0:
        return []
    high = lat > theta
    idx = np.flatnonzero(high)
    if len(idx) == 0:
        return []
    # split where the gap between consecutive high samples is too long
    breaks = np.flatnonzero(np.diff(idx) > merge_gap + 1)
    starts = np.concatenate(([0], breaks + 1))
    ends = np.concatenate((breaks, [len(idx) - 1]))
    # the spy cannot convert cycles to time, so a pulse falls at the issue of
    # the first low sample after it
    out = []
    for s, e in zip(starts, ends):
        i0, i1 = idx[s], idx[e]
        n_high = int(high[i0:i1 + 1].sum())
        if n_high < min_samples:
            continue
        fall = int(t[i1 + 1]) if i1 + 1 < len(t) else int(t[i1])
        out.append(Pulse(int(t[i0]), fall, n_high))
    return out


def _walk(pulses: list[Pulse], cursor: float, n_bits: int, st: DecoderState, adapt: bool = True,
          end_ps: float | None = None):
    """Lay out ``n_bits`` bit windows starting at ``cursor``.

    Each pulse marks a run of ones that began ``onset_ps`` before its rise;
    the stretch before it is filled with zeros of the current zero period.
    With ``adapt`` the periods follow what the decided bits imply.
    """
    one, zero, onset = st.one_ps, st.zero_ps, st.onset_ps
    windows: list[tuple[int, int]] = []
    guess: list[int] = []
    prev_one = False
    j = 0
    while j < len(pulses) and pulses[j].rise_ps <= cursor:
        j += 1
    while len(guess) < n_bits:
        if j < len(pulses):
            p = pulses[j]
            j += 1
            start = p.rise_ps - onset
            k = int(round((start - cursor) / zero)) if zero > 0 else 0
            if k > 0:
                span = (start - cursor) / k
                for i in range(k):
                    windows.append((int(cursor + i * span), int(cursor + (i + 1) * span)))
                    guess.append(0)
                if adapt:
                    zero = 0.75 * zero + 0.25 * span
            else:
                if adapt and prev_one:
                    onset = 0.75 * onset + 0.25 * (p.rise_ps - cursor)
                start = cursor
            m = max(1, int(round((p.fall_ps - start) / one))) if one > 0 else 1
            span = (p.fall_ps - start) / m
            for i in range(m):
                windows.append((int(start + i * span), int(start + (i + 1) * span)))
                guess.append(1)
            if adapt and m == 1:
                one = 0.75 * one + 0.25 * span
            cursor = p.fall_ps
            prev_one = True
        else:
            step = zero if zero > 0 else one
            if end_ps is not None and cursor >= end_ps and step <= 0:
                break
            windows.append((int(cursor), int(cursor + step)))
            guess.append(0)
            cursor += step
            prev_one = False
    st.one_ps, st.zero_ps, st.onset_ps = one, zero, onset
    return windows[:n_bits], guess[:n_bits]


def handshake(trace: LatencyTrace, state: DecoderState, scan_from: int = 0,
              horizon_ps: int | None = None, preamble: str = PREAMBLE) -> int:
    """Find the preamble and lock onto the first payload bit.

    Learns the 1 and 0 periods and the onset delay from the preamble's pulse
    spacing, stores them in ``state`` and returns the sync time (start of the
    first payload bit).  The preamble must start with ``1`` and end with
    ``11``.
    """
    if not (preamble.startswith("1") and preamble.endswith("11") and "0" in preamble):
        raise ValueError("preamble must start with 1, end with 11 and contain a 0")
    end = None if horizon_ps is None else scan_from + horizon_ps
    pulses = find_pulses(trace, state.threshold_cycles, scan_from, end)
    ones = [i for i, c in enumerate(preamble) if c == "1"]
    need = len(ones)
    for i in range(len(pulses) - need + 1):
        cand = pulses[i:i + need]
        one = cand[-1].rise_ps - cand[-2].rise_ps
        if one <= 0:
            continue
        # spacing between successive ones = one + zeros_between * zero
        zs = []
        for a, b, pa, pb in zip(ones, ones[1:], cand, cand[1:]):
            gap = b - a - 1
            if gap > 0:
                zs.append((pb.rise_ps - pa.rise_ps - one) / gap)
        zero = float(np.mean(zs))
        if zero <= 0.25 * one:
            continue
        onset = cand[-1].rise_ps - cand[-2].fall_ps
        trial = replace(state, one_ps=float(one), zero_ps=zero, onset_ps=float(max(onset, 0)))
        first = cand[0].rise_ps - trial.onset_ps
        windows, guess = _walk(cand, first - 1, len(preamble), trial, adapt=False)
        if "".join(map(str, guess)) != preamble:
            continue
        state.one_ps, state.zero_ps, state.onset_ps = trial.one_ps, trial.zero_ps, trial.onset_ps
        state.sync_ps = cand[-1].fall_ps
        return state.sync_ps
    raise SyncFailure(f"preamble {preamble} not found among {len(pulses)} pulses "
                      f"after {scan_from} ps")


def decide(trace: LatencyTrace, windows: list, state: DecoderState) -> DecodedMessage:
    """Bit = 1 iff the window's mean latency exceeds the threshold."""
    t, lat = trace.arrays()
    theta = state.threshold_cycles
    span = max(state.contended_mean - state.baseline_mean, 1e-9)
    n = len(windows)
    bits = np.zeros(n, dtype=np.uint8)
    conf = np.zeros(n)
    low = np.zeros(n, dtype=bool)
    means = np.full(n, np.nan)
    if n:
        bounds = np.searchsorted(t, np.asarray(windows, dtype=np.int64).ravel()).reshape(n, 2)
        csum = np.concatenate(([0.0], np.cumsum(lat)))
        for i, (a, b) in enumerate(bounds):
            cnt = b - a
            low[i] = cnt < 3
            if cnt == 0:
                continue
            m = (csum[b] - csum[a]) / cnt
            means[i] = m
            bits[i] = m > theta
            conf[i] = abs(m - theta) / span
    return DecodedMessage(bits, conf, low, list(windows), means)


def decode(trace: LatencyTrace, state: DecoderState, n_bits: int, end_ps: int | None = None) -> DecodedMessage:
    """Decode ``n_bits`` payload bits following a successful handshake."""
    if state.sync_ps is None:
        raise SyncFailure("decode needs a locked handshake (state.sync_ps is unset)")
    pulses = find_pulses(trace, state.threshold_cycles, state.sync_ps, end_ps)
    windows, _ = _walk(pulses, state.sync_ps, n_bits, state)
    state.window = windows
    return decide(trace, windows, state)


def decode_blind(trace: LatencyTrace, state: DecoderState, start_ps: int, n_bits: int) -> DecodedMessage:
    """Fallback after a failed handshake: same walk from an assumed start,
    using the periods the state already holds."""
    st = state.copy()
    st.sync_ps = start_ps
    pulses = find_pulses(trace, st.threshold_cycles, start_ps)
    windows, _ = _walk(pulses, start_ps, n_bits, st)
    state.window = windows
    return decide(trace, windows, state)


# --- metrics --------------------------------------------------------------------

@dataclass
class ChannelMetrics:
    bit_rate_bps: float           # bits per simulated second
    equivalent_bit_rate_bps: float  # scaled back to full-size buffers
    error_rate_fraction: float
    errors: int
    length: int
    per_bit_confidence: np.ndarray
    low_confidence_bits: int


def evaluate(sent: SecretMessage, decoded: DecodedMessage, trace: LatencyTrace,
             scale: int = 1) -> ChannelMetrics:
    """Error rate (Hamming / length) and bit rate over the payload samples."""
    if len(sent) != len(decoded):
        raise ValueError("sent and decoded lengths differ")
    errors = int(np.count_nonzero(sent.bits != decoded.bits))
    t, _ = trace.arrays()
    rate = float("nan")
    if decoded.windows:
        a = int(np.searchsorted(t, decoded.windows[0][0]))
        b = int(np.searchsorted(t, decoded.windows[-1][1])) - 1
        if b > a:
            rate = len(sent) / ((t[b] - t[a]) / 1e12)
    return ChannelMetrics(rate, rate / scale, errors / len(sent), errors, len(sent),
                          decoded.confidence, int(decoded.low_confidence.sum()))


def hamming(a, b) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


# --- orchestration --------------------------------------------------------------

@dataclass
class BitRecord:
    bit: int
    start_ps: int
    body_start_ps: int
    finish_ps: int
    coalesced: int


@dataclass
class CovertResult:
    variant: str
    seed: int
    secret: SecretMessage
    decoded: DecodedMessage
    metrics: ChannelMetrics
    state: DecoderState
    synced: bool
    sync_error_fraction: float   # |locked - true payload start| / first payload bit period
    idle_mean: float
    contended_mean: float
    timeline: list               # BitRecord per preamble and payload bit
    trace: LatencyTrace
    system: MemorySystem
    calibration_error: str | None = None

    def summary(self) -> dict:
        m = self.metrics
        return {"variant": self.variant, "seed": self.seed, "bits": m.length,
                "bit_rate_bps": m.bit_rate_bps, "equivalent_bit_rate_bps": m.equivalent_bit_rate_bps,
                "error_rate": m.error_rate_fraction, "errors": m.errors, "synced": self.synced,
                "threshold_cycles": self.state.threshold_cycles,
                "idle_mean_cycles": self.idle_mean, "contended_mean_cycles": self.contended_mean}


class Trojan:
    """Sends bits as back-to-back kernels on the accelerator."""

    def __init__(self, system: MemorySystem, params: EncodingParams, accelerator: Accelerator | None = None):
        self.sys = system
        self.params = params
        self.acc = accelerator or Accelerator(system)
        self._k = {b: encode_bit(b, params, system.cfg, system.mapping) for b in (0, 1)}
        self.timeline: list[BitRecord] = []

    def send(self, bits, on_done=None):
        bits = [int(b) for b in bits]
        state = {"i": 0}

        def next_bit(stats: KernelStats | None = None):
            if stats is not None:
                self.timeline.append(BitRecord(bits[state["i"]], stats.start_ps, stats.body_start_ps,
                                               stats.finish_ps, stats.coalesced))
                state["i"] += 1
            if state["i"] >= len(bits):
                if on_done is not None:
                    on_done()
                return
            self.acc.launch(self._k[bits[state["i"]]], next_bit)

        next_bit()

    def run(self, bits) -> list[BitRecord]:
        box = []
        start = len(self.timeline)
        self.send(bits, lambda: box.append(True))
        self.sys.engine.run(stop=lambda: bool(box))
        return self.timeline[start:]


def spy_config_for(cfg: SocConfig, params: EncodingParams, **extra) -> SpyConfig:
    s = cfg.spy
    channel = params.channel if params.variant == SINGLE_CHANNEL else None
    kw = dict(buffer_bytes=cfg.scaled(s.buffer_bytes), stride_lines=s.stride_lines,
              use_flush=s.use_flush, channel_filter=channel, jitter_cycles=s.jitter_cycles)
    kw.update(extra)
    return SpyConfig(**kw)


def run_covert(cfg: SocConfig, secret: SecretMessage, params: EncodingParams, seed: int = 1,
               state: DecoderState | None = None, spy_cfg: SpyConfig | None = None,
               idle_us: float = 20.0, preamble: str | None = None,
               spy_start_ps: int | None = None) -> CovertResult:
    """One full transmission: idle baseline, calibration, preamble, payload.

    With ``state`` given, its threshold and periods are reused and only the
    calibration kernels' traces are recorded (they still warm the caches).
    ``spy_start_ps`` delays the spy, e.g. past the preamble.
    """
    preamble = preamble or cfg.covert.preamble
    eng = Engine(seed)
    sysm = MemorySystem(eng, cfg)
    spy = Spy(sysm, spy_cfg or spy_config_for(cfg, params))
    trojan = Trojan(sysm, params)
    idle_ps = int(idle_us * 1e6)
    spy.start(at=spy_start_ps)
    eng.run_until(idle_ps)

    cal = trojan.run([1, 0])
    one_k, zero_k = cal
    idle_tr = spy.trace.window(0, idle_ps)
    busy_tr = spy.trace.window(one_k.body_start_ps, one_k.finish_ps)
    idle_mean = idle_tr.mean()
    busy_mean = busy_tr.mean()
    cal_error = None
    if state is None:
        try:
            state = calibrate(idle_tr, busy_tr)
        except (WeakSeparation, ValueError) as exc:
            cal_error = str(exc)
            # carry on with a midpoint threshold so the run still yields metrics
            state = DecoderState((idle_mean + busy_mean) / 2 if not math.isnan(busy_mean) else idle_mean * 2,
                                 idle_mean, busy_mean)
        state.one_ps = float(one_k.finish_ps - one_k.start_ps)
        state.zero_ps = float(zero_k.finish_ps - zero_k.start_ps)
        state.onset_ps = float(one_k.body_start_ps - one_k.start_ps)
    else:
        state = state.copy()
        state.sync_ps = None
    scan_from = eng.now
    sent = trojan.run([int(c) for c in preamble] + secret.bits.tolist())
    tail = int(2 * max(state.zero_ps, state.one_ps, 1e6))
    eng.run_until(eng.now + tail)
    spy.stop()

    payload = sent[len(preamble):]
    true_start = payload[0].start_ps
    try:
        sync = handshake(spy.trace, state, scan_from, preamble=preamble)
        decoded = decode(spy.trace, state, len(secret))
        synced = True
        period = payload[0].finish_ps - payload[0].start_ps
        sync_err = abs(sync - true_start) / period
    except SyncFailure:
        synced = False
        sync_err = float("nan")
        guess = scan_from + sum(state.one_ps if c == "1" else state.zero_ps for c in preamble)
        decoded = decode_blind(spy.trace, state, int(guess), len(secret))
    metrics = evaluate(secret, decoded, spy.trace, cfg.scale)
    return CovertResult(params.variant, seed, secret, decoded, metrics, state, synced, sync_err,
                        idle_mean, busy_mean, sent, spy.trace, sysm, cal_error)


def drain_causality_violations(result: CovertResult, slack_ps: int = 0) -> int:
    """High payload samples whose load did not overlap a drain on its channel."""
    sysm = result.system
    mc = sysm.mc
    theta = result.state.threshold_cycles
    payload = result.timeline[-len(result.secret):]
    lo, hi = payload[0].start_ps, payload[-1].finish_ps
    t, lat = result.trace.arrays()
    addrs = np.asarray(result.trace.addr, dtype=np.int64)
    sel = (t >= lo) & (t < hi) & (lat > theta)
    f = sysm.cpu_clock.frequency_hz
    windows = {c: np.asarray(mc.stats(c).drain_windows, dtype=np.int64).reshape(-1, 2) for c in (0, 1)}
    bad = 0
    for ti, li, a in zip(t[sel], lat[sel], addrs[sel]):
        done = ti + int(li * 10**12 // f)
        w = windows[mc.channel_for(int(a))]
        if not len(w) or not np.any((w[:, 0] <= done) & (w[:, 1] + slack_ps >= ti)):
            bad += 1
    return bad
