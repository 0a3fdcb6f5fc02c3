"""Run configuration: dataclasses, INI-style loader, overrides and validation.

Files are line-oriented ``key = value`` pairs under ``[section]`` headers.
Every key is optional; omitted keys take the defaults below, which describe
the i7-10700K / UHD 630 / dual-channel DDR4-2600 machine.  Sizes accept
``KiB``/``MiB``/``GiB`` suffixes and bit lists use ``[8,9,12]`` syntax.

Capacities, kernel and spy buffers and the fixed software overheads are
divided by ``soc.scale`` when a system is built (desk scale is 8); the file
itself always holds full-size values.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .addrmap import AddressMapping, XorFunction, format_bit_list, parse_bit_list
from .cache import LlcConfig
from .dram import DramTiming
from .memctrl import ACCEL, CPU, ControllerConfig, Policy

DESK_SCALE = 8


class ConfigError(ValueError):
    """Raised with every validation problem found, not just the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class SocSection:
    seed: int = 1
    scale: int = DESK_SCALE


@dataclass
class ClockSection:
    cpu_hz: int = 3_800_000_000
    accel_hz: int = 1_200_000_000
    mc_hz: int = 1_300_000_000


@dataclass
class CacheSection:
    llc_size: int = 16 * 2**20
    llc_ways: int = 16
    accel_llc_ways: int = 8
    l2_size: int = 256 * 2**10
    l2_ways: int = 4
    wb_entries: int = 32
    igpu_l3_size: int = 512 * 2**10
    igpu_l3_ways: int = 16


@dataclass
class LatencySection:
    # CPU cycles
    cpu_l2_hit: int = 14
    cpu_llc_hit: int = 42
    cpu_miss_path: int = 125
    cpu_return_path: int = 100
    cpu_loop_gap: int = 100
    cpu_store: int = 42
    # accelerator cycles
    accel_l3_hit: int = 40
    accel_llc: int = 60
    accel_return_path: int = 30
    accel_store_issue: int = 300
    accel_same_line: int = 60
    accel_load_issue: int = 100


@dataclass
class MemctrlSection:
    policy: str = Policy.DRAIN_WHEN_FULL.value
    write_buffer_entries: int = 64
    read_buffer_entries: int = 32
    pending_write_entries: int = 64
    channel_partition_owner: tuple = (CPU, ACCEL)


@dataclass
class DramSection:
    row_hit_cycles: int = 15
    row_miss_cycles: int = 30
    row_conflict_cycles: int = 45
    turnaround_rw_cycles: int = 8
    turnaround_wr_cycles: int = 8
    burst_cycles: int = 4
    ccd_cycles: int = 7


@dataclass
class MappingSection:
    channel: list = field(default_factory=lambda: [8, 9, 12, 13, 15, 16])
    bg0: list = field(default_factory=lambda: [7, 14])
    bg1: list = field(default_factory=lambda: [15, 18])
    ba0: list = field(default_factory=lambda: [16, 19])
    ba1: list = field(default_factory=lambda: [17, 20])
    row_shift: int = 17
    rank: list = field(default_factory=list)


@dataclass
class AcceleratorSection:
    subslices: int = 3
    eus_per_subslice: int = 8
    threads_per_eu: int = 7
    wavefront_size: int = 16
    launch_overhead_us: float = 40.0
    wg_dispatch_us: float = 8.0


@dataclass
class SpySection:
    buffer_bytes: int = 32 * 2**20
    stride_lines: int = 64
    use_flush: bool = False
    jitter_cycles: float = 0.0


@dataclass
class CovertSection:
    secret_bits: int = 1024
    kernel_buffer: int = 32 * 2**20
    local_threads: int = 128
    global_threads: int = 256
    v1_stride: int = 8
    v1_zero_factor: int = 8
    v2_stride: int = 4
    v2_zero_factor: int = 2
    agreed_channel: int = 0
    preamble: str = "10101011"


SECTIONS = {
    "soc": SocSection,
    "clocks": ClockSection,
    "cache": CacheSection,
    "latency": LatencySection,
    "memctrl": MemctrlSection,
    "dram": DramSection,
    "mapping": MappingSection,
    "accelerator": AcceleratorSection,
    "spy": SpySection,
    "covert": CovertSection,
}


@dataclass
class SocConfig:
    soc: SocSection = field(default_factory=SocSection)
    clocks: ClockSection = field(default_factory=ClockSection)
    cache: CacheSection = field(default_factory=CacheSection)
    latency: LatencySection = field(default_factory=LatencySection)
    memctrl: MemctrlSection = field(default_factory=MemctrlSection)
    dram: DramSection = field(default_factory=DramSection)
    mapping: MappingSection = field(default_factory=MappingSection)
    accelerator: AcceleratorSection = field(default_factory=AcceleratorSection)
    spy: SpySection = field(default_factory=SpySection)
    covert: CovertSection = field(default_factory=CovertSection)

    # --- derived objects -----------------------------------------------------
    @property
    def scale(self) -> int:
        return self.soc.scale

    def scaled(self, value):
        """Shrink a full-size capacity/overhead by the desk scale."""
        return value // self.scale if isinstance(value, int) else value / self.scale

    def address_mapping(self) -> AddressMapping:
        m = self.mapping
        return AddressMapping(
            channel_fn=XorFunction.of(m.channel, "channel"),
            bank_group_fns=tuple(XorFunction.of(b, f"BG{i}") for i, b in enumerate([m.bg0, m.bg1]) if b),
            bank_fns=tuple(XorFunction.of(b, f"BA{i}") for i, b in enumerate([m.ba0, m.ba1]) if b),
            row_shift=m.row_shift,
            rank_fn=XorFunction.of(m.rank, "rank") if m.rank else None,
        )

    def dram_timing(self) -> DramTiming:
        d = self.dram
        return DramTiming(d.row_hit_cycles, d.row_miss_cycles, d.row_conflict_cycles,
                          d.turnaround_rw_cycles, d.turnaround_wr_cycles, d.burst_cycles,
                          d.ccd_cycles, self.clocks.mc_hz)

    def controller_config(self) -> ControllerConfig:
        m = self.memctrl
        return ControllerConfig(Policy(m.policy), m.write_buffer_entries, m.read_buffer_entries,
                                m.pending_write_entries, tuple(m.channel_partition_owner))

    def llc_config(self) -> LlcConfig:
        c = self.cache
        return LlcConfig(self.scaled(c.llc_size), c.llc_ways, 64, c.accel_llc_ways)

    # --- validation ----------------------------------------------------------
    def validate(self) -> list[str]:
        errs: list[str] = []
        if self.soc.scale < 1:
            errs.append("soc: scale must be >= 1")
        for name in ("cpu_hz", "accel_hz", "mc_hz"):
            if getattr(self.clocks, name) <= 0:
                errs.append(f"clocks: {name} must be > 0")
        c = self.cache
        if c.llc_ways <= 0:
            errs.append("cache: llc_ways must be > 0")
        if c.l2_ways <= 0:
            errs.append("cache: l2_ways must be > 0")
        if c.igpu_l3_ways <= 0:
            errs.append("cache: igpu_l3_ways must be > 0")
        if c.wb_entries <= 0:
            errs.append("cache: wb_entries must be > 0")
        if not errs and self.soc.scale >= 1:
            errs += LlcConfig(self.scaled(c.llc_size), c.llc_ways, 64, c.accel_llc_ways).validate("cache: llc")
            errs += LlcConfig(self.scaled(c.l2_size), c.l2_ways, 64, c.l2_ways).validate("cache: l2")
            errs += LlcConfig(self.scaled(c.igpu_l3_size), c.igpu_l3_ways, 64,
                              c.igpu_l3_ways).validate("cache: igpu_l3")
        for f in fields(self.latency):
            if getattr(self.latency, f.name) < 0:
                errs.append(f"latency: {f.name} must be >= 0")
        try:
            Policy(self.memctrl.policy)
        except ValueError:
            errs.append(f"memctrl: unknown policy {self.memctrl.policy!r}; "
                        f"choose from {[p.value for p in Policy]}")
        else:
            errs += self.controller_config().validate()
        errs += self.dram_timing().validate()
        m = self.mapping
        for name in ("channel", "bg0", "bg1", "ba0", "ba1"):
            if not getattr(m, name):
                errs.append(f"mapping: {name} needs at least one bit")
        if not any("mapping" in e for e in errs):
            try:
                errs += [f"mapping: {e}" for e in self.address_mapping().validate()]
            except ValueError as exc:
                errs.append(f"mapping: {exc}")
        a = self.accelerator
        for name in ("subslices", "eus_per_subslice", "threads_per_eu"):
            if getattr(a, name) <= 0:
                errs.append(f"accelerator: {name} must be > 0")
        if a.wavefront_size not in (8, 16, 32):
            errs.append("accelerator: wavefront_size must be 8, 16 or 32")
        if a.launch_overhead_us < 0 or a.wg_dispatch_us < 0:
            errs.append("accelerator: overheads must be >= 0")
        s = self.spy
        if s.stride_lines < 1:
            errs.append("spy: stride_lines must be >= 1")
        if s.buffer_bytes < 64:
            errs.append("spy: buffer_bytes must hold at least one line")
        if not s.use_flush and s.buffer_bytes < c.llc_size:
            errs.append("spy: buffer_bytes must be >= cache.llc_size when use_flush is false")
        k = self.covert
        if not 128 <= k.secret_bits <= 4096:
            errs.append("covert: secret_bits must lie in [128, 4096]")
        for name in ("v1_stride", "v2_stride", "v1_zero_factor", "v2_zero_factor"):
            if getattr(k, name) < 1:
                errs.append(f"covert: {name} must be >= 1")
        if not 0 < k.local_threads <= 256:
            errs.append("covert: local_threads must lie in [1, 256]")
        if k.global_threads < 1:
            errs.append("covert: global_threads must be >= 1")
        if k.agreed_channel not in (0, 1):
            errs.append("covert: agreed_channel must be 0 or 1")
        if not k.preamble or set(k.preamble) - {"0", "1"}:
            errs.append("covert: preamble must be a 0/1 string")
        return errs

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(to_dict(self), sort_keys=True).encode()).hexdigest()[:16]


# --- parsing -----------------------------------------------------------------

_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(b|kib|kb|k|mib|mb|m|gib|gb|g)?\s*$", re.I)
_UNITS = {None: 1, "b": 1, "k": 2**10, "kb": 2**10, "kib": 2**10, "m": 2**20, "mb": 2**20,
          "mib": 2**20, "g": 2**30, "gb": 2**30, "gib": 2**30}
_SIZE_KEYS = {"llc_size", "l2_size", "igpu_l3_size", "buffer_bytes", "kernel_buffer"}


def parse_size(text: str) -> int:
    m = _SIZE_RE.match(text)
    if not m:
        raise ValueError(f"not a size: {text!r}")
    unit = m.group(2).lower() if m.group(2) else None
    return int(float(m.group(1)) * _UNITS[unit])


def format_size(n: int) -> str:
    for unit, div in (("GiB", 2**30), ("MiB", 2**20), ("KiB", 2**10)):
        if n % div == 0 and n >= div:
            return f"{n // div}{unit}"
    return str(n)


def _coerce(section: str, key: str, default: Any, raw: str) -> Any:
    raw = raw.strip()
    if key in _SIZE_KEYS:
        return parse_size(raw)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw.replace("_", ""), 0)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        return parse_bit_list(raw) if raw not in ("", "[]", "none") else []
    if isinstance(default, tuple):
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    return raw


def _format(key: str, value: Any) -> str:
    if key in _SIZE_KEYS:
        return format_size(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return format_bit_list(value)
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def apply_setting(cfg: SocConfig, dotted: str, raw: str, errors: list[str] | None = None) -> None:
    """Set ``section.key`` from its textual form (used by files and --override)."""
    errors = [] if errors is None else errors
    if "." not in dotted:
        errors.append(f"override {dotted!r}: expected section.key")
        return
    section, key = dotted.split(".", 1)
    section, key = section.strip().lower(), key.strip().lower()
    sec = getattr(cfg, section, None) if section in SECTIONS else None
    if sec is None:
        errors.append(f"unknown section [{section}]")
        return
    if key not in {f.name for f in fields(sec)}:
        errors.append(f"[{section}] unknown key {key!r}")
        return
    default = getattr(type(sec)(), key)
    try:
        setattr(sec, key, _coerce(section, key, default, raw))
    except ValueError as exc:
        errors.append(f"[{section}] {key}: {exc}")


def parse_config_text(text: str, source: str = "<string>") -> SocConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=source)
    except configparser.ParsingError as exc:
        raise ConfigError([f"{source}: line {ln}: cannot parse {line.strip()!r}"
                           for ln, line in exc.errors]) from exc
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}"]) from exc
    cfg = SocConfig()
    errors: list[str] = []
    for section in parser.sections():
        for key, raw in parser.items(section):
            apply_setting(cfg, f"{section}.{key}", raw, errors)
    errors += cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> SocConfig:
    """Load and validate a config file (defaults if ``path`` is None) plus overrides."""
    if path is None:
        text, source = "", "<defaults>"
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"{p}: no such file"])
        text, source = p.read_text(), str(p)
    cfg = parse_config_text(text, source)
    if overrides:
        errors: list[str] = []
        for ov in overrides:
            if "=" not in ov:
                errors.append(f"override {ov!r}: expected section.key=value")
                continue
            k, v = ov.split("=", 1)
            apply_setting(cfg, k, v, errors)
        errors += cfg.validate()
        if errors:
            raise ConfigError(errors)
    return cfg


def to_dict(cfg: SocConfig) -> dict:
    return {name: {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in dataclasses.asdict(getattr(cfg, name)).items()}
            for name in SECTIONS}


def dump_config(cfg: SocConfig) -> str:
    lines = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(sec):
            lines.append(f"{f.name} = {_format(f.name, getattr(sec, f.name))}")
        lines.append("")
    return "\n".join(lines)


def mapping_to_text(mapping: AddressMapping) -> str:
    """Mapping in config-file syntax, e.g. for recovered masks."""
    lines = ["[mapping]"]
    for k, bits in mapping.to_bit_lists().items():
        lines.append(f"{k} = {format_bit_list(bits)}")
    lines.append(f"row_shift = {mapping.row_shift}")
    return "\n".join(lines) + "\n"
