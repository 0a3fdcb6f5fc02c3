"""Physical address to DRAM coordinate decoding and XOR-function recovery.

Channel, bank-group and bank selection are parities of masked address bits.
Recovery follows the row-conflict timing approach: addresses that conflict in
a bank are grouped, and the XOR masks are the GF(2) null space of the
intra-group address differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LINE_BYTES = 64
LINE_SHIFT = 6


def line_index(addr: int) -> int:
    return addr >> LINE_SHIFT


def parity(x: int) -> int:
    return x.bit_count() & 1


def bits_to_mask(bits: Iterable[int]) -> int:
    m = 0
    for b in bits:
        if b < 0 or b > 63:
            raise ValueError(f"bit position {b} outside [0, 63]")
        m |= 1 << b
    return m


def mask_to_bits(mask: int) -> list[int]:
    return [b for b in range(64) if mask >> b & 1]


@dataclass(frozen=True)
class XorFunction:
    bit_mask: int
    label: str = ""

    def __post_init__(self):
        if self.bit_mask == 0:
            raise ValueError(f"XOR function {self.label!r} has an empty mask")

    @classmethod
    def of(cls, bits: Iterable[int], label: str = "") -> "XorFunction":
        return cls(bits_to_mask(bits), label)

    def __call__(self, addr: int) -> int:
        return (addr & self.bit_mask).bit_count() & 1

    @property
    def bits(self) -> list[int]:
        return mask_to_bits(self.bit_mask)


@dataclass(frozen=True)
class DramCoordinate:
    channel: int
    bank_group: int
    bank: int
    row: int

    @property
    def bank_key(self) -> tuple[int, int, int]:
        return (self.channel, self.bank_group, self.bank)


@dataclass(frozen=True)
class AddressMapping:
    channel_fn: XorFunction
    bank_group_fns: tuple[XorFunction, ...] = ()
    bank_fns: tuple[XorFunction, ...] = ()
    row_shift: int = 17
    rank_fn: XorFunction | None = None
    _masks: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "bank_group_fns", tuple(self.bank_group_fns))
        object.__setattr__(self, "bank_fns", tuple(self.bank_fns))
        object.__setattr__(self, "_masks", (
            self.channel_fn.bit_mask,
            tuple(f.bit_mask for f in self.bank_group_fns),
            tuple(f.bit_mask for f in self.bank_fns),
        ))

    @property
    def channels(self) -> int:
        return 2

    @property
    def bank_groups(self) -> int:
        return 1 << len(self.bank_group_fns)

    @property
    def banks_per_group(self) -> int:
        return 1 << len(self.bank_fns)

    @property
    def banks_per_channel(self) -> int:
        return self.bank_groups * self.banks_per_group

    def functions(self) -> list[XorFunction]:
        fns = [self.channel_fn, *self.bank_group_fns, *self.bank_fns]
        if self.rank_fn is not None:
            fns.append(self.rank_fn)
        return fns

    def channel_of(self, addr: int) -> int:
        return (addr & self._masks[0]).bit_count() & 1

    def bank_index(self, addr: int) -> int:
        """Flat bank id within the channel: bank_group * banks_per_group + bank."""
        _, bg_masks, ba_masks = self._masks
        bg = 0
        for i, m in enumerate(bg_masks):
            bg |= ((addr & m).bit_count() & 1) << i
        ba = 0
        for i, m in enumerate(ba_masks):
            ba |= ((addr & m).bit_count() & 1) << i
        return (bg << len(ba_masks)) | ba

    def row_of(self, addr: int) -> int:
        return addr >> self.row_shift

    def validate(self) -> list[str]:
        errors = []
        if self.row_shift <= LINE_SHIFT or self.row_shift > 48:
            errors.append(f"row_shift {self.row_shift} must lie in ({LINE_SHIFT}, 48]")
        masks = [f.bit_mask for f in self.functions()]
        if gf2_rank(masks) != len(masks):
            errors.append("address-mapping XOR functions are linearly dependent")
        for f in self.functions():
            if f.bit_mask & (LINE_BYTES - 1):
                errors.append(f"function {f.label} uses bits below the cache-line offset")
        return errors

    def to_bit_lists(self) -> dict[str, list[int]]:
        out = {"channel": self.channel_fn.bits}
        for i, f in enumerate(self.bank_group_fns):
            out[f"bg{i}"] = f.bits
        for i, f in enumerate(self.bank_fns):
            out[f"ba{i}"] = f.bits
        if self.rank_fn is not None:
            out["rank"] = self.rank_fn.bits
        return out


def default_mapping() -> AddressMapping:
    """Dual-channel, 4 bank groups x 4 banks, single rank."""
    return AddressMapping(
        channel_fn=XorFunction.of([8, 9, 12, 13, 15, 16], "channel"),
        bank_group_fns=(XorFunction.of([7, 14], "BG0"), XorFunction.of([15, 18], "BG1")),
        bank_fns=(XorFunction.of([16, 19], "BA0"), XorFunction.of([17, 20], "BA1")),
        row_shift=17,
    )


def random_mapping(rng: np.random.Generator, lo: int = 6, hi: int = 21, row_shift: int = 17,
                   max_weight: int = 6) -> AddressMapping:
    """Five linearly independent XOR masks over bits [lo, hi): a channel
    function plus two bank-group and two bank functions."""
    span = hi - lo
    while True:
        masks = []
        for _ in range(5):
            w = int(rng.integers(2, max_weight + 1))
            bits = rng.choice(span, size=w, replace=False) + lo
            masks.append(bits_to_mask(int(b) for b in bits))
        if gf2_rank(masks) == 5:
            break
    fns = [XorFunction(m, name) for m, name in zip(masks, ("channel", "BG0", "BG1", "BA0", "BA1"))]
    return AddressMapping(fns[0], (fns[1], fns[2]), (fns[3], fns[4]), row_shift=row_shift)


def map_address(addr: int, mapping: AddressMapping) -> DramCoordinate:
    bg = 0
    for i, f in enumerate(mapping.bank_group_fns):
        bg |= f(addr) << i
    ba = 0
    for i, f in enumerate(mapping.bank_fns):
        ba |= f(addr) << i
    return DramCoordinate(mapping.channel_fn(addr), bg, ba, addr >> mapping.row_shift)


def same_channel(a: int, b: int, mapping: AddressMapping) -> bool:
    return mapping.channel_of(a) == mapping.channel_of(b)


def same_bank_group(a: int, b: int, mapping: AddressMapping) -> bool:
    ca, cb = map_address(a, mapping), map_address(b, mapping)
    return ca.channel == cb.channel and ca.bank_group == cb.bank_group


def same_bank(a: int, b: int, mapping: AddressMapping) -> bool:
    return map_address(a, mapping).bank_key == map_address(b, mapping).bank_key


def format_bit_list(bits: Sequence[int]) -> str:
    return "[" + ",".join(str(b) for b in bits) + "]"


def parse_bit_list(text: str) -> list[int]:
    body = text.strip()
    if not (body.startswith("[") and body.endswith("]")):
        raise ValueError(f"expected a bracketed bit list like [8,9,12], got {text!r}")
    parts = [p.strip() for p in body[1:-1].split(",") if p.strip()]
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise ValueError(f"non-integer bit position in {text!r}") from exc


# --- vectorised decoding -------------------------------------------------------

def _parity_array(addrs: np.ndarray, mask: int) -> np.ndarray:
    x = addrs & np.uint64(mask)
    out = np.zeros(x.shape, dtype=np.uint8)
    for b in mask_to_bits(mask):
        out ^= ((x >> np.uint64(b)) & np.uint64(1)).astype(np.uint8)
    return out


def decode_array(addrs, mapping: AddressMapping) -> dict[str, np.ndarray]:
    """Channel, bank group and bank arrays for a vector of addresses."""
    a = np.asarray(addrs, dtype=np.uint64)
    ch = _parity_array(a, mapping.channel_fn.bit_mask).astype(np.int64)
    bg = np.zeros(a.shape, dtype=np.int64)
    for i, f in enumerate(mapping.bank_group_fns):
        bg |= _parity_array(a, f.bit_mask).astype(np.int64) << i
    ba = np.zeros(a.shape, dtype=np.int64)
    for i, f in enumerate(mapping.bank_fns):
        ba |= _parity_array(a, f.bit_mask).astype(np.int64) << i
    return {"channel": ch, "bank_group": bg, "bank": ba}


def global_bank_array(addrs, mapping: AddressMapping) -> np.ndarray:
    """Bank ids unique across channels: channel * banks_per_channel + bank_index."""
    d = decode_array(addrs, mapping)
    return (d["channel"] * mapping.banks_per_channel + d["bank_group"] * mapping.banks_per_group
            + d["bank"])


# --- GF(2) linear algebra ------------------------------------------------------

def gf2_reduce(vectors: Iterable[int]) -> list[int]:
    """Row-echelon basis (pivot = highest set bit) of the span of ``vectors``."""
    basis: dict[int, int] = {}
    for v in vectors:
        while v:
            p = v.bit_length() - 1
            if p in basis:
                v ^= basis[p]
            else:
                basis[p] = v
                break
    return [basis[p] for p in sorted(basis, reverse=True)]


def gf2_rank(vectors: Iterable[int]) -> int:
    return len(gf2_reduce(vectors))


def gf2_nullspace(rows: Sequence[int], bits: Sequence[int]) -> list[int]:
    """Masks m over ``bits`` with parity(row & m) == 0 for every row."""
    n = len(bits)
    # matrix over the candidate-bit coordinates, reduced to RREF
    mat = []
    for r in rows:
        v = 0
        for j, b in enumerate(bits):
            if r >> b & 1:
                v |= 1 << j
        if v:
            mat.append(v)
    pivots: list[tuple[int, int]] = []  # (column, row vector)
    for v in mat:
        for col, pv in pivots:
            if v >> col & 1:
                v ^= pv
        if v:
            col = (v & -v).bit_length() - 1
            pivots = [(c, pv ^ v if pv >> col & 1 else pv) for c, pv in pivots]
            pivots.append((col, v))
    pivot_cols = {c for c, _ in pivots}
    basis = []
    for free in range(n):
        if free in pivot_cols:
            continue
        sol = 1 << free
        for col, pv in pivots:
            if pv >> free & 1:
                sol |= 1 << col
        mask = 0
        for j in range(n):
            if sol >> j & 1:
                mask |= 1 << bits[j]
        basis.append(mask)
    return basis


def span_equal(a: Sequence[int], b: Sequence[int]) -> bool:
    # echelon forms are not unique, so compare ranks instead
    ra = gf2_rank(a)
    return ra == gf2_rank(b) == gf2_rank(list(a) + list(b))


def lowest_weight_basis(masks: Sequence[int]) -> list[int]:
    """Basis of span(masks) greedily built from the lowest-weight span members."""
    basis = gf2_reduce(masks)
    k = len(basis)
    if k > 16:
        return basis
    members = set()
    for sel in range(1, 1 << k):
        v = 0
        for i in range(k):
            if sel >> i & 1:
                v ^= basis[i]
        members.add(v)
    chosen: list[int] = []
    for v in sorted(members, key=lambda m: (m.bit_count(), m)):
        if gf2_rank(chosen + [v]) > len(chosen):
            chosen.append(v)
        if len(chosen) == k:
            break
    return chosen


# --- recovery ------------------------------------------------------------------

class InsufficientSamples(RuntimeError):
    def __init__(self, message: str, ambiguous_bits: Sequence[int] = ()):
        super().__init__(message)
        self.ambiguous_bits = list(ambiguous_bits)


def make_row_conflict_probe(mapping: AddressMapping, timing=None, rounds: int = 4,
                            noise_cycles: float = 0.0, rng: np.random.Generator | None = None
                            ) -> Callable[[int, int], float]:
    """Timing oracle: mean latency of alternating accesses to ``a`` and ``b``.

    Backed by fresh simulated banks so that a row-buffer conflict (same bank,
    different row) shows the conflict latency and everything else does not.
    """
    from .dram import Bank, DramTiming

    timing = timing or DramTiming()
    if noise_cycles and rng is None:
        rng = np.random.default_rng(0)

    def probe(a: int, b: int) -> float:
        banks: dict[tuple[int, int, int], Bank] = {}
        t = 0
        total = 0
        for i in range(2 * rounds):
            addr = a if i % 2 == 0 else b
            c = map_address(addr, mapping)
            bank = banks.setdefault(c.bank_key, Bank(timing))
            start = max(t, bank.busy_until)
            done = bank.service(False, c.row, t)
            if i >= 2:
                total += done - start
            t = done
        lat = total / (2 * rounds - 2)
        if noise_cycles:
            lat += float(rng.normal(0.0, noise_cycles))
        return lat

    return probe


def _split_threshold(samples: np.ndarray) -> float | None:
    """Largest-gap threshold between two latency clusters, or None if unimodal."""
    s = np.sort(np.asarray(samples, dtype=float))
    if s.size < 2:
        return None
    gaps = np.diff(s)
    i = int(np.argmax(gaps))
    spread = s[-1] - s[0]
    if spread <= 0 or gaps[i] < 0.25 * spread or gaps[i] <= 1e-9:
        return None
    return float((s[i] + s[i + 1]) / 2)


def recover_mapping(probe: Callable[[int, int], float], candidate_bits: Sequence[int] | range,
                    rounds: int = 256, rng: np.random.Generator | None = None,
                    channel_probe: Callable[[int, int], bool] | None = None,
                    row_bits: Sequence[int] | None = None, row_shift: int = 17) -> AddressMapping:
    """Recover channel/bank XOR masks from a row-conflict timing oracle.

    ``rounds`` random addresses are drawn with random values in
    ``candidate_bits`` (and in ``row_bits``, which must lie above the candidate
    range so that rows differ).  Each is compared with one representative of
    every known class; a high-latency pair puts it in that class.  The masks
    are the null space of the intra-class address differences.

    ``channel_probe(a, b)`` (true when ``a`` and ``b`` share a channel) lets the
    channel function be separated from the bank functions; without it the
    lowest-weight basis is returned with the heaviest vector labelled channel.
    """
    rng = rng or np.random.default_rng(0)
    cand = sorted(set(candidate_bits))
    if not cand:
        raise InsufficientSamples("empty candidate bit range")
    hi_bit = max(cand)
    if row_bits is None:
        row_bits = list(range(hi_bit + 1, hi_bit + 13))
    cand_mask = bits_to_mask(cand)

    def draw() -> int:
        v = 0
        for b in cand:
            if rng.random() < 0.5:
                v |= 1 << b
        for b in row_bits:
            if rng.random() < 0.5:
                v |= 1 << b
        return v

    pool = []
    seen_rows = set()
    row_mask = bits_to_mask(row_bits)
    while len(pool) < rounds:
        a = draw()
        r = a & row_mask
        if r in seen_rows:
            continue  # keep every row distinct so same-bank pairs always conflict
        seen_rows.add(r)
        pool.append(a)

    # calibrate the conflict threshold on pairs against the first address
    base = pool[0]
    calib = np.array([probe(base, x) for x in pool[1:]])
    thr = _split_threshold(calib)
    if thr is None:
        raise InsufficientSamples(
            "conflict and non-conflict latencies are not separable "
            f"(min {calib.min():.1f}, max {calib.max():.1f})", cand)

    reps: list[int] = []
    classes: list[list[int]] = []
    for addr in pool:
        for i, rep in enumerate(reps):
            if probe(rep, addr) > thr:
                classes[i].append(addr)
                break
        else:
            reps.append(addr)
            classes.append([addr])

    n_classes = len(classes)
    if n_classes < 2 or n_classes & (n_classes - 1):
        raise InsufficientSamples(f"found {n_classes} bank classes; expected a power of two >= 2", cand)
    diffs = [x ^ cls[0] for cls in classes for x in cls[1:]]
    null = gf2_nullspace([d & cand_mask for d in diffs], cand)
    k = n_classes.bit_length() - 1
    if len(null) != k:
        used = 0
        for m in null:
            used |= m
        raise InsufficientSamples(
            f"null space has dimension {len(null)} but {n_classes} classes need {k}; "
            "draw more rounds", mask_to_bits(used))
    # the induced partition must separate the observed classes exactly
    sig = {}
    for ci, cls in enumerate(classes):
        keys = {tuple((x & m).bit_count() & 1 for m in null) for x in cls}
        if len(keys) != 1:
            raise InsufficientSamples("recovered masks split an observed bank class", cand)
        key = keys.pop()
        if key in sig:
            raise InsufficientSamples("recovered masks merge two observed bank classes", cand)
        sig[key] = ci

    basis = lowest_weight_basis(null)
    if channel_probe is not None:
        ch_mask = recover_channel_mask(channel_probe, basis, pool)
        rest = [m for m in basis if m != ch_mask]
        if ch_mask not in basis:
            # re-derive a complement of the channel vector inside the span
            rest = []
            for m in basis:
                if gf2_rank([ch_mask, *rest, m]) > 1 + len(rest):
                    rest.append(m)
                if len(rest) == k - 1:
                    break
    else:
        ch_mask = max(basis, key=lambda m: (m.bit_count(), m))
        rest = [m for m in basis if m != ch_mask]
    rest.sort(key=lambda m: (m.bit_length(), m))
    half = len(rest) // 2
    bg = tuple(XorFunction(m, f"BG{i}") for i, m in enumerate(rest[:half]))
    ba = tuple(XorFunction(m, f"BA{i}") for i, m in enumerate(rest[half:]))
    return AddressMapping(XorFunction(ch_mask, "channel"), bg, ba, row_shift=row_shift)


def recover_channel_mask(channel_probe: Callable[[int, int], bool], span_basis: Sequence[int],
                         pool: Sequence[int]) -> int:
    """The unique span member whose parity matches the channel-sharing oracle."""
    base = pool[0]
    rows = []
    for x in pool[1:]:
        if channel_probe(base, x):
            rows.append(x ^ base)
    k = len(span_basis)
    for sel in range(1, 1 << k):
        m = 0
        for i in range(k):
            if sel >> i & 1:
                m ^= span_basis[i]
        if all((r & m).bit_count() & 1 == 0 for r in rows):
            # must also flip on some cross-channel pair
            cross = [x ^ base for x in pool[1:] if not channel_probe(base, x)]
            if all((c & m).bit_count() & 1 for c in cross):
                return m
    raise InsufficientSamples("no span member matches the channel oracle")


def partition_signature(addrs: Sequence[int], masks: Sequence[int]) -> list[tuple[int, ...]]:
    return [tuple((a & m).bit_count() & 1 for m in masks) for a in addrs]


def same_partition(addrs: Sequence[int], masks_a: Sequence[int], masks_b: Sequence[int]) -> bool:
    """True if both mask sets induce the same equivalence classes on ``addrs``."""
    sa = partition_signature(addrs, masks_a)
    sb = partition_signature(addrs, masks_b)
    fwd: dict = {}
    back: dict = {}
    for x, y in zip(sa, sb):
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True
