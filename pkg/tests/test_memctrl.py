import numpy as np
import pytest

from drainsim.addrmap import decode_array, default_mapping
from drainsim.memctrl import (ACCEL, ACCEPTED, CPU, STALLED_FULL, ContentionCounter, ControllerConfig,
                              MemoryController, MemoryRequest, Policy, contention_counts)
from drainsim.simcore import ContractViolation, Engine

MAP = default_mapping()


def addrs_in(channel, bank=None, n=64, start=0, exclude_bank=None):
    """Line-aligned addresses on ``channel`` (and optionally one bank), distinct rows."""
    out = []
    a = start
    while len(out) < n:
        if MAP.channel_of(a) == channel:
            b = MAP.bank_index(a)
            if (bank is None or b == bank) and b != exclude_bank:
                out.append(a)
        a += 64
    return out


def make(policy=Policy.DRAIN_WHEN_FULL, **kw):
    eng = Engine()
    mc = MemoryController(eng, MAP, ControllerConfig(policy=policy, **kw))
    mc.dispatch_log = []
    return eng, mc


def req(mc, addr, write, origin=ACCEL, cb=None):
    return MemoryRequest(mc.new_id(), write, addr, origin, mc.engine.now, cb)


def fill_until_drain(mc, addrs):
    ch = mc.channels[0]
    n = 0
    for a in addrs:
        assert mc.enqueue(req(mc, a, True)) == ACCEPTED
        n += 1
        if ch.draining:
            break
    return n


def test_drain_starts_when_write_queue_fills():
    eng, mc = make()
    n = fill_until_drain(mc, addrs_in(0, n=200))
    ch = mc.channels[0]
    assert ch.draining and len(ch.write_q) == mc.W
    assert n <= mc.W + 1  # the very first write may go straight out on an idle bus
    assert ch.stats.drain_episodes == 1


def test_reads_wait_for_the_whole_drain():
    eng, mc = make()
    fill_until_drain(mc, addrs_in(0, n=200))
    done = []
    for a in addrs_in(0, n=4, start=1 << 30):
        mc.enqueue(req(mc, a, False, CPU, done.append))
    eng.run()
    assert len(done) == 4
    log = mc.dispatch_log
    last_write = max(t for t, _, _, w in log if w)
    first_read = min(t for t, _, _, w in log if not w)
    assert first_read >= last_write
    st = mc.stats(0)
    assert st.reads_during_drain == 0 and not mc.channels[0].draining
    (start, end), = st.drain_windows
    assert all(not (start < t < end) for t, _, _, w in log if not w)


def test_writes_arriving_during_drain_are_parked_then_refused():
    eng, mc = make(pending_write_entries=4)
    fill_until_drain(mc, addrs_in(0, n=200))
    extra = addrs_in(0, n=5, start=1 << 31)
    res = [mc.enqueue(req(mc, a, True)) for a in extra]
    assert res == [ACCEPTED] * 4 + [STALLED_FULL]
    assert len(mc.channels[0].pending_writes) == 4
    eng.run()
    assert mc.quiescent()


def test_read_queue_back_pressure_and_retry():
    eng, mc = make(read_buffer_entries=4)
    addrs = addrs_in(0, bank=0, n=10)
    res = [mc.enqueue(req(mc, a, False, CPU)) for a in addrs]
    assert STALLED_FULL in res
    assert res.count(ACCEPTED) <= 5
    got = []
    r = req(mc, addrs_in(0, bank=0, n=1, start=1 << 32)[0], False, CPU, got.append)
    accepted = []
    assert mc.enqueue_or_wait(r, lambda: accepted.append(eng.now)) is False
    eng.run()
    assert accepted and got == [r]


def test_no_read_during_drain_is_asserted():
    eng, mc = make()
    fill_until_drain(mc, addrs_in(0, n=200))
    ch = mc.channels[0]
    r = req(mc, addrs_in(0, n=1, start=1 << 30)[0], False, CPU)
    mc.enqueue(r)
    mc.pick = lambda ch: ch.read_q[0] if ch.read_q else None  # a buggy scheduler
    ch.bus_free = 0
    for b in ch.banks:
        b.busy_until = 0
    with pytest.raises(AssertionError, match="draining"):
        mc.tick(ch, eng.now)


def test_read_priority_lets_reads_overtake_writes():
    eng, mc = make(Policy.READ_PRIORITY)
    for a in addrs_in(0, n=100):
        mc.enqueue(req(mc, a, True))
    assert not mc.channels[0].draining
    done = []
    for a in addrs_in(0, n=4, start=1 << 30):
        mc.enqueue(req(mc, a, False, CPU, done.append))
    eng.run()
    log = mc.dispatch_log
    last_write = max(t for t, _, _, w in log if w)
    assert max(t for t, _, _, w in log if not w) < last_write
    assert mc.stats(0).drain_episodes == 0


def test_staged_reads_only_pass_to_write_free_banks():
    eng, mc = make(Policy.STAGED_READS)
    fill_until_drain(mc, addrs_in(0, bank=3, n=200))
    ch = mc.channels[0]
    assert ch.draining
    free = addrs_in(0, n=1, start=1 << 30, exclude_bank=3)[0]
    busy = addrs_in(0, bank=3, n=1, start=1 << 30)[0]
    rb = req(mc, busy, False, CPU)
    mc.enqueue(rb)
    eng.run_until(eng.now + 1)
    assert ch.read_q[0] is rb  # bank 3 still has queued writes
    eng2, mc2 = make(Policy.STAGED_READS)
    fill_until_drain(mc2, addrs_in(0, bank=3, n=200))
    mc2.enqueue(req(mc2, free, False, CPU))
    eng2.run()
    assert mc2.stats(0).reads_during_drain == 1
    eng.run()
    assert mc.stats(0).reads_during_drain == 0


def test_channel_partition_rejects_wrong_owner():
    eng, mc = make(Policy.CHANNEL_PARTITION, channel_partition_owner=(CPU, ACCEL))
    mc.enqueue(req(mc, addrs_in(0, n=1)[0], False, CPU))
    mc.enqueue(req(mc, addrs_in(1, n=1)[0], True, ACCEL))
    with pytest.raises(ContractViolation):
        mc.enqueue(req(mc, addrs_in(1, n=1)[0], False, CPU))
    with pytest.raises(ContractViolation):
        mc.enqueue(req(mc, addrs_in(0, n=1)[0], True, "accelerator:wave3"))


def test_config_validation_names_fields():
    assert ControllerConfig().validate() == []
    errs = ControllerConfig(write_buffer_entries=0, channel_partition_owner=("cpu", "gpu")).validate()
    assert any("write_buffer_entries" in e for e in errs)
    assert any("channel_partition_owner" in e for e in errs)


def test_contention_counts_match_pairwise_reference(rng):
    reads = rng.integers(0, 1 << 34, 300).astype(np.uint64) & ~np.uint64(63)
    writes = rng.integers(0, 1 << 34, 700).astype(np.uint64) & ~np.uint64(63)
    got = contention_counts(reads, writes, MAP)
    r, w = decode_array(reads, MAP), decode_array(writes, MAP)
    same_ch = r["channel"][:, None] == w["channel"][None, :]
    same_bg = same_ch & (r["bank_group"][:, None] == w["bank_group"][None, :])
    same_b = same_bg & (r["bank"][:, None] == w["bank"][None, :])
    assert got["channel"].tolist() == same_ch.sum(1).tolist()
    assert got["bank_group"].tolist() == same_bg.sum(1).tolist()
    assert got["bank"].tolist() == same_b.sum(1).tolist()


def test_counter_records_only_accepted_requests_of_the_right_class():
    eng, mc = make(pending_write_entries=0)
    mc.contention = ContentionCounter(MAP)
    fill_until_drain(mc, addrs_in(0, n=200))
    n_ok = len(mc.contention.writes)
    assert mc.enqueue(req(mc, addrs_in(0, n=1, start=1 << 31)[0], True)) == STALLED_FULL
    assert len(mc.contention.writes) == n_ok
    mc.enqueue(req(mc, addrs_in(1, n=1)[0], False, CPU))
    mc.enqueue(req(mc, addrs_in(1, n=1)[0], False, ACCEL))
    assert len(mc.contention.reads) == 1
