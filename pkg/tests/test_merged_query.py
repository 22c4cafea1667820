"""Merged host+device range reads against a plain sorted-map oracle."""

import pytest
from hypothesis import given, settings, strategies as st

from dualkv import DualIterator, IteratorInvalidated, Store
from dualkv.records import Entry

from conftest import tiny_cfg


def build(host=(), dev=(), mapped=()):
    """A store with injected state: host entries, device entries, and the
    subset of device keys the metadata table still claims."""
    store = Store(tiny_cfg())
    for key, value, seq in host:
        entry = Entry(key, value or b"", seq, value is None)
        assert store.main.try_put(entry, force=True) is None
    for key, value, seq in dev:
        store.device.kv_put(key, value or b"", seq, value is None)
    store.engine.drain()
    for key, seq in mapped:
        store.metadata.set(key, seq)
    return store


def merged(store, start=b"", n=100):
    it = DualIterator(store.main, store.device, store.metadata, start)
    out = it.collect(n)
    it.close()
    store.engine.drain()
    return out


def test_two_disjoint_sides_interleave_sorted():
    store = build(host=[(b"a", b"1", 1), (b"c", b"3", 3)],
                  dev=[(b"b", b"2", 2), (b"d", b"4", 4)],
                  mapped=[(b"b", 2), (b"d", 4)])
    assert merged(store) == [(b"a", b"1"), (b"b", b"2"), (b"c", b"3"), (b"d", b"4")]


def test_mapped_key_prefers_the_device_version():
    store = build(host=[(b"k", b"host", 1)],
                  dev=[(b"k", b"dev", 2)],
                  mapped=[(b"k", 2)])
    assert merged(store) == [(b"k", b"dev")]


def test_unmapped_device_duplicate_defers_to_host():
    # the host rewrote the key after its redirect: device copy is stale
    store = build(host=[(b"k", b"newer", 5)],
                  dev=[(b"k", b"stale", 2)])
    assert merged(store) == [(b"k", b"newer")]


def test_unmapped_device_only_key_is_invisible():
    # stale device leftover whose superseding host write has itself been
    # compacted away: no version of the key is live
    store = build(host=[(b"a", b"1", 1)],
                  dev=[(b"zombie", b"x", 2)])
    assert merged(store) == [(b"a", b"1")]


def test_device_tombstone_suppresses_host_version():
    store = build(host=[(b"k", b"old", 1), (b"live", b"v", 2)],
                  dev=[(b"k", None, 3)],
                  mapped=[(b"k", 3)])
    assert merged(store) == [(b"live", b"v")]


def test_host_tombstone_suppresses_key():
    store = build(host=[(b"k", None, 2), (b"other", b"v", 1)])
    assert merged(store) == [(b"other", b"v")]


def test_seek_starts_midway():
    store = build(host=[(b"a", b"1", 1), (b"m", b"2", 2)],
                  dev=[(b"z", b"3", 3)], mapped=[(b"z", 3)])
    assert merged(store, start=b"m") == [(b"m", b"2"), (b"z", b"3")]


def test_switch_counter_tracks_side_changes():
    store = build(host=[(b"a", b"1", 1), (b"c", b"3", 3)],
                  dev=[(b"b", b"2", 2), (b"d", b"4", 4)],
                  mapped=[(b"b", 2), (b"d", 4)])
    it = DualIterator(store.main, store.device, store.metadata, b"")
    it.collect(10)
    assert it.switches == 3  # main -> dev -> main -> dev
    it.close()
    store.engine.drain()


def test_mutation_invalidates_open_iterators():
    store = build(host=[(b"a", b"1", 1), (b"b", b"2", 2)])
    it = DualIterator(store.main, store.device, store.metadata, b"")
    assert it.next() == (b"a", b"1")
    store.main.try_put(Entry(b"zz", b"x", 99, False), force=True)
    with pytest.raises(IteratorInvalidated):
        it.next()
    it.seek(b"")  # re-seeking re-arms it
    assert it.next() == (b"a", b"1")
    it.close()
    store.engine.drain()


def test_every_step_charges_a_transfer():
    store = build(host=[(b"a", b"1", 1)], dev=[(b"b", b"2", 2)], mapped=[(b"b", 2)])
    it = DualIterator(store.main, store.device, store.metadata, b"")
    it.collect(10)
    assert len(it.transfers) > 0
    it.close()
    store.engine.drain()
    store.ledger.check_conservation()


ops_strategy = st.lists(
    st.tuples(st.sampled_from(["put", "delete"]),
              st.integers(0, 25),
              st.binary(min_size=1, max_size=80)),
    min_size=1, max_size=120)


@settings(max_examples=50, deadline=None)
@given(ops_strategy, st.integers(0, 25))
def test_range_matches_sorted_map_oracle(ops, start_i):
    store = Store(tiny_cfg())
    store.start()
    oracle = {}
    for kind, key_i, value in ops:
        key = b"key%02d" % key_i
        if kind == "put":
            store.put(key, value)
            oracle[key] = value
        else:
            store.delete(key)
            oracle.pop(key, None)
    start = b"key%02d" % start_i
    got = store.range(start, 30)
    want = [(k, oracle[k]) for k in sorted(oracle) if k >= start][:31]
    assert got == want
    store.check_invariants()
