"""Composite store that routes writes around host LSM stalls.

Three write policies share one read/scan surface:

* ``baseline-stall``: a stalled put waits until the gate clears.
* ``baseline-slowdown``: a put accepted under a slowdown verdict is
  acknowledged late by a fixed sleep; a full stall still waits.
* ``kvaccel``: a put that would stall is redirected to the device's
  key-value interface instead, and a host-side metadata table remembers
  which keys have their newest version on the device.  A periodic
  detector later drains the redirected data back into the host tree
  (the drain is also called rollback here).

Redirected state is resolved per key by sequence number: the metadata
table maps each redirected key to the seq of its newest device-resident
version, reads consult it before choosing a side, and the drain merges
device records back with their original seqs so ordering never depends
on wall-clock timing.

Only the metadata table and the seq counter are volatile; after a crash
both are rebuilt by scanning the device and keeping every key whose
device seq beats the host tree's (``recover_metadata``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

from .config import POLICY_KVACCEL, POLICY_SLOWDOWN, ROLLBACK_EAGER, SimConfig
from .device import BulkScan, DeviceFull, HybridDevice
from .engine import EventKind, SimEngine
from .ledger import BandwidthLedger, Transfer
from .main_lsm import MainLsm, Verdict
from .records import Entry, decode_records, reassemble


class MetadataTable:
    """Host-RAM map from key to the seq of its newest redirected version."""

    __slots__ = ("_map", "inserts", "removals", "lookups")

    def __init__(self) -> None:
        self._map: dict[bytes, int] = {}
        self.inserts = 0
        self.removals = 0
        self.lookups = 0

    def set(self, key: bytes, seq: int) -> None:
        self._map[key] = seq
        self.inserts += 1

    def get(self, key: bytes) -> int | None:
        self.lookups += 1
        return self._map.get(key)

    def drop(self, key: bytes) -> None:
        if self._map.pop(key, None) is not None:
            self.removals += 1

    def drop_if_seq(self, key: bytes, seq: int) -> bool:
        """Remove the mapping only if it still points at ``seq``."""
        if self._map.get(key) == seq:
            self._map.pop(key)
            self.removals += 1
            return True
        return False

    def __len__(self) -> int:
        return len(self._map)

    def __contains__(self, key: bytes) -> bool:
        return key in self._map

    def items(self):
        return self._map.items()


@dataclass
class PutResult:
    seq: int
    route: str            # "main" or "dev"
    stalled: bool         # waited at the gate before being accepted
    slowed: bool          # acknowledged late under a slowdown verdict
    submit_us: int
    ack_us: int

    @property
    def latency_us(self) -> int:
        return self.ack_us - self.submit_us


class _RollbackSession:
    """One freeze-and-drain pass over the device's redirected data."""

    __slots__ = ("scan", "merged", "skipped", "chunks", "paused", "emergency")

    def __init__(self, scan: BulkScan, emergency: bool) -> None:
        self.scan = scan
        self.merged = 0
        self.skipped = 0
        self.chunks = 0
        self.paused = False
        self.emergency = emergency


class Store:
    """A key-value store over one host LSM tree and one dual-interface SSD."""

    def __init__(self, cfg: SimConfig, record_events: bool = False) -> None:
        cfg.validate()
        self.cfg = cfg
        self.engine = SimEngine(record_events=record_events)
        self.ledger = BandwidthLedger(self.engine, cfg.bus_capacity_bps, cfg.device_capacity_bps)
        self.device = HybridDevice(self.engine, self.ledger, cfg)
        self.main = MainLsm(self.engine, self.ledger, self.device, cfg)
        self.metadata = MetadataTable()
        self.seq = 1
        self.session: _RollbackSession | None = None
        self._detector_on = False
        self._last_write_us = 0
        self._last_busy_us = 0
        # counters surfaced in reports
        self.direct_puts = 0
        self.redirected_puts = 0
        self.blocked_puts = 0
        self.blocked_wait_us = 0
        self.slowdown_sleeps = 0
        self.reads_from_main = 0
        self.reads_from_dev = 0
        self.sessions_started = 0
        self.sessions_completed = 0
        self.records_merged = 0
        self.records_skipped = 0
        self.chunks_drained = 0
        self.rollback_bytes = 0
        self.range_queries = 0
        self.range_switches = 0

    # lifecycle

    def start(self) -> None:
        """Arm the periodic detector (only the redirecting policy needs it)."""
        if self.cfg.policy == POLICY_KVACCEL and not self._detector_on:
            self._detector_on = True
            self.engine.schedule_in(self.cfg.detector_period_us, EventKind.DETECTOR_TICK,
                                    self._detector_tick)

    @property
    def rollback_active(self) -> bool:
        return self.session is not None

    def _next_seq(self) -> int:
        s = self.seq
        self.seq += 1
        return s

    # write path

    def submit_put(self, key: bytes, value: bytes,
                   done: Callable[[PutResult], None] | None = None,
                   tombstone: bool = False) -> None:
        """Issue one put; ``done`` fires when the write is acknowledged."""
        self._issue_put(key, value, tombstone, done, self.engine.now, stalled=False)

    def submit_delete(self, key: bytes,
                      done: Callable[[PutResult], None] | None = None) -> None:
        self.submit_put(key, b"", done, tombstone=True)

    def _issue_put(self, key: bytes, value: bytes, tombstone: bool,
                   done: Callable[[PutResult], None] | None,
                   submit_us: int, stalled: bool) -> None:
        status = self.main.stall_status()
        policy = self.cfg.policy
        if status.verdict == Verdict.STALL:
            if policy == POLICY_KVACCEL and self._try_redirect(key, value, tombstone,
                                                               done, submit_us, stalled):
                return
            self._block(key, value, tombstone, done, submit_us)
            return
        if (policy == POLICY_KVACCEL and self.cfg.redirect_on_slowdown
                and status.verdict == Verdict.SLOWDOWN
                and self._try_redirect(key, value, tombstone, done, submit_us, stalled)):
            return
        entry = Entry(key, value, self._next_seq(), tombstone)
        rejected = self.main.try_put(entry)
        assert rejected is None  # the gate was checked above, same event
        self.metadata.drop(key)  # the host copy, if any existed, is now newest
        self.direct_puts += 1
        self._last_write_us = self.engine.now
        if policy == POLICY_SLOWDOWN and status.verdict == Verdict.SLOWDOWN:
            self.slowdown_sleeps += 1
            if done is not None:
                result = PutResult(entry.seq, "main", stalled, True, submit_us, 0)
                self.engine.schedule_in(self.cfg.slowdown_sleep_us, EventKind.OP_ARRIVAL,
                                        lambda: self._ack(done, result))
            return
        if done is not None:
            done(PutResult(entry.seq, "main", stalled, False, submit_us, self.engine.now))

    def _ack(self, done: Callable[[PutResult], None], result: PutResult) -> None:
        result.ack_us = self.engine.now
        done(result)

    def _try_redirect(self, key: bytes, value: bytes, tombstone: bool,
                      done: Callable[[PutResult], None] | None,
                      submit_us: int, stalled: bool) -> bool:
        seq = self.seq  # allocate only once the device accepts the record
        try:
            result = PutResult(seq, "dev", stalled, False, submit_us, 0)
            self.device.kv_put(key, value, seq, tombstone,
                               (lambda t: self._ack(done, result)) if done else None)
        except DeviceFull:
            return False
        self.seq += 1
        self.metadata.set(key, seq)
        self.redirected_puts += 1
        self._last_write_us = self.engine.now
        return True

    def _block(self, key: bytes, value: bytes, tombstone: bool,
               done: Callable[[PutResult], None] | None, submit_us: int) -> None:
        self.blocked_puts += 1
        start = self.engine.now

        def retry() -> None:
            self.blocked_wait_us += self.engine.now - start
            self._issue_put(key, value, tombstone, done, submit_us, stalled=True)

        self.main.wait_stall_clear(retry)

    # read path

    def submit_get(self, key: bytes,
                   done: Callable[[bytes | None, str], None] | None = None) -> None:
        """Look up one key; ``done(value, source)`` fires when data arrives."""
        if self.cfg.policy == POLICY_KVACCEL and self.metadata.get(key) is not None:
            entry, _, transfer = self.device.kv_get(key)
            assert entry is not None  # the metadata table said it was there
            self.reads_from_dev += 1
            value = None if entry.tombstone else entry.value
            source = "dev"
        else:
            entry, _, transfer = self.main.get_entry(key)
            self.reads_from_main += 1
            value = None if entry is None or entry.tombstone else entry.value
            source = "main"
        if done is None:
            return
        if transfer is None:
            done(value, source)
        else:
            transfer.callback = lambda t: done(value, source)

    def submit_range(self, start: bytes, count: int,
                     done: Callable[[list[tuple[bytes, bytes]], int], None] | None = None) -> None:
        """One seek plus ``count`` steps from ``start``, merged across sides.

        Yields at most count+1 pairs.  The merge itself resolves atomically
        at issue time; the ack waits for every page and cursor transfer the
        query charged.
        """
        from .merged_query import DualIterator
        it = DualIterator(self.main, self.device, self.metadata, start)
        results = it.collect(count + 1)
        it.close()
        self.range_queries += 1
        self.range_switches += it.switches
        if done is None:
            return
        pending = [len(it.transfers)]

        def one_done(t: Transfer) -> None:
            pending[0] -= 1
            if pending[0] == 0:
                done(results, it.switches)

        for t in it.transfers:
            t.callback = one_done

    # synchronous wrappers (tests and small scripts)

    def put(self, key: bytes, value: bytes) -> PutResult:
        box: list[PutResult] = []
        self.submit_put(key, value, box.append)
        self.engine.run_until(lambda: bool(box))
        return box[0]

    def delete(self, key: bytes) -> PutResult:
        box: list[PutResult] = []
        self.submit_delete(key, box.append)
        self.engine.run_until(lambda: bool(box))
        return box[0]

    def get(self, key: bytes) -> bytes | None:
        box: list[tuple[bytes | None, str]] = []
        self.submit_get(key, lambda v, s: box.append((v, s)))
        self.engine.run_until(lambda: bool(box))
        return box[0][0]

    def range(self, start: bytes, count: int) -> list[tuple[bytes, bytes]]:
        box: list[list[tuple[bytes, bytes]]] = []
        self.submit_range(start, count, lambda rs, sw: box.append(rs))
        self.engine.run_until(lambda: bool(box))
        return box[0]

    # detector and drain

    def _detector_tick(self) -> None:
        status = self.main.stall_status()
        now = self.engine.now
        if status.verdict != Verdict.NORMAL:
            self._last_busy_us = now  # lazy quiet windows demand normal verdicts
        over_water = (self.device.dev_bytes_used()
                      >= self.cfg.dev_highwater_ratio * self.device.capacity_bytes)
        if self.session is not None:
            if self.session.paused and (status.verdict != Verdict.STALL or over_water):
                self.session.paused = False
                self.session.emergency = self.session.emergency or over_water
                self.engine.schedule_in(0, EventKind.ROLLBACK_STEP, self._rollback_step)
        elif not self.device.dev_is_empty():
            if over_water:
                # safety valve: drain before the kv region fills, even mid-stall
                self._start_rollback(emergency=True)
            elif self.cfg.rollback_mode == ROLLBACK_EAGER:
                if status.verdict != Verdict.STALL:
                    self._start_rollback(emergency=False)
            else:
                quiet_us = self.cfg.lazy_quiet_ms * 1000
                if now - max(self._last_write_us, self._last_busy_us) >= quiet_us:
                    self._start_rollback(emergency=False)
        self.engine.schedule_in(self.cfg.detector_period_us, EventKind.DETECTOR_TICK,
                                self._detector_tick)

    def _start_rollback(self, emergency: bool) -> None:
        """Freeze the device's current state and drain it chunk by chunk."""
        self.device.freeze()
        scan = self.device.kv_range_scan_bulk(frozen_only=True)
        self.session = _RollbackSession(scan, emergency)
        self.sessions_started += 1
        self.engine.schedule_in(0, EventKind.ROLLBACK_STEP, self._rollback_step)

    def _rollback_step(self) -> None:
        session = self.session
        if session is None:
            return
        if not session.emergency and self.main.stall_status().verdict == Verdict.STALL:
            session.paused = True  # the detector resumes the drain once clear
            return
        nxt = session.scan.next_chunk(
            lambda chunk, n, t: self._chunk_arrived(chunk, n, t, session))
        if nxt is None:
            self._finish_rollback()

    def _chunk_arrived(self, chunk: bytes, n_records: int, transfer: Transfer,
                       session: _RollbackSession) -> None:
        if self.session is not session:
            return  # a crash wiped the session while this chunk was in flight
        session.chunks += 1
        self.chunks_drained += 1
        self.rollback_bytes += len(chunk)
        for entry in reassemble(iter(decode_records(chunk))):
            md = self.metadata.get(entry.key)
            if md is None:
                # a newer host write superseded this record, or an earlier
                # drain already merged it; nothing to put back
                session.skipped += 1
                self.records_skipped += 1
                continue
            assert entry.seq <= md  # the table always tracks the newest redirect
            self.main.try_put(entry, force=True)
            session.merged += 1
            self.records_merged += 1
            if md == entry.seq:
                self.metadata.drop_if_seq(entry.key, entry.seq)
        self.engine.schedule_in(0, EventKind.ROLLBACK_STEP, self._rollback_step)

    def _finish_rollback(self) -> None:
        self.device.drop_frozen()
        self.session = None
        self.sessions_completed += 1
        if self.device.dev_is_empty():
            # every device-resident version went home, so no key may claim
            # to live on the device any more
            assert len(self.metadata) == 0

    def drain_now(self) -> None:
        """Force a full drain and run it to completion (tests, shutdown)."""
        if self.cfg.policy != POLICY_KVACCEL:
            return
        while not self.device.dev_is_empty():
            if self.session is None:
                self._start_rollback(emergency=True)
            else:
                self.session.emergency = True
                if self.session.paused:
                    self.session.paused = False
                    self.engine.schedule_in(0, EventKind.ROLLBACK_STEP, self._rollback_step)
            self.engine.run_until(lambda: self.session is None)

    # crash and recovery

    def crash(self) -> None:
        """Drop everything host-volatile: metadata, seq counter, drain state."""
        self.metadata = MetadataTable()
        self.seq = 1
        self.session = None

    def recover_metadata(self) -> int:
        """Rebuild the metadata table from the two durable sides.

        A full device range scan (charged like any bulk scan) replays every
        device-resident record; a key is redirected iff its device seq
        beats the newest seq the host tree knows, since a tie means a drain
        already merged that version.  Host-side seq probes are free.
        Returns the number of recovered keys.
        """
        table = MetadataTable()
        max_seq = self.main.max_seq
        scan = self.device.kv_range_scan_bulk()
        while True:
            nxt = scan.next_chunk()
            if nxt is None:
                break
            chunk, _, _ = nxt
            for entry in reassemble(iter(decode_records(chunk))):
                if entry.seq > max_seq:
                    max_seq = entry.seq
                main_seq = self.main.peek_seq(entry.key)
                if main_seq is None or entry.seq > main_seq:
                    table.set(entry.key, entry.seq)
        self.metadata = table
        self.seq = max_seq + 1
        return len(table)

    # maintenance

    def wait_quiescent(self, max_events: int = 10_000_000) -> None:
        """Run until all background work (flush, compaction, drain) settles.

        With the detector armed, redirected data still on the device counts
        as unfinished work: the wait spans the tick that starts the drain,
        not just the gap before it.
        """
        self.engine.run_until(
            lambda: (self.main.quiescent and self.session is None
                     and self.ledger.active_count == 0
                     and (not self._detector_on or self.device.dev_is_empty())),
            max_events=max_events)

    def check_invariants(self) -> None:
        self.main.check_invariants()
        self.device.check_invariants()
        self.ledger.check_conservation()
        self.ledger.check_capacity()
        for key, seq in self.metadata.items():
            entry, _, _ = self.device.kv_get(key)
            if entry is None or entry.seq != seq:
                raise AssertionError(f"metadata points at a missing device version: {key!r}")
