"""Host-side LSM tree over the block interface, with write-stall semantics.

Writes land in an active memtable; full memtables rotate into an immutable
queue and flush to level-0 tables; levels compact downward with a merge
that keeps the highest sequence number per key.  Three conditions gate
writes, mirroring a production engine:

* flush backlog   - every immutable-memtable slot is occupied
* L0 stop         - too many level-0 files (flushing also pauses)
* pending bytes   - the estimated compaction debt crossed its hard limit

Any of those yields verdict "stall"; the L0 slowdown-file count or the
soft pending-bytes limit alone yields "slowdown".  Compactions run in
three phases: a read transfer, a pure-CPU merge window (no bus traffic),
and a write transfer.
"""

from __future__ import annotations

import heapq
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Iterator

from .config import SimConfig
from .engine import EventKind, SimEngine
from .ledger import BandwidthLedger, Transfer
from .records import Entry, encode_table, table_value_offsets

REASON_FLUSH_BACKLOG = "flush-backlog"
REASON_L0_STOP = "l0-stop"
REASON_PENDING_BYTES = "pending-bytes"


class Verdict(IntEnum):
    NORMAL = 0
    SLOWDOWN = 1
    STALL = 2


@dataclass(frozen=True)
class StallStatus:
    l0_count: int
    imt_count: int
    pending_compaction_bytes: int
    verdict: Verdict
    reason: str | None = None


class MemTable:
    """Sorted-on-demand in-memory write buffer; highest seq wins per key."""

    __slots__ = ("entries", "byte_size")

    def __init__(self) -> None:
        self.entries: dict[bytes, Entry] = {}
        self.byte_size = 0

    def insert(self, entry: Entry) -> None:
        old = self.entries.get(entry.key)
        if old is not None:
            if old.seq >= entry.seq:
                return
            self.byte_size -= old.size
        self.entries[entry.key] = entry
        self.byte_size += entry.size

    def get(self, key: bytes) -> Entry | None:
        return self.entries.get(key)

    def sorted_entries(self) -> list[Entry]:
        return [self.entries[k] for k in sorted(self.entries)]

    def __len__(self) -> int:
        return len(self.entries)


class SSTable:
    """Immutable sorted table whose bytes live in the device block region.

    Keys, seqs and tombstone flags are kept in memory for lookups; values
    are read back from the device pages on demand.
    """

    __slots__ = ("sid", "level", "keys", "seqs", "tombs", "value_offsets",
                 "value_lens", "lba", "npages", "byte_size")

    def __init__(self, sid: int, level: int, entries: list[Entry], lba: int,
                 npages: int, byte_size: int) -> None:
        self.sid = sid
        self.level = level
        self.keys = [e.key for e in entries]
        self.seqs = [e.seq for e in entries]
        self.tombs = [e.tombstone for e in entries]
        self.value_offsets = table_value_offsets(entries)
        self.value_lens = [len(e.value) for e in entries]
        self.lba = lba
        self.npages = npages
        self.byte_size = byte_size

    @property
    def min_key(self) -> bytes:
        return self.keys[0]

    @property
    def max_key(self) -> bytes:
        return self.keys[-1]

    def __len__(self) -> int:
        return len(self.keys)

    def covers(self, key: bytes) -> bool:
        return self.min_key <= key <= self.max_key

    def overlaps(self, lo: bytes, hi: bytes) -> bool:
        return self.min_key <= hi and lo <= self.max_key

    def find(self, key: bytes) -> int | None:
        i = bisect_left(self.keys, key)
        if i < len(self.keys) and self.keys[i] == key:
            return i
        return None

    def entry_at(self, i: int, peek: Callable[[int, int, int], bytes]) -> Entry:
        value = peek(self.lba, self.value_offsets[i], self.value_lens[i])
        return Entry(self.keys[i], value, self.seqs[i], self.tombs[i])

    def iter_from(self, peek: Callable[[int, int, int], bytes], start: bytes = b"") -> Iterator[Entry]:
        for i in range(bisect_left(self.keys, start), len(self.keys)):
            yield self.entry_at(i, peek)


@dataclass
class _CompactionJob:
    level: int
    inputs: list[SSTable]
    bytes_in: int


class MainLsm:
    """The host store: memtables, levels, flush/compaction scheduling."""

    def __init__(self, engine: SimEngine, ledger: BandwidthLedger, device, cfg: SimConfig) -> None:
        self.engine = engine
        self.ledger = ledger
        self.device = device
        self.cfg = cfg
        self.memtable = MemTable()
        self.imts: list[MemTable] = []
        self._flushing: set[int] = set()
        self.levels: list[list[SSTable]] = [[]]
        self._level_bytes: list[int] = [0]
        self._next_sid = 0
        self._flush_busy = 0
        self._comp_busy = 0
        self._locked_sids: set[int] = set()
        self._cursors: dict[int, bytes] = {}
        self._stall_waiters: list[Callable[[], None]] = []
        self.mutation_counter = 0
        self.max_seq = 0
        # counters surfaced in reports
        self.flush_count = 0
        self.compaction_count = 0
        self.cpu_busy_us = 0
        self.bytes_flushed = 0
        self.bytes_compacted_in = 0
        self.bytes_compacted_out = 0

    # write path

    def try_put(self, entry: Entry, force: bool = False) -> str | None:
        """Insert one entry; returns a blocked reason instead when stalled.

        force=True bypasses the stall gate (used when draining redirected
        data back in); it may push the immutable queue past its limit.
        """
        if not force:
            status = self.stall_status()
            if status.verdict == Verdict.STALL:
                return status.reason
        if self.memtable.byte_size + entry.size > self.cfg.memtable_bytes and len(self.memtable):
            self._rotate()
        self.memtable.insert(entry)
        self.mutation_counter += 1
        if entry.seq > self.max_seq:
            self.max_seq = entry.seq
        return None

    def _rotate(self) -> None:
        self.imts.append(self.memtable)
        self.memtable = MemTable()
        self._maybe_start_flush()

    # status

    def level_bytes(self, n: int) -> int:
        return self._level_bytes[n] if n < len(self._level_bytes) else 0

    def level_target(self, n: int) -> int:
        return self.cfg.level1_target_bytes * self.cfg.level_size_ratio ** (n - 1)

    def pending_compaction_bytes(self) -> int:
        pending = 0
        if len(self.levels[0]) >= self.cfg.l0_compaction_trigger:
            pending += self._level_bytes[0]
        for n in range(1, len(self.levels)):
            over = self._level_bytes[n] - self.level_target(n)
            if over > 0:
                pending += over
        return pending

    def stall_status(self) -> StallStatus:
        l0 = len(self.levels[0])
        imt = len(self.imts)
        pending = self.pending_compaction_bytes()
        reason = None
        if imt >= self.cfg.max_immutable_memtables:
            reason = REASON_FLUSH_BACKLOG
        elif l0 >= self.cfg.l0_stop_files:
            reason = REASON_L0_STOP
        elif pending >= self.cfg.pending_hard_bytes:
            reason = REASON_PENDING_BYTES
        if reason is not None:
            verdict = Verdict.STALL
        elif l0 >= self.cfg.l0_slowdown_files or pending >= self.cfg.pending_soft_bytes:
            verdict = Verdict.SLOWDOWN
        else:
            verdict = Verdict.NORMAL
        return StallStatus(l0, imt, pending, verdict, reason)

    def wait_stall_clear(self, fn: Callable[[], None]) -> None:
        self._stall_waiters.append(fn)

    def _notify_if_clear(self) -> None:
        if self._stall_waiters and self.stall_status().verdict != Verdict.STALL:
            waiters, self._stall_waiters = self._stall_waiters, []
            for fn in waiters:
                fn()

    # flush

    def _maybe_start_flush(self) -> None:
        while self._flush_busy < self.cfg.flush_workers and len(self.levels[0]) < self.cfg.l0_stop_files:
            imt = next((m for m in self.imts if id(m) not in self._flushing), None)
            if imt is None:
                return
            self._flushing.add(id(imt))
            self._flush_busy += 1
            entries = imt.sorted_entries()
            blob = encode_table(entries)
            npages = -(-len(blob) // self.cfg.page_size)
            lba = self.device.block_alloc(npages)
            self._next_sid += 1
            sst = SSTable(self._next_sid, 0, entries, lba, npages, len(blob))
            self.ledger.charge_transfer(
                "block", "h2d", len(blob),
                lambda _t, imt=imt, sst=sst, blob=blob: self._flush_complete(imt, sst, blob))

    def _flush_complete(self, imt: MemTable, sst: SSTable, blob: bytes) -> None:
        self.device.write_raw(sst.lba, blob)
        self.imts.remove(imt)
        self._flushing.discard(id(imt))
        self.levels[0].append(sst)
        self._level_bytes[0] += sst.byte_size
        self._flush_busy -= 1
        self.flush_count += 1
        self.bytes_flushed += sst.byte_size
        self.mutation_counter += 1
        self._maybe_start_flush()
        self.maybe_start_compaction()
        self._notify_if_clear()

    # compaction

    def maybe_start_compaction(self) -> None:
        while self._comp_busy < self.cfg.compaction_workers:
            job = self._pick_compaction()
            if job is None:
                return
            self._start_compaction(job)

    def _pick_compaction(self) -> _CompactionJob | None:
        job = self._pick_l0_job()
        if job is not None:
            return job
        l0 = self.levels[0]
        l0_waiting = (len(l0) >= self.cfg.l0_compaction_trigger
                      and not any(s.sid in self._locked_sids for s in l0))
        # An L0 job blocked only by in-flight L1 consumers must not queue
        # behind freshly started ones, so L1 is off limits while it waits.
        floor = 2 if l0_waiting else 1
        for n in range(floor, len(self.levels)):
            if self._level_bytes[n] <= self.level_target(n):
                continue
            job = self._pick_level_job(n)
            if job is not None:
                return job
        return None

    def _pick_l0_job(self) -> _CompactionJob | None:
        l0 = self.levels[0]
        if len(l0) < self.cfg.l0_compaction_trigger:
            return None
        if any(s.sid in self._locked_sids for s in l0):
            return None
        victims = list(l0)
        lo = min(s.min_key for s in victims)
        hi = max(s.max_key for s in victims)
        overlaps = self._overlapping(1, lo, hi)
        if any(s.sid in self._locked_sids for s in overlaps):
            return None
        inputs = victims + overlaps
        return _CompactionJob(0, inputs, sum(s.byte_size for s in inputs))

    def _pick_level_job(self, n: int) -> _CompactionJob | None:
        level = self.levels[n]
        cursor = self._cursors.get(n, b"")
        start = bisect_right([s.min_key for s in level], cursor)
        order = list(range(start, len(level))) + list(range(0, start))
        for i in order:
            victim = level[i]
            if victim.sid in self._locked_sids:
                continue
            overlaps = self._overlapping(n + 1, victim.min_key, victim.max_key)
            if any(s.sid in self._locked_sids for s in overlaps):
                continue
            inputs = [victim] + overlaps
            return _CompactionJob(n, inputs, sum(s.byte_size for s in inputs))
        return None

    def _overlapping(self, n: int, lo: bytes, hi: bytes) -> list[SSTable]:
        if n >= len(self.levels):
            return []
        return [s for s in self.levels[n] if s.overlaps(lo, hi)]

    def _start_compaction(self, job: _CompactionJob) -> None:
        self._comp_busy += 1
        for s in job.inputs:
            self._locked_sids.add(s.sid)
        if job.level >= 1:
            self._cursors[job.level] = job.inputs[0].max_key
        self.ledger.charge_transfer("block", "d2h", job.bytes_in,
                                    lambda _t, job=job: self._compaction_read_done(job))

    def _compaction_read_done(self, job: _CompactionJob) -> None:
        outputs = self._merge(job)
        cpu_us = max(1, int(job.bytes_in * self.cfg.cpu_us_per_byte))
        self.engine.schedule_in(cpu_us, EventKind.COMPACTION_COMPLETE,
                                lambda: self._compaction_cpu_done(job, outputs, cpu_us))

    def _compaction_cpu_done(self, job: _CompactionJob, outputs: list[list[Entry]], cpu_us: int) -> None:
        self.cpu_busy_us += cpu_us
        if not outputs:
            self._install_compaction(job, [])
            return
        blobs = [encode_table(run) for run in outputs]
        bytes_out = sum(len(b) for b in blobs)
        self.ledger.charge_transfer(
            "block", "h2d", bytes_out,
            lambda _t: self._install_compaction(job, outputs, blobs))

    def _merge(self, job: _CompactionJob) -> list[list[Entry]]:
        """Merge inputs newest-seq-wins; split into runs of bounded size."""
        peek = self.device.peek
        streams = [s.iter_from(peek) for s in job.inputs]
        merged = heapq.merge(*streams, key=lambda e: (e.key, -e.seq))
        target = job.level + 1
        # A tombstone may vanish only when no older version of its key can
        # exist anywhere: deeper levels, or the device's kv region.  A
        # superseded record parked there is invisible to reads, but after a
        # crash the recovery scan compares bare seqs across the two sides,
        # and the tombstone is the only surviving proof of the supersedure.
        drop_tombs = (self.device.dev_is_empty()
                      and all(self._level_bytes[n] == 0
                              for n in range(target + 1, len(self.levels))))
        runs: list[list[Entry]] = []
        run: list[Entry] = []
        run_bytes = 0
        prev_key: bytes | None = None
        for e in merged:
            if e.key == prev_key:
                continue
            prev_key = e.key
            if e.tombstone and drop_tombs:
                continue
            if run_bytes + e.size > self.cfg.max_sst_bytes and run:
                runs.append(run)
                run, run_bytes = [], 0
            run.append(e)
            run_bytes += e.size
        if run:
            runs.append(run)
        return runs

    def _install_compaction(self, job: _CompactionJob, outputs: list[list[Entry]],
                            blobs: list[bytes] | None = None) -> None:
        target = job.level + 1
        while len(self.levels) <= target:
            self.levels.append([])
            self._level_bytes.append(0)
        input_sids = {s.sid for s in job.inputs}
        for n in (job.level, target):
            kept = [s for s in self.levels[n] if s.sid not in input_sids]
            removed = [s for s in self.levels[n] if s.sid in input_sids]
            self.levels[n] = kept
            for s in removed:
                self._level_bytes[n] -= s.byte_size
                self.device.block_free(s.lba, s.npages)
        for run, blob in zip(outputs, blobs or ()):
            npages = -(-len(blob) // self.cfg.page_size)
            lba = self.device.block_alloc(npages)
            self.device.write_raw(lba, blob)
            self._next_sid += 1
            sst = SSTable(self._next_sid, target, run, lba, npages, len(blob))
            insort(self.levels[target], sst, key=lambda s: s.min_key)
            self._level_bytes[target] += sst.byte_size
            self.bytes_compacted_out += sst.byte_size
        for sid in input_sids:
            self._locked_sids.discard(sid)
        self._comp_busy -= 1
        self.compaction_count += 1
        self.bytes_compacted_in += job.bytes_in
        self.mutation_counter += 1
        self._maybe_start_flush()
        self.maybe_start_compaction()
        self._notify_if_clear()

    # read path

    def get_entry(self, key: bytes) -> tuple[Entry | None, int, Transfer | None]:
        """Find the newest version of ``key``; returns (entry, probes, transfer).

        Memtable hits are free; each table whose range covers the key costs
        one page read, charged as a single combined transfer.
        """
        found: Entry | None = self.memtable.get(key)
        probes = 0
        if found is None:
            for imt in reversed(self.imts):
                found = imt.get(key)
                if found is not None:
                    break
        if found is None:
            for sst in reversed(self.levels[0]):
                if sst.covers(key):
                    probes += 1
                    i = sst.find(key)
                    if i is not None:
                        found = sst.entry_at(i, self.device.peek)
                        break
        if found is None:
            for n in range(1, len(self.levels)):
                sst = self._level_file_for(n, key)
                if sst is None:
                    continue
                probes += 1
                i = sst.find(key)
                if i is not None:
                    found = sst.entry_at(i, self.device.peek)
                    break
        transfer = None
        if probes:
            transfer = self.ledger.charge_transfer("block", "d2h", probes * self.cfg.page_size)
        return found, probes, transfer

    def _level_file_for(self, n: int, key: bytes) -> SSTable | None:
        level = self.levels[n]
        i = bisect_right([s.min_key for s in level], key) - 1
        if i >= 0 and level[i].covers(key):
            return level[i]
        return None

    def peek_seq(self, key: bytes) -> int | None:
        """Newest seq for ``key`` without charging transfers (recovery aid)."""
        e = self.memtable.get(key)
        best = e.seq if e is not None else None
        for imt in self.imts:
            e = imt.get(key)
            if e is not None and (best is None or e.seq > best):
                best = e.seq
        for sst in self.levels[0]:
            i = sst.find(key)
            if i is not None and (best is None or sst.seqs[i] > best):
                best = sst.seqs[i]
        for n in range(1, len(self.levels)):
            sst = self._level_file_for(n, key)
            if sst is not None:
                i = sst.find(key)
                if i is not None and (best is None or sst.seqs[i] > best):
                    best = sst.seqs[i]
        return best

    def iter_entries(self, start: bytes = b"") -> Iterator[Entry]:
        """Merged ascending iteration, tombstones included, newest seq wins."""
        peek = self.device.peek
        sources = []
        sources.append(iter([e for e in self.memtable.sorted_entries() if e.key >= start]))
        for imt in self.imts:
            sources.append(iter([e for e in imt.sorted_entries() if e.key >= start]))
        for sst in self.levels[0]:
            sources.append(sst.iter_from(peek, start))
        for n in range(1, len(self.levels)):
            sources.append(self._iter_level(n, start))
        merged = heapq.merge(*sources, key=lambda e: (e.key, -e.seq))
        prev: bytes | None = None
        for e in merged:
            if e.key == prev:
                continue
            prev = e.key
            yield e

    def _iter_level(self, n: int, start: bytes) -> Iterator[Entry]:
        for sst in self.levels[n]:
            if sst.max_key < start:
                continue
            yield from sst.iter_from(self.device.peek, start)

    # maintenance and checks

    @property
    def quiescent(self) -> bool:
        return (self._flush_busy == 0 and self._comp_busy == 0 and not self.imts
                and self._pick_compaction() is None)

    def check_invariants(self) -> None:
        for n, level in enumerate(self.levels):
            for sst in level:
                if sst.keys != sorted(sst.keys):
                    raise AssertionError(f"table {sst.sid}: keys out of order")
                if len(set(sst.keys)) != len(sst.keys):
                    raise AssertionError(f"table {sst.sid}: duplicate keys")
            if n >= 1:
                for a, b in zip(level, level[1:]):
                    if a.max_key >= b.min_key:
                        raise AssertionError(f"level {n}: overlapping tables {a.sid},{b.sid}")
            total = sum(s.byte_size for s in level)
            if total != self._level_bytes[n]:
                raise AssertionError(f"level {n}: byte accounting drifted")
