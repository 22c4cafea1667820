"""Simulated SSD exposing a block interface and a key-value interface.

A disaggregation point splits the flat page space: pages below it form
the block region (the host LSM's backing store), pages at or above it
form the kv region, owned by a small device-side LSM (one memtable plus
a flat list of tables, newest first).  Commands on either interface move
their payload through the shared bandwidth ledger; device-internal work
(memtable flushes inside the device) costs no bus bandwidth.

The device image (both regions plus allocator and device-LSM state) can
be dumped to a single file and loaded back.  Layout, little-endian:

    magic    8s   b"DUALKV01"
    page_size u32, total_pages u64, disaggregation_point u64
    block allocator: n_extents u32, then (start u64, npages u64) each
    kv allocator:    same shape
    media:   n_pages u64, then (index u64, page bytes) each, ascending
    dev-lsm: flags u8 (bit0 flush enabled, bit1 compaction enabled),
             capacity u64, next_table_id u32,
             memtable: n_records u32, then records (wire format),
             active tables: n u32, then (lba u64, npages u64, blob_len u64),
             frozen epochs: n u32, then per epoch:
                 has_run u8 [+ n_records u32 + records],
                 n_tables u32, then (lba u64, npages u64, blob_len u64)
"""

from __future__ import annotations

import heapq
import struct
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .config import SimConfig
from .engine import SimEngine
from .ledger import BandwidthLedger, Transfer
from .records import (Entry, decode_record, decode_table, encode_entry, encode_table,
                      encoded_size, fragment_records, pack_chunks, table_value_offsets)

IMG_MAGIC = b"DUALKV01"


class RegionFault(Exception):
    """Block command touched the kv region, or any access left the device."""


class DeviceFull(Exception):
    """The kv region cannot accept more data."""


class PageAllocator:
    """First-fit extent allocator over a half-open page range."""

    def __init__(self, start: int, count: int) -> None:
        self.start = start
        self.count = count
        self.extents: list[list[int]] = [[start, count]]  # sorted [start, npages]

    @property
    def free_pages(self) -> int:
        return sum(n for _, n in self.extents)

    def alloc(self, npages: int) -> int:
        if npages <= 0:
            raise ValueError("allocation must be positive")
        for ext in self.extents:
            if ext[1] >= npages:
                lba = ext[0]
                ext[0] += npages
                ext[1] -= npages
                if ext[1] == 0:
                    self.extents.remove(ext)
                return lba
        raise DeviceFull(f"no free extent of {npages} pages")

    def free(self, lba: int, npages: int) -> None:
        if not (self.start <= lba and lba + npages <= self.start + self.count):
            raise ValueError("freeing pages outside the allocator's range")
        starts = [e[0] for e in self.extents]
        i = bisect_left(starts, lba)
        if (i < len(self.extents) and lba + npages > self.extents[i][0]) or \
           (i > 0 and self.extents[i - 1][0] + self.extents[i - 1][1] > lba):
            raise ValueError("double free")
        self.extents.insert(i, [lba, npages])
        # merge with neighbors
        if i + 1 < len(self.extents) and self.extents[i][0] + self.extents[i][1] == self.extents[i + 1][0]:
            self.extents[i][1] += self.extents[i + 1][1]
            del self.extents[i + 1]
        if i > 0 and self.extents[i - 1][0] + self.extents[i - 1][1] == self.extents[i][0]:
            self.extents[i - 1][1] += self.extents[i][1]
            del self.extents[i]


class DevTable:
    """One immutable device-side table; bytes live in kv-region pages."""

    __slots__ = ("tid", "keys", "seqs", "tombs", "value_offsets", "value_lens",
                 "lba", "npages", "byte_size")

    def __init__(self, tid: int, entries: list[Entry], lba: int, npages: int, byte_size: int) -> None:
        self.tid = tid
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

    def covers(self, key: bytes) -> bool:
        return self.min_key <= key <= self.max_key

    def find(self, key: bytes) -> int | None:
        i = bisect_left(self.keys, key)
        if i < len(self.keys) and self.keys[i] == key:
            return i
        return None

    def entry_at(self, i: int, peek) -> Entry:
        value = peek(self.lba, self.value_offsets[i], self.value_lens[i])
        return Entry(self.keys[i], value, self.seqs[i], self.tombs[i])

    def iter_from(self, peek, start: bytes = b"") -> Iterator[Entry]:
        for i in range(bisect_left(self.keys, start), len(self.keys)):
            yield self.entry_at(i, peek)


@dataclass
class FrozenEpoch:
    """Device-LSM state set aside for one drain pass; immutable afterwards."""
    run: list[Entry] | None
    tables: list[DevTable] = field(default_factory=list)


@dataclass
class DeviceCommand:
    op: str
    args: dict = field(default_factory=dict)


@dataclass
class KvIterator:
    iid: int
    gen: Iterator[Entry] | None = None


class BulkScan:
    """Snapshot of a key range, delivered as packed wire-format chunks."""

    def __init__(self, device: "HybridDevice", encoded: list[bytes]) -> None:
        self._device = device
        self._chunks = pack_chunks(encoded)
        self.chunks_emitted = 0
        self.records_emitted = 0
        self.bytes_emitted = 0

    def next_chunk(self, callback: Callable[[bytes, int, Transfer], None] | None = None
                   ) -> tuple[bytes, int, Transfer] | None:
        """Emit the next chunk, charging its bytes on the kv interface."""
        nxt = next(self._chunks, None)
        if nxt is None:
            return None
        chunk, n_records = nxt
        self.chunks_emitted += 1
        self.records_emitted += n_records
        self.bytes_emitted += len(chunk)
        transfer = self._device.ledger.charge_transfer(
            "kv", "d2h", len(chunk),
            (lambda t, c=chunk, n=n_records: callback(c, n, t)) if callback else None)
        return chunk, n_records, transfer


class HybridDevice:
    """The simulated dual-interface SSD."""

    def __init__(self, engine: SimEngine, ledger: BandwidthLedger, cfg: SimConfig) -> None:
        self.engine = engine
        self.ledger = ledger
        self.cfg = cfg
        self.page_size = cfg.page_size
        self.total_pages = cfg.total_pages
        self.dp = cfg.disaggregation_point
        self.media: dict[int, bytes] = {}
        self.block_allocator = PageAllocator(0, self.dp)
        self.kv_allocator = PageAllocator(self.dp, self.total_pages - self.dp)
        # device LSM
        self.dev_memtable: dict[bytes, Entry] = {}
        self.dev_memtable_bytes = 0
        self.dev_tables: list[DevTable] = []
        self.frozen: list[FrozenEpoch] = []
        self.flush_enabled = cfg.dev_flush_enabled
        self.compaction_enabled = cfg.dev_compaction_enabled
        self.capacity_bytes = cfg.dev_capacity_effective
        self._next_tid = 0
        self._iters: dict[int, KvIterator] = {}
        self._next_iid = 0
        self.mutation_counter = 0
        # counters
        self.kv_puts = 0
        self.kv_gets = 0
        self.kv_steps = 0
        self.dev_flushes = 0

    # raw media helpers (no charge; the caller has already paid for the I/O)

    def _check_extent(self, lba: int, npages: int) -> None:
        if lba < 0 or npages <= 0 or lba + npages > self.total_pages:
            raise RegionFault(f"extent [{lba}, {lba + npages}) outside the device")

    def write_raw(self, lba: int, blob: bytes) -> None:
        npages = -(-len(blob) // self.page_size)
        self._check_extent(lba, npages)
        ps = self.page_size
        for i in range(npages):
            page = blob[i * ps:(i + 1) * ps]
            if len(page) < ps:
                page = page + b"\x00" * (ps - len(page))
            self.media[lba + i] = page
        return None

    def read_raw(self, lba: int, npages: int) -> bytes:
        self._check_extent(lba, npages)
        blank = b"\x00" * self.page_size
        return b"".join(self.media.get(lba + i, blank) for i in range(npages))

    def peek(self, lba: int, byte_offset: int, length: int) -> bytes:
        """Read ``length`` bytes starting at ``byte_offset`` within an extent."""
        ps = self.page_size
        first = lba + byte_offset // ps
        last = lba + (byte_offset + length - 1) // ps if length else first
        blob = self.read_raw(first, last - first + 1)
        skip = byte_offset % ps
        return blob[skip:skip + length]

    def _purge(self, lba: int, npages: int) -> None:
        for i in range(npages):
            self.media.pop(lba + i, None)

    # block interface (host-managed region)

    def block_alloc(self, npages: int) -> int:
        return self.block_allocator.alloc(npages)

    def block_free(self, lba: int, npages: int) -> None:
        self.block_allocator.free(lba, npages)
        self._purge(lba, npages)

    def _check_block_extent(self, lba: int, npages: int) -> None:
        self._check_extent(lba, npages)
        if lba + npages > self.dp:
            raise RegionFault(
                f"block command crossed the disaggregation point at page {self.dp}")

    def block_read(self, lba: int, npages: int,
                   callback: Callable[[Transfer], None] | None = None) -> tuple[bytes, Transfer]:
        self._check_block_extent(lba, npages)
        data = self.read_raw(lba, npages)
        t = self.ledger.charge_transfer("block", "d2h", npages * self.page_size, callback)
        return data, t

    def block_write(self, lba: int, data: bytes,
                    callback: Callable[[Transfer], None] | None = None) -> Transfer:
        npages = -(-len(data) // self.page_size)
        self._check_block_extent(lba, npages)

        def _apply(t: Transfer) -> None:
            self.write_raw(lba, data)
            if callback is not None:
                callback(t)

        return self.ledger.charge_transfer("block", "h2d", npages * self.page_size, _apply)

    # kv interface

    def dev_bytes_used(self) -> int:
        used = self.dev_memtable_bytes
        used += sum(t.byte_size for t in self.dev_tables)
        for epoch in self.frozen:
            if epoch.run is not None:
                used += sum(e.size for e in epoch.run)
            used += sum(t.byte_size for t in epoch.tables)
        return used

    def dev_is_empty(self) -> bool:
        return not self.dev_memtable and not self.dev_tables and not self.frozen

    def kv_put(self, key: bytes, value: bytes, seq: int, tombstone: bool = False,
               callback: Callable[[Transfer], None] | None = None) -> Transfer:
        size = encoded_size(key, value)
        old = self.dev_memtable.get(key)
        growth = size - (old.size if old is not None and old.seq < seq else 0)
        if self.dev_bytes_used() + growth > self.capacity_bytes:
            raise DeviceFull(f"kv region at capacity ({self.capacity_bytes} bytes)")
        if (self.dev_memtable_bytes + size > self.cfg.dev_memtable_bytes
                and self.dev_memtable and self.flush_enabled):
            self._dev_flush()
        entry = Entry(key, value, seq, tombstone)
        old = self.dev_memtable.get(key)
        if old is None or old.seq < seq:
            if old is not None:
                self.dev_memtable_bytes -= old.size
            self.dev_memtable[key] = entry
            self.dev_memtable_bytes += entry.size
        self.mutation_counter += 1
        self.kv_puts += 1
        return self.ledger.charge_transfer("kv", "h2d", size, callback)

    def _dev_flush(self) -> None:
        """Spill the device memtable to a new table; device-internal, no bus cost."""
        entries = [self.dev_memtable[k] for k in sorted(self.dev_memtable)]
        blob = encode_table(entries)
        npages = -(-len(blob) // self.page_size)
        lba = self.kv_allocator.alloc(npages)
        self.write_raw(lba, blob)
        self._next_tid += 1
        self.dev_tables.append(DevTable(self._next_tid, entries, lba, npages, len(blob)))
        self.dev_memtable = {}
        self.dev_memtable_bytes = 0
        self.dev_flushes += 1
        self.mutation_counter += 1
        if self.compaction_enabled and len(self.dev_tables) >= self.cfg.dev_compaction_trigger:
            self._dev_compact()

    def _dev_compact(self) -> None:
        """Fold every active table into one; tombstones are kept (the host
        still needs them to replay deletes during a drain)."""
        merged: list[Entry] = []
        streams = [t.iter_from(self.peek) for t in self.dev_tables]
        prev = None
        for e in heapq.merge(*streams, key=lambda e: (e.key, -e.seq)):
            if e.key == prev:
                continue
            prev = e.key
            merged.append(e)
        blob = encode_table(merged)
        npages = -(-len(blob) // self.page_size)
        try:
            lba = self.kv_allocator.alloc(npages)
        except DeviceFull:
            return  # housekeeping is best-effort; retry on a later flush
        self.write_raw(lba, blob)
        for t in self.dev_tables:
            self.kv_allocator.free(t.lba, t.npages)
            self._purge(t.lba, t.npages)
        self._next_tid += 1
        self.dev_tables = [DevTable(self._next_tid, merged, lba, npages, len(blob))]
        self.mutation_counter += 1

    def _probe_order(self) -> Iterator[tuple[str, object]]:
        """Sources newest-first: active memtable, active tables, then each
        frozen epoch newest-first (its run, then its tables)."""
        yield "mem", self.dev_memtable
        for t in reversed(self.dev_tables):
            yield "table", t
        for epoch in reversed(self.frozen):
            if epoch.run is not None:
                yield "run", epoch.run
            for t in reversed(epoch.tables):
                yield "table", t

    def kv_get(self, key: bytes) -> tuple[Entry | None, int, Transfer]:
        """Newest entry for ``key``, probing tables newest-first.

        The reply always crosses the bus: each table probed ships one page,
        a memtable or run hit ships the record itself, and a miss ships a
        status echo the size of the key.
        """
        self.kv_gets += 1
        probes = 0
        found: Entry | None = None
        for kind, src in self._probe_order():
            if kind == "mem":
                found = src.get(key)
            elif kind == "run":
                i = bisect_left([e.key for e in src], key)
                found = src[i] if i < len(src) and src[i].key == key else None
            else:
                if not src.covers(key):
                    continue
                probes += 1
                i = src.find(key)
                found = src.entry_at(i, self.peek) if i is not None else None
            if found is not None:
                break
        if probes:
            nbytes = probes * self.page_size
        elif found is not None:
            nbytes = found.size
        else:
            nbytes = len(key)
        transfer = self.ledger.charge_transfer("kv", "d2h", nbytes)
        return found, probes, transfer

    def _kv_sources(self, start: bytes, frozen_only: bool) -> list[Iterator[Entry]]:
        sources: list[Iterator[Entry]] = []
        if not frozen_only:
            run = [self.dev_memtable[k] for k in sorted(self.dev_memtable) if k >= start]
            sources.append(iter(run))
            for t in self.dev_tables:
                sources.append(t.iter_from(self.peek, start))
        for epoch in self.frozen:
            if epoch.run is not None:
                i = bisect_left([e.key for e in epoch.run], start)
                sources.append(iter(epoch.run[i:]))
            for t in epoch.tables:
                sources.append(t.iter_from(self.peek, start))
        return sources

    def kv_iter_from(self, start: bytes, frozen_only: bool = False) -> Iterator[Entry]:
        """Merged ascending iteration (tombstones included), newest seq wins."""
        merged = heapq.merge(*self._kv_sources(start, frozen_only), key=lambda e: (e.key, -e.seq))
        prev: bytes | None = None
        for e in merged:
            if e.key == prev:
                continue
            prev = e.key
            yield e

    # cursor-style iterator commands

    def kv_open_iter(self) -> int:
        self._next_iid += 1
        self._iters[self._next_iid] = KvIterator(self._next_iid)
        return self._next_iid

    def kv_seek(self, iid: int, start: bytes) -> tuple[Entry | None, Transfer]:
        """Position at the first key >= start; one page read per step."""
        it = self._iters[iid]
        it.gen = self.kv_iter_from(start)
        return self._kv_step(it)

    def kv_next(self, iid: int) -> tuple[Entry | None, Transfer]:
        it = self._iters[iid]
        if it.gen is None:
            raise ValueError("kv_next before kv_seek")
        return self._kv_step(it)

    def _kv_step(self, it: KvIterator) -> tuple[Entry | None, Transfer]:
        self.kv_steps += 1
        entry = next(it.gen, None)
        t = self.ledger.charge_transfer("kv", "d2h", self.page_size)
        return entry, t

    def kv_close_iter(self, iid: int) -> None:
        self._iters.pop(iid, None)

    # bulk scan, reset, freeze

    def kv_range_scan_bulk(self, start: bytes = b"", end: bytes | None = None,
                           frozen_only: bool = False) -> BulkScan:
        """Snapshot [start, end] as packed chunks of at most CHUNK_MAX bytes."""
        encoded: list[bytes] = []
        for e in self.kv_iter_from(start, frozen_only):
            if end is not None and e.key > end:
                break
            encoded.extend(fragment_records(e.key, e.seq, e.tombstone, e.value))
        return BulkScan(self, encoded)

    def kv_reset(self) -> None:
        """Discard the entire key-value state; frees every kv-region page."""
        self.drop_frozen()
        for t in self.dev_tables:
            self.kv_allocator.free(t.lba, t.npages)
            self._purge(t.lba, t.npages)
        self.dev_tables = []
        self.dev_memtable = {}
        self.dev_memtable_bytes = 0
        self.mutation_counter += 1

    def freeze(self) -> None:
        """Set the active state aside as a new frozen epoch for draining."""
        run = None
        if self.dev_memtable:
            run = [self.dev_memtable[k] for k in sorted(self.dev_memtable)]
        self.frozen.append(FrozenEpoch(run, self.dev_tables))
        self.dev_tables = []
        self.dev_memtable = {}
        self.dev_memtable_bytes = 0
        self.mutation_counter += 1

    def drop_frozen(self) -> None:
        for epoch in self.frozen:
            for t in epoch.tables:
                self.kv_allocator.free(t.lba, t.npages)
                self._purge(t.lba, t.npages)
        self.frozen = []
        self.mutation_counter += 1

    # uniform command surface

    def submit(self, cmd: DeviceCommand, callback: Callable[[Transfer], None] | None = None):
        """Dispatch one device command; block opcodes fault on kv-region
        addresses and vice versa (kv opcodes carry no addresses)."""
        op, a = cmd.op, cmd.args
        if op == "block-read":
            return self.block_read(a["lba"], a["npages"], callback)
        if op == "block-write":
            return self.block_write(a["lba"], a["data"], callback)
        if op == "kv-put":
            return self.kv_put(a["key"], a["value"], a["seq"], a.get("tombstone", False), callback)
        if op == "kv-get":
            return self.kv_get(a["key"])
        if op == "kv-seek":
            return self.kv_seek(a["iid"], a["start"])
        if op == "kv-next":
            return self.kv_next(a["iid"])
        if op == "kv-range-scan":
            return self.kv_range_scan_bulk(a.get("start", b""), a.get("end"))
        if op == "kv-reset":
            return self.kv_reset()
        raise ValueError(f"unknown opcode {cmd.op!r}")

    # image dump / load

    def dump(self, path: str) -> None:
        out: list[bytes] = [IMG_MAGIC, struct.pack("<IQQ", self.page_size, self.total_pages, self.dp)]

        def put_alloc(alloc: PageAllocator) -> None:
            out.append(struct.pack("<I", len(alloc.extents)))
            for s, n in alloc.extents:
                out.append(struct.pack("<QQ", s, n))

        put_alloc(self.block_allocator)
        put_alloc(self.kv_allocator)
        out.append(struct.pack("<Q", len(self.media)))
        for idx in sorted(self.media):
            out.append(struct.pack("<Q", idx))
            out.append(self.media[idx])
        flags = (1 if self.flush_enabled else 0) | (2 if self.compaction_enabled else 0)
        out.append(struct.pack("<BQI", flags, self.capacity_bytes, self._next_tid))

        def put_records(entries: list[Entry]) -> None:
            out.append(struct.pack("<I", len(entries)))
            for e in entries:
                out.append(encode_entry(e))

        def put_tables(tables: list[DevTable]) -> None:
            out.append(struct.pack("<I", len(tables)))
            for t in tables:
                out.append(struct.pack("<QQQ", t.lba, t.npages, t.byte_size))

        put_records([self.dev_memtable[k] for k in sorted(self.dev_memtable)])
        put_tables(self.dev_tables)
        out.append(struct.pack("<I", len(self.frozen)))
        for epoch in self.frozen:
            out.append(struct.pack("<B", 1 if epoch.run is not None else 0))
            if epoch.run is not None:
                put_records(epoch.run)
            put_tables(epoch.tables)
        with open(path, "wb") as fp:
            fp.write(b"".join(out))

    @classmethod
    def load(cls, path: str, engine: SimEngine, ledger: BandwidthLedger, cfg: SimConfig) -> "HybridDevice":
        with open(path, "rb") as fp:
            buf = fp.read()
        if buf[:8] != IMG_MAGIC:
            raise ValueError("not a device image")
        off = 8
        page_size, total_pages, dp = struct.unpack_from("<IQQ", buf, off)
        off += struct.calcsize("<IQQ")
        cfg = cfg.copy(page_size=page_size, total_pages=total_pages, disaggregation_point=dp)
        dev = cls(engine, ledger, cfg)

        def get_alloc() -> list[list[int]]:
            nonlocal off
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            exts = []
            for _ in range(n):
                s, c = struct.unpack_from("<QQ", buf, off)
                off += 16
                exts.append([s, c])
            return exts

        dev.block_allocator.extents = get_alloc()
        dev.kv_allocator.extents = get_alloc()
        (n_pages,) = struct.unpack_from("<Q", buf, off)
        off += 8
        for _ in range(n_pages):
            (idx,) = struct.unpack_from("<Q", buf, off)
            off += 8
            dev.media[idx] = buf[off:off + page_size]
            off += page_size
        flags, capacity, next_tid = struct.unpack_from("<BQI", buf, off)
        off += struct.calcsize("<BQI")
        dev.flush_enabled = bool(flags & 1)
        dev.compaction_enabled = bool(flags & 2)
        dev.capacity_bytes = capacity
        dev._next_tid = next_tid

        def get_records() -> list[Entry]:
            nonlocal off
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            out = []
            for _ in range(n):
                key, seq, rflags, value, off2 = decode_record(buf, off)
                off = off2
                out.append(Entry(key, value, seq, bool(rflags & 1)))
            return out

        def get_tables() -> list[DevTable]:
            nonlocal off
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            tables = []
            for _ in range(n):
                lba, npages, blen = struct.unpack_from("<QQQ", buf, off)
                off += 24
                entries, _, _ = decode_table(dev.peek(lba, 0, blen))
                tables.append(DevTable(0, entries, lba, npages, blen))
            return tables

        mem = get_records()
        for e in mem:
            dev.dev_memtable[e.key] = e
            dev.dev_memtable_bytes += e.size
        dev.dev_tables = get_tables()
        for i, t in enumerate(dev.dev_tables, start=1):
            t.tid = i
        (n_epochs,) = struct.unpack_from("<I", buf, off)
        off += 4
        for _ in range(n_epochs):
            (has_run,) = struct.unpack_from("<B", buf, off)
            off += 1
            run = get_records() if has_run else None
            dev.frozen.append(FrozenEpoch(run, get_tables()))
        return dev

    def check_invariants(self) -> None:
        """Regions disjoint, allocators consistent, tables well-formed."""
        for name, alloc, lo, hi in (("block", self.block_allocator, 0, self.dp),
                                    ("kv", self.kv_allocator, self.dp, self.total_pages)):
            covered = 0
            prev_end = lo - 1
            for s, n in alloc.extents:
                if s <= prev_end or s + n > hi:
                    raise AssertionError(f"{name} allocator extent [{s},{s + n}) malformed")
                prev_end = s + n - 1
                covered += n
            if covered > hi - lo:
                raise AssertionError(f"{name} allocator free count overflows its region")
        for t in self.dev_tables:
            if t.keys != sorted(t.keys):
                raise AssertionError(f"device table {t.tid} out of order")
