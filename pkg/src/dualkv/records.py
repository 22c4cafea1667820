"""Entry type and the bit-exact record / table codecs.

One record layout is shared by every serialized surface (SST files in the
block region, device SSTs, bulk-scan chunks, the device image):

    key_len   u16 LE
    key       key_len bytes
    seq       u64 LE
    flags     u8   (bit0 tombstone, bit1 continuation)
    value_len u32 LE
    value     value_len bytes

A table (SST) wraps a sorted run of records:

    magic  b"SST1"
    count  u32 LE
    records...
    footer: min_key_len u16 LE, min_key, max_key_len u16 LE, max_key

Bulk scans deliver records packed into chunks of at most CHUNK_MAX bytes.
A record never straddles chunks unless it alone exceeds CHUNK_MAX, in
which case it is split into well-formed fragment records carrying the
same key and seq, with the continuation bit set on every fragment except
the last.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

RECORD_OVERHEAD = 15          # 2 (key_len) + 8 (seq) + 1 (flags) + 4 (value_len)
CHUNK_MAX = 524_288           # 512 KiB per bulk-scan chunk
FLAG_TOMBSTONE = 0x01
FLAG_CONTINUATION = 0x02
SST_MAGIC = b"SST1"

_HEAD = struct.Struct("<H")
_BODY = struct.Struct("<QBI")
_COUNT = struct.Struct("<I")


class CodecError(ValueError):
    """Raised on truncated or malformed serialized data."""


@dataclass(frozen=True)
class Entry:
    """One key version; deletes are entries with the tombstone flag set."""

    key: bytes
    value: bytes
    seq: int
    tombstone: bool = False

    @property
    def size(self) -> int:
        return RECORD_OVERHEAD + len(self.key) + len(self.value)


def encoded_size(key: bytes, value: bytes) -> int:
    return RECORD_OVERHEAD + len(key) + len(value)


def encode_record(key: bytes, seq: int, flags: int, value: bytes) -> bytes:
    if len(key) > 0xFFFF:
        raise CodecError(f"key too long: {len(key)} bytes")
    if len(value) > 0xFFFFFFFF:
        raise CodecError(f"value too long: {len(value)} bytes")
    return b"".join((_HEAD.pack(len(key)), key, _BODY.pack(seq, flags, len(value)), value))


def encode_entry(entry: Entry) -> bytes:
    return encode_record(entry.key, entry.seq, FLAG_TOMBSTONE if entry.tombstone else 0, entry.value)


def decode_record(buf: bytes | memoryview, offset: int = 0) -> tuple[bytes, int, int, bytes, int]:
    """Decode one record at ``offset``; returns (key, seq, flags, value, next_offset)."""
    view = memoryview(buf)
    try:
        (key_len,) = _HEAD.unpack_from(view, offset)
        offset += 2
        key = bytes(view[offset:offset + key_len])
        if len(key) != key_len:
            raise CodecError("truncated key")
        offset += key_len
        seq, flags, value_len = _BODY.unpack_from(view, offset)
        offset += 13
        value = bytes(view[offset:offset + value_len])
        if len(value) != value_len:
            raise CodecError("truncated value")
        offset += value_len
    except struct.error as exc:
        raise CodecError(f"truncated record at offset {offset}") from exc
    return key, seq, flags, value, offset


def decode_records(buf: bytes | memoryview) -> list[tuple[bytes, int, int, bytes]]:
    out = []
    offset = 0
    n = len(buf)
    while offset < n:
        key, seq, flags, value, offset = decode_record(buf, offset)
        out.append((key, seq, flags, value))
    return out


# fragmentation and chunk packing

def fragment_records(key: bytes, seq: int, tombstone: bool, value: bytes) -> list[bytes]:
    """Encode one logical record, splitting only if it exceeds CHUNK_MAX."""
    base_flags = FLAG_TOMBSTONE if tombstone else 0
    whole = encode_record(key, seq, base_flags, value)
    if len(whole) <= CHUNK_MAX:
        return [whole]
    piece = CHUNK_MAX - RECORD_OVERHEAD - len(key)
    if piece <= 0:
        raise CodecError("key alone exceeds the chunk bound")
    frags = []
    for start in range(0, len(value), piece):
        part = value[start:start + piece]
        last = start + piece >= len(value)
        flags = base_flags | (0 if last else FLAG_CONTINUATION)
        frags.append(encode_record(key, seq, flags, part))
    return frags


def pack_chunks(encoded: Iterable[bytes]) -> Iterator[tuple[bytes, int]]:
    """Greedily pack encoded records into chunks; yields (chunk, n_records)."""
    parts: list[bytes] = []
    size = 0
    for rec in encoded:
        if size and size + len(rec) > CHUNK_MAX:
            yield b"".join(parts), len(parts)
            parts, size = [], 0
        parts.append(rec)
        size += len(rec)
    if parts:
        yield b"".join(parts), len(parts)


def reassemble(decoded: Iterable[tuple[bytes, int, int, bytes]]) -> Iterator[Entry]:
    """Merge continuation fragments back into whole entries."""
    pend_key: bytes | None = None
    pend_seq = 0
    pend_tomb = False
    pend_parts: list[bytes] = []
    for key, seq, flags, value in decoded:
        if pend_key is not None and (key != pend_key or seq != pend_seq):
            raise CodecError("interleaved continuation fragments")
        if flags & FLAG_CONTINUATION:
            if pend_key is None:
                pend_key, pend_seq, pend_tomb = key, seq, bool(flags & FLAG_TOMBSTONE)
            pend_parts.append(value)
            continue
        if pend_key is not None:
            pend_parts.append(value)
            yield Entry(pend_key, b"".join(pend_parts), pend_seq, pend_tomb)
            pend_key, pend_parts = None, []
            continue
        yield Entry(key, value, seq, bool(flags & FLAG_TOMBSTONE))
    if pend_key is not None:
        raise CodecError("dangling continuation fragment")


# table (SST) container

def encode_table(entries: list[Entry]) -> bytes:
    """Serialize a sorted, unique-key run of entries as one table blob."""
    if not entries:
        raise CodecError("refusing to encode an empty table")
    parts = [SST_MAGIC, _COUNT.pack(len(entries))]
    prev: bytes | None = None
    for e in entries:
        if prev is not None and e.key <= prev:
            raise CodecError("table entries must be strictly ascending by key")
        prev = e.key
        parts.append(encode_entry(e))
    min_key, max_key = entries[0].key, entries[-1].key
    parts.append(_HEAD.pack(len(min_key)))
    parts.append(min_key)
    parts.append(_HEAD.pack(len(max_key)))
    parts.append(max_key)
    return b"".join(parts)


def table_value_offsets(entries: list[Entry]) -> list[int]:
    """Byte offset of each entry's value inside its encode_table() blob."""
    offsets = []
    cursor = 4 + _COUNT.size
    for e in entries:
        cursor += 2 + len(e.key) + 13
        offsets.append(cursor)
        cursor += len(e.value)
    return offsets


def decode_table(buf: bytes | memoryview) -> tuple[list[Entry], bytes, bytes]:
    """Parse a table blob; returns (entries, min_key, max_key)."""
    view = memoryview(buf)
    if bytes(view[:4]) != SST_MAGIC:
        raise CodecError("bad table magic")
    (count,) = _COUNT.unpack_from(view, 4)
    offset = 8
    entries = []
    for _ in range(count):
        key, seq, flags, value, offset = decode_record(view, offset)
        entries.append(Entry(key, value, seq, bool(flags & FLAG_TOMBSTONE)))
    try:
        (n,) = _HEAD.unpack_from(view, offset)
        offset += 2
        min_key = bytes(view[offset:offset + n])
        offset += n
        (n,) = _HEAD.unpack_from(view, offset)
        offset += 2
        max_key = bytes(view[offset:offset + n])
        offset += n
    except struct.error as exc:
        raise CodecError("truncated table footer") from exc
    if entries and (entries[0].key != min_key or entries[-1].key != max_key):
        raise CodecError("table footer does not match its records")
    return entries, min_key, max_key
