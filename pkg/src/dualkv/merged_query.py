"""Range reads that merge the host tree with redirected device data.

While writes are being redirected, a range query must see both sides:
the host LSM supplies one ascending entry stream, the device's cursor
commands supply the other.  The smaller key wins each step; when both
sides hold the same key, the metadata table picks the winner (a mapped
key means the device version is newer) and both streams advance.  A
device-only key that the metadata table no longer maps is a superseded
leftover awaiting its drain, and is skipped.  A winner that is a
tombstone suppresses the key.

Charges: every device step is a cursor command and pays one page on the
kv interface; every host advance pays one page on the block interface.
The transfers accumulate on the iterator so callers can pace on them.

Iterators are snapshots only of position, not of data, so any mutation
on either side (including background flushes and compactions on the
host) invalidates open iterators; the next step then raises
IteratorInvalidated.  Re-seeking re-arms the iterator.
"""

from __future__ import annotations

from .device import HybridDevice
from .ledger import Transfer
from .main_lsm import MainLsm


class IteratorInvalidated(Exception):
    """Either store side mutated while this iterator was open."""


class DualIterator:
    """Merged ascending (key, value) stream over both store sides."""

    def __init__(self, main: MainLsm, device: HybridDevice, metadata,
                 start: bytes = b"") -> None:
        self._main = main
        self._device = device
        self._metadata = metadata
        self._iid = device.kv_open_iter()
        self.transfers: list[Transfer] = []
        self.switches = 0
        self.emitted = 0
        self.steps = 0
        self.last_key: bytes | None = None
        self._last_side: str | None = None
        self.seek(start)

    def seek(self, start: bytes) -> None:
        """(Re)position both sides at the first key >= start."""
        self._stamp = (self._main.mutation_counter, self._device.mutation_counter)
        self._main_it = self._main.iter_entries(start)
        self._main_head = next(self._main_it, None)
        self._dev_head, t = self._device.kv_seek(self._iid, start)
        self.transfers.append(t)

    def _check_stamp(self) -> None:
        if self._stamp != (self._main.mutation_counter, self._device.mutation_counter):
            raise IteratorInvalidated(f"store mutated after key {self.last_key!r}")

    def _advance_main(self) -> None:
        self._main_head = next(self._main_it, None)
        self.transfers.append(
            self._device.ledger.charge_transfer("block", "d2h", self._device.page_size))

    def _advance_dev(self) -> None:
        self._dev_head, t = self._device.kv_next(self._iid)
        self.transfers.append(t)

    def next(self) -> tuple[bytes, bytes] | None:
        """The next live (key, value) pair, or None at the end of both sides."""
        while True:
            self._check_stamp()
            mh, dh = self._main_head, self._dev_head
            if mh is None and dh is None:
                return None
            if dh is None or (mh is not None and mh.key < dh.key):
                winner, side = mh, "main"
                self._advance_main()
            elif mh is None or dh.key < mh.key:
                md = self._metadata.get(dh.key)
                if md is None:
                    # superseded by a host write whose own trace has since
                    # compacted away; the device copy is dead weight until
                    # the next drain skips it
                    self._advance_dev()
                    self.steps += 1
                    continue
                assert md == dh.seq  # the cursor dedups to the newest version
                winner, side = dh, "dev"
                self._advance_dev()
            else:
                md = self._metadata.get(mh.key)
                assert (md is not None) == (dh.seq > mh.seq)
                winner, side = (dh, "dev") if md is not None else (mh, "main")
                self._advance_main()
                self._advance_dev()
            self.steps += 1
            self.last_key = winner.key
            if winner.tombstone:
                continue
            if self._last_side is not None and side != self._last_side:
                self.switches += 1
            self._last_side = side
            self.emitted += 1
            return winner.key, winner.value

    def collect(self, n: int) -> list[tuple[bytes, bytes]]:
        """Emit up to ``n`` pairs from the current position."""
        out: list[tuple[bytes, bytes]] = []
        while len(out) < n:
            kv = self.next()
            if kv is None:
                break
            out.append(kv)
        return out

    def range(self, start: bytes, n: int) -> list[tuple[bytes, bytes]]:
        """Seek to ``start`` then take up to ``n`` more steps (≤ n+1 pairs)."""
        self.seek(start)
        return self.collect(n + 1)

    def close(self) -> None:
        self._device.kv_close_iter(self._iid)
