"""Shared-bandwidth accounting for host<->device transfers.

Two resources gate every transfer: the host bus and the device media.
Active transfers share them fairly: each gets an equal split of the
tighter capacity, recomputed whenever a transfer starts or finishes.

Accounting is exact.  Progress is tracked in "BU" units where a transfer
of N bytes needs N * 1_000_000 BU and a rate of R bytes/second advances a
transfer by R BU per microsecond.  All arithmetic stays in integers, so
the conservation invariant (ledger bytes == requested bytes) and the
per-interval capacity bound hold with no rounding drift.
"""

from __future__ import annotations

from typing import Callable

from .engine import EventKind, SimEngine

INTERVAL_US = 1_000_000
BU_PER_BYTE = 1_000_000

INTERFACES = ("block", "kv")
DIRECTIONS = ("h2d", "d2h")


class Transfer:
    """One in-flight (or finished) host<->device transfer."""

    __slots__ = ("tid", "interface", "direction", "nbytes", "rem_bu",
                 "callback", "start_us", "finish_us", "eta_us")

    def __init__(self, tid: int, interface: str, direction: str, nbytes: int,
                 callback: Callable[["Transfer"], None] | None, start_us: int) -> None:
        self.tid = tid
        self.interface = interface
        self.direction = direction
        self.nbytes = nbytes
        self.rem_bu = nbytes * BU_PER_BYTE
        self.callback = callback
        self.start_us = start_us
        self.finish_us: int | None = None
        self.eta_us = start_us

    @property
    def done(self) -> bool:
        return self.finish_us is not None


class BandwidthLedger:
    """Fair-share transfer scheduler plus per-interval byte ledger."""

    def __init__(self, engine: SimEngine, bus_capacity_bps: int, device_capacity_bps: int) -> None:
        if bus_capacity_bps <= 0 or device_capacity_bps <= 0:
            raise ValueError("capacities must be positive")
        self.engine = engine
        self.bus_capacity_bps = bus_capacity_bps
        self.device_capacity_bps = device_capacity_bps
        self._shared_bps = min(bus_capacity_bps, device_capacity_bps)
        self._active: list[Transfer] = []
        self._last_sync_us = engine.now
        self._next_tid = 0
        self._event_id: int | None = None
        # (interval, interface, direction) -> BU moved in that interval
        self.buckets: dict[tuple[int, str, str], int] = {}
        self.interval_total_bu: dict[int, int] = {}
        self.totals_bu: dict[tuple[str, str], int] = {}
        self.completed_count = 0
        self.completed_bytes = 0

    # charging

    def charge_transfer(self, interface: str, direction: str, nbytes: int,
                        callback: Callable[[Transfer], None] | None = None) -> Transfer:
        """Start a transfer now; returns it with a completion estimate.

        The estimate assumes no later arrivals; the authoritative finish is
        delivered through ``callback`` when the completion event fires.
        """
        if interface not in INTERFACES:
            raise ValueError(f"unknown interface {interface!r}")
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        if nbytes <= 0:
            raise ValueError("transfer size must be positive")
        self._sync(self.engine.now)
        self._next_tid += 1
        t = Transfer(self._next_tid, interface, direction, nbytes, callback, self.engine.now)
        self._active.append(t)
        self._reschedule()
        return t

    @property
    def active_count(self) -> int:
        return len(self._active)

    # internal mechanics

    def _rate_bps(self) -> int:
        n = len(self._active)
        if n == 0:
            return 0
        rate = self._shared_bps // n
        if rate < 1:
            raise RuntimeError(f"{n} concurrent transfers exceed capacity {self._shared_bps} B/s")
        return rate

    def _sync(self, now_us: int) -> None:
        """Attribute progress for [last_sync, now) at the current rate."""
        dt = now_us - self._last_sync_us
        if dt <= 0 or not self._active:
            self._last_sync_us = now_us
            return
        rate = self._rate_bps()
        for t in self._active:
            take = min(t.rem_bu, rate * dt)
            t.rem_bu -= take
            self._attribute(t, take, self._last_sync_us, rate)
        self._last_sync_us = now_us

    def _attribute(self, t: Transfer, budget_bu: int, t0: int, rate: int) -> None:
        cur = t0
        key_tail = (t.interface, t.direction)
        self.totals_bu[key_tail] = self.totals_bu.get(key_tail, 0) + budget_bu
        while budget_bu > 0:
            edge = (cur // INTERVAL_US + 1) * INTERVAL_US
            amt = min(budget_bu, rate * (edge - cur))
            interval = cur // INTERVAL_US
            key = (interval, t.interface, t.direction)
            self.buckets[key] = self.buckets.get(key, 0) + amt
            self.interval_total_bu[interval] = self.interval_total_bu.get(interval, 0) + amt
            budget_bu -= amt
            cur = edge

    def _reschedule(self) -> None:
        if self._event_id is not None:
            self.engine.cancel(self._event_id)
            self._event_id = None
        if not self._active:
            return
        rate = self._rate_bps()
        now = self.engine.now
        eta = None
        for t in self._active:
            t.eta_us = now + (t.rem_bu + rate - 1) // rate
            if eta is None or t.eta_us < eta:
                eta = t.eta_us
        self._event_id = self.engine.schedule(eta, EventKind.TRANSFER_COMPLETE, self._on_complete_event)

    def _on_complete_event(self) -> None:
        self._event_id = None
        self._sync(self.engine.now)
        finished = [t for t in self._active if t.rem_bu == 0]
        if not finished:
            self._reschedule()
            return
        self._active = [t for t in self._active if t.rem_bu > 0]
        for t in finished:
            t.finish_us = self.engine.now
            t.eta_us = self.engine.now
            self.completed_count += 1
            self.completed_bytes += t.nbytes
        self._reschedule()
        for t in finished:
            if t.callback is not None:
                t.callback(t)

    # reporting and invariants

    def sync(self) -> None:
        """Attribute in-flight progress up to the present (call before reading
        interval figures at a boundary)."""
        self._sync(self.engine.now)

    def interval_bytes(self, interval: int, interface: str, direction: str) -> float:
        return self.buckets.get((interval, interface, direction), 0) / BU_PER_BYTE

    def utilization(self, interval: int, resource: str) -> float:
        """Fraction of one resource's capacity used during a 1 s interval."""
        bu = self.interval_total_bu.get(interval, 0)
        if resource == "bus":
            cap = self.bus_capacity_bps
        elif resource == "device":
            cap = self.device_capacity_bps
        else:
            raise ValueError(f"unknown resource {resource!r}")
        return bu / (cap * INTERVAL_US)

    def total_bytes(self, interface: str, direction: str) -> float:
        return self.totals_bu.get((interface, direction), 0) / BU_PER_BYTE

    def check_conservation(self) -> None:
        """Ledger BU must equal the BU consumed by all transfers so far."""
        attributed = sum(self.buckets.values())
        consumed = self.completed_bytes * BU_PER_BYTE
        consumed += sum(t.nbytes * BU_PER_BYTE - t.rem_bu for t in self._active)
        if attributed != consumed:
            raise AssertionError(f"ledger mismatch: attributed {attributed} BU, consumed {consumed} BU")

    def check_capacity(self) -> None:
        """No interval may exceed either resource's capacity."""
        for interval, bu in self.interval_total_bu.items():
            for name, cap in (("bus", self.bus_capacity_bps), ("device", self.device_capacity_bps)):
                if bu > cap * INTERVAL_US:
                    raise AssertionError(
                        f"interval {interval}: {bu} BU exceeds {name} capacity {cap * INTERVAL_US} BU")
