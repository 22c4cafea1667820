"""Discrete-event core: virtual clock and event queue.

Virtual time is an integer count of microseconds.  Events scheduled for
the same instant fire in scheduling order, so a run is a pure function of
its inputs: same config and seed, same event sequence.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

SECOND_US = 1_000_000


class EventKind(Enum):
    OP_ARRIVAL = "op-arrival"
    FLUSH_COMPLETE = "flush-complete"
    COMPACTION_COMPLETE = "compaction-complete"
    TRANSFER_COMPLETE = "transfer-complete"
    DETECTOR_TICK = "detector-tick"
    ROLLBACK_STEP = "rollback-step"


class SchedulingError(ValueError):
    """Raised when an event is scheduled in the past."""


class DeadlockError(RuntimeError):
    """Raised when run_until() runs out of events before its predicate holds."""


@dataclass(order=True)
class Event:
    fire_us: int
    seq: int
    kind: EventKind = field(compare=False)
    fn: Callable[[], None] | None = field(compare=False, default=None)
    cancelled: bool = field(compare=False, default=False)


class SimEngine:
    """Single-threaded virtual-time event loop.

    All simulated state is mutated from event handlers running on this
    loop; there is no real concurrency anywhere in the simulator.
    """

    __slots__ = ("now", "_heap", "_seq", "_live", "fired_count", "event_log", "record_events")

    def __init__(self, record_events: bool = False) -> None:
        self.now = 0
        self._heap: list[Event] = []
        self._seq = 0
        self._live: dict[int, Event] = {}
        self.fired_count = 0
        self.record_events = record_events
        self.event_log: list[tuple[int, str, int]] = []

    def schedule(self, fire_us: int, kind: EventKind, fn: Callable[[], None] | None = None) -> int:
        """Queue an event; returns an id usable with cancel()."""
        if fire_us < self.now:
            raise SchedulingError(f"cannot schedule at {fire_us} us; now is {self.now} us")
        self._seq += 1
        ev = Event(fire_us, self._seq, kind, fn)
        heapq.heappush(self._heap, ev)
        self._live[self._seq] = ev
        return self._seq

    def schedule_in(self, delay_us: int, kind: EventKind, fn: Callable[[], None] | None = None) -> int:
        return self.schedule(self.now + delay_us, kind, fn)

    def cancel(self, event_id: int) -> bool:
        ev = self._live.pop(event_id, None)
        if ev is None:
            return False
        ev.cancelled = True
        return True

    def _fire(self, ev: Event) -> None:
        self._live.pop(ev.seq, None)
        self.now = ev.fire_us
        self.fired_count += 1
        if self.record_events:
            self.event_log.append((ev.fire_us, ev.kind.value, ev.seq))
        if ev.fn is not None:
            ev.fn()

    def advance_until(self, deadline_us: int, collect: bool = True) -> list[Event]:
        """Fire every event due at or before ``deadline_us``; clock ends there."""
        if deadline_us < self.now:
            raise SchedulingError(f"deadline {deadline_us} us is in the past (now {self.now} us)")
        fired: list[Event] = []
        heap = self._heap
        while heap and heap[0].fire_us <= deadline_us:
            ev = heapq.heappop(heap)
            if ev.cancelled:
                continue
            self._fire(ev)
            if collect:
                fired.append(ev)
        self.now = deadline_us
        return fired

    def run_until(self, pred: Callable[[], bool], max_events: int = 10_000_000) -> None:
        """Fire events in order until ``pred()`` is true.

        Raises DeadlockError if the queue drains first: a waiting operation
        with nothing scheduled to unblock it is a simulator bug.
        """
        budget = max_events
        while not pred():
            ev = self._pop_live()
            if ev is None:
                raise DeadlockError("event queue drained while waiting on a condition")
            self._fire(ev)
            budget -= 1
            if budget <= 0:
                raise DeadlockError(f"no progress after {max_events} events")

    def _pop_live(self) -> Event | None:
        while self._heap:
            ev = heapq.heappop(self._heap)
            if not ev.cancelled:
                return ev
        return None

    def step(self) -> Event | None:
        """Fire the single next event, if any."""
        ev = self._pop_live()
        if ev is not None:
            self._fire(ev)
        return ev

    def drain(self, max_events: int = 10_000_000) -> int:
        """Fire everything left in the queue; returns the number fired."""
        n = 0
        while True:
            ev = self._pop_live()
            if ev is None:
                return n
            self._fire(ev)
            n += 1
            if n > max_events:
                raise DeadlockError(f"queue did not drain within {max_events} events")

    @property
    def pending(self) -> int:
        return len(self._live)
