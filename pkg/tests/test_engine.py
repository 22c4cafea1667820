"""Event loop ordering, cancellation, and determinism."""

import pytest

from dualkv import DeadlockError, EventKind, SchedulingError, SimEngine


def test_events_fire_in_time_order():
    e = SimEngine()
    log = []
    e.schedule(30, EventKind.OP_ARRIVAL, lambda: log.append("c"))
    e.schedule(10, EventKind.OP_ARRIVAL, lambda: log.append("a"))
    e.schedule(20, EventKind.OP_ARRIVAL, lambda: log.append("b"))
    e.drain()
    assert log == ["a", "b", "c"]
    assert e.now == 30


def test_same_time_events_fire_in_schedule_order():
    e = SimEngine()
    log = []
    for tag in ("first", "second", "third"):
        e.schedule(5, EventKind.OP_ARRIVAL, lambda t=tag: log.append(t))
    e.drain()
    assert log == ["first", "second", "third"]


def test_schedule_in_is_relative_to_now():
    e = SimEngine()
    seen = []
    e.schedule(100, EventKind.OP_ARRIVAL, lambda: e.schedule_in(50, EventKind.OP_ARRIVAL,
                                                                lambda: seen.append(e.now)))
    e.drain()
    assert seen == [150]


def test_scheduling_in_the_past_raises():
    e = SimEngine()
    e.schedule(10, EventKind.OP_ARRIVAL, None)
    e.drain()
    with pytest.raises(SchedulingError):
        e.schedule(9, EventKind.OP_ARRIVAL, None)


def test_cancel_prevents_firing():
    e = SimEngine()
    log = []
    eid = e.schedule(10, EventKind.OP_ARRIVAL, lambda: log.append("cancelled"))
    e.schedule(10, EventKind.OP_ARRIVAL, lambda: log.append("kept"))
    assert e.cancel(eid)
    assert not e.cancel(eid)  # double cancel reports failure
    e.drain()
    assert log == ["kept"]


def test_advance_until_stops_at_deadline():
    e = SimEngine()
    log = []
    e.schedule(10, EventKind.OP_ARRIVAL, lambda: log.append(10))
    e.schedule(20, EventKind.OP_ARRIVAL, lambda: log.append(20))
    e.advance_until(15)
    assert log == [10]
    assert e.now == 15
    e.drain()
    assert log == [10, 20]


def test_run_until_raises_on_exhausted_queue():
    e = SimEngine()
    e.schedule(1, EventKind.OP_ARRIVAL, None)
    with pytest.raises(DeadlockError):
        e.run_until(lambda: False)


def test_run_until_stops_when_predicate_turns_true():
    e = SimEngine()
    box = []
    e.schedule(10, EventKind.OP_ARRIVAL, lambda: box.append(1))
    e.schedule(20, EventKind.OP_ARRIVAL, lambda: box.append(2))
    e.run_until(lambda: bool(box))
    assert box == [1]
    assert e.pending == 1


def test_identical_schedules_replay_identically():
    def run():
        e = SimEngine(record_events=True)
        for i in range(50):
            e.schedule((i * 7) % 23 + 1, EventKind.OP_ARRIVAL, None)
        e.drain()
        return list(e.event_log)

    assert run() == run()
