import io
import json

import pytest

from meshsim.simcore import Engine, EventKind, SimulationError


def test_events_run_in_time_then_insertion_order():
    engine = Engine()
    seen = []
    engine.on(EventKind.REQUEST_ARRIVAL, lambda e: seen.append(e.payload))
    engine.post(2.0, EventKind.REQUEST_ARRIVAL, "late")
    engine.post(1.0, EventKind.REQUEST_ARRIVAL, "first")
    engine.post(1.0, EventKind.REQUEST_ARRIVAL, "second")
    engine.run_until()
    assert seen == ["first", "second", "late"]
    assert engine.now == 2.0


def test_handlers_may_schedule_at_the_current_instant():
    engine = Engine()
    seen = []

    def arrival(event):
        seen.append(("arrival", event.time))
        engine.post(event.time, EventKind.ITERATION_COMPLETE)

    engine.on(EventKind.REQUEST_ARRIVAL, arrival)
    engine.on(EventKind.ITERATION_COMPLETE, lambda e: seen.append(("iteration", e.time)))
    engine.post(0.5, EventKind.REQUEST_ARRIVAL)
    engine.run_until()
    assert seen == [("arrival", 0.5), ("iteration", 0.5)]


def test_scheduling_in_the_past_is_an_error():
    engine = Engine()
    engine.post(5.0, EventKind.KEEP_ALIVE_CHECK)
    engine.run_until()
    with pytest.raises(SimulationError):
        engine.post(4.0, EventKind.KEEP_ALIVE_CHECK)


def test_run_until_on_empty_queue_advances_clock():
    engine = Engine()
    report = engine.run_until(10.0)
    assert report.processed == 0
    assert engine.now == 10.0


def test_run_until_leaves_later_events_pending():
    engine = Engine()
    for t in (1.0, 2.0, 3.0):
        engine.post(t, EventKind.REQUEST_ARRIVAL)
    report = engine.run_until(2.0)
    assert report.processed == 2
    assert report.pending == 1
    assert engine.peek_time() == 3.0


def test_unhandled_events_are_still_logged():
    sink = io.StringIO()
    engine = Engine(event_log=sink)
    engine.post(1.5, EventKind.SCALE_OP_COMPLETE, subject_id="op-3")
    engine.run_until()
    lines = sink.getvalue().splitlines()
    assert len(lines) == 1
    record = json.loads(lines[0])
    assert record == {"time": 1.5, "seq": 0, "kind": "scale_op_complete", "subject": "op-3"}
    assert engine.log == [record]
