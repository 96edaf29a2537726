import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdscale.engine import Engine, EventKind, SchedulingError, rng_stream


def recording_engine():
    eng = Engine()
    seen = []
    for kind in EventKind:
        eng.on(kind, lambda ev: seen.append((eng.now, ev.payload)))
    return eng, seen


def test_same_time_event_precedes_later_one():
    eng, seen = recording_engine()
    eng.schedule(1, EventKind.METRICS_TICK, "later")
    eng.schedule(0, EventKind.METRICS_TICK, "now")
    eng.run_until(5)
    assert [p for _, p in seen] == ["now", "later"]


def test_ties_dispatch_in_schedule_order():
    eng, seen = recording_engine()
    eng.schedule(500, EventKind.SCALER_TICK, "A")
    eng.schedule(500, EventKind.METRICS_TICK, "B")
    eng.run_until(500)
    assert [p for _, p in seen] == ["A", "B"]


def test_scheduling_in_the_past_faults():
    eng, _ = recording_engine()
    eng.run_until(10)
    with pytest.raises(SchedulingError):
        eng.schedule(9, EventKind.METRICS_TICK)


def test_non_integral_time_rejected():
    with pytest.raises(TypeError):
        Engine().schedule(1.5, EventKind.METRICS_TICK)


def test_empty_run_advances_clock():
    eng, seen = recording_engine()
    eng.run_until(1000)
    assert eng.now == 1000 and seen == [] and eng.dispatched == 0


def test_run_until_stops_at_horizon():
    eng, seen = recording_engine()
    for t in (10, 20, 30):
        eng.schedule(t, EventKind.METRICS_TICK, t)
    eng.run_until(25)
    assert [p for _, p in seen] == [10, 20]
    assert eng.now == 25 and len(eng) == 1


def test_cascade_within_horizon_dispatches():
    # hand trace: t=0 schedules t=5, which schedules t=12 (in) and t=40 (out)
    eng = Engine()
    seen = []

    def handler(ev):
        seen.append(eng.now)
        if ev.payload == 0:
            eng.schedule_in(5, EventKind.METRICS_TICK, 1)
        elif ev.payload == 1:
            eng.schedule_in(7, EventKind.METRICS_TICK, 2)
            eng.schedule_in(35, EventKind.METRICS_TICK, 3)

    eng.on(EventKind.METRICS_TICK, handler)
    eng.schedule(0, EventKind.METRICS_TICK, 0)
    eng.run_until(20)
    assert seen == [0, 5, 12]


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=50))
def test_dispatch_order_is_sorted_and_stable(times):
    eng, seen = recording_engine()
    for k, t in enumerate(times):
        eng.schedule(t, EventKind.METRICS_TICK, k)
    eng.run_until(1000)
    expected = sorted(range(len(times)), key=lambda k: (times[k], k))
    assert [p for _, p in seen] == expected


def test_named_streams_are_independent_and_reproducible():
    a1 = rng_stream(7, "arrivals").random(5)
    a2 = rng_stream(7, "arrivals").random(5)
    b = rng_stream(7, "lengths").random(5)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
