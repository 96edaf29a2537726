"""Discrete-event core: integer virtual clock, ordered event queue, seeded streams."""

from __future__ import annotations

import enum
import heapq
import itertools
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class EventKind(enum.Enum):
    REQUEST_ARRIVAL = "RequestArrival"
    PREFILL_COMPLETE = "PrefillComplete"
    TRANSFER_COMPLETE = "TransferComplete"
    DECODE_ITERATION = "DecodeIteration"
    INSTANCE_READY = "InstanceReady"
    INSTANCE_TERMINATED = "InstanceTerminated"
    SCALER_TICK = "ScalerTick"
    METRICS_TICK = "MetricsTick"


@dataclass(order=True)
class SimEvent:
    time: int
    sequence: int
    kind: EventKind = field(compare=False)
    payload: Any = field(default=None, compare=False)


class SchedulingError(RuntimeError):
    """An event was scheduled before the current clock."""


Handler = Callable[[SimEvent], None]


class Engine:
    """Single-threaded event loop over integral milliseconds.

    Ties at equal time are broken by the order in which events were
    scheduled, so dispatch order is a total order on (time, sequence).
    """

    def __init__(self) -> None:
        self.now = 0
        self.dispatched = 0
        self._queue: list[SimEvent] = []
        self._sequence = itertools.count()
        self._handlers: dict[EventKind, Handler] = {}
        self._observers: list[Handler] = []

    def on(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def observe(self, hook: Handler) -> None:
        """Register a hook called after every dispatch (debug invariants)."""
        self._observers.append(hook)

    def schedule(self, time: int, kind: EventKind, payload: Any = None) -> SimEvent:
        if not isinstance(time, (int, np.integer)):
            raise TypeError(f"event time must be integral ms, got {time!r}")
        if time < self.now:
            raise SchedulingError(
                f"cannot schedule {kind.value} at t={time} ms: clock is at {self.now} ms"
            )
        event = SimEvent(int(time), next(self._sequence), kind, payload)
        heapq.heappush(self._queue, event)
        return event

    def schedule_in(self, delay: int, kind: EventKind, payload: Any = None) -> SimEvent:
        return self.schedule(self.now + delay, kind, payload)

    def peek_time(self) -> int | None:
        return self._queue[0].time if self._queue else None

    def __len__(self) -> int:
        return len(self._queue)

    def run_until(self, end_time: int) -> None:
        """Dispatch every event with time <= end_time, then set the clock to end_time."""
        if end_time < self.now:
            raise SchedulingError(f"run_until({end_time}) is before clock {self.now}")
        queue = self._queue
        while queue and queue[0].time <= end_time:
            event = heapq.heappop(queue)
            self.now = event.time
            handler = self._handlers.get(event.kind)
            if handler is not None:
                handler(event)
            self.dispatched += 1
            for hook in self._observers:
                hook(event)
        self.now = end_time


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer.

    Streams are keyed by (seed, crc32(name)), so adding a consumer never
    perturbs the draws of another.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream_id(name)])
