"""Discrete-event engine: virtual clock, ordered event queue and the run loop.

Events at the same instant are handled in insertion order, so a run is fully
determined by its inputs and seed.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, TextIO

logger = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


class EventKind(str, Enum):
    REQUEST_ARRIVAL = "request_arrival"
    ITERATION_COMPLETE = "iteration_complete"
    SCALE_OP_COMPLETE = "scale_op_complete"
    KEEP_ALIVE_CHECK = "keep_alive_check"
    COLD_START_COMPLETE = "cold_start_complete"


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(default=None, compare=False)
    subject_id: str = field(default="", compare=False)

    def to_record(self) -> Dict[str, Any]:
        return {
            "time": self.time,
            "seq": self.seq,
            "kind": self.kind.value,
            "subject": self.subject_id,
        }


@dataclass
class RunReport:
    processed: int
    clock: float
    pending: int
    log: List[Dict[str, Any]]


Handler = Callable[[Event], None]


class Engine:
    def __init__(self, event_log: Optional[TextIO] = None, keep_log: bool = True) -> None:
        self.now = 0.0
        self._queue: List[Event] = []
        self._seq = itertools.count()
        self._handlers: Dict[EventKind, Handler] = {}
        self._event_log = event_log
        self._keep_log = keep_log
        self.log: List[Dict[str, Any]] = []
        self.processed = 0

    def on(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def next_seq(self) -> int:
        return next(self._seq)

    def schedule(self, event: Event) -> Event:
        if event.time < self.now:
            raise SimulationError(
                f"event {event.kind.value} subject={event.subject_id} at t={event.time} is before clock t={self.now}"
            )
        heapq.heappush(self._queue, event)
        return event

    def post(self, time: float, kind: EventKind, payload: Any = None, subject_id: str = "") -> Event:
        return self.schedule(Event(time=float(time), seq=self.next_seq(), kind=kind, payload=payload, subject_id=subject_id))

    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[float]:
        return self._queue[0].time if self._queue else None

    def _record(self, event: Event) -> None:
        record = event.to_record()
        if self._keep_log:
            self.log.append(record)
        if self._event_log is not None:
            self._event_log.write(json.dumps(record, separators=(",", ":")) + "\n")

    def step(self) -> Event:
        event = heapq.heappop(self._queue)
        if event.time < self.now:
            raise SimulationError(f"clock would move backwards: {event.time} < {self.now}")
        self.now = event.time
        self.processed += 1
        self._record(event)
        handler = self._handlers.get(event.kind)
        if handler is None:
            logger.debug("no handler kind=%s subject=%s", event.kind.value, event.subject_id)
        else:
            handler(event)
        return event

    def run_until(self, end: float = math.inf) -> RunReport:
        while self._queue and self._queue[0].time <= end:
            self.step()
        if math.isfinite(end) and end > self.now:
            self.now = end
        return RunReport(processed=self.processed, clock=self.now, pending=len(self._queue), log=self.log)
