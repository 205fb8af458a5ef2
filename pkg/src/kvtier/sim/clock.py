"""Virtual and wall clocks for the simulated engine."""

from __future__ import annotations

import time
from concurrent.futures import Future
from dataclasses import dataclass


@dataclass
class Ticket:
    """Completion handle for one background operation.

    In virtual time ``ready_at`` is when the work finishes; in wall time
    ``future`` is waited on.
    """

    issued_at: float
    ready_at: float
    future: Future | None = None
    label: str = ""
    done: bool = False

    def result(self):
        return self.future.result() if self.future is not None else None


class VirtualClock:
    """Discrete time that only moves when told to.

    Devices are modelled as FIFO servers: :meth:`schedule` queues work of a
    given duration behind whatever the device is already doing.
    """

    virtual = True

    def __init__(self, start: float = 0.0):
        self._now = start
        self._busy: dict[str, float] = {}

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("time cannot go backwards")
        self._now += seconds

    def advance_to(self, t: float) -> None:
        if t > self._now:
            self._now = t

    def schedule(self, device: str, seconds: float, not_before: float | None = None) -> float:
        start = max(self._now, self._busy.get(device, 0.0), not_before or 0.0)
        self._busy[device] = start + seconds
        return start + seconds

    def wait(self, ticket: Ticket):
        out = ticket.result()
        self.advance_to(ticket.ready_at)
        ticket.done = True
        return out

    def busy_until(self, device: str) -> float:
        return self._busy.get(device, 0.0)


class WallClock:
    """Real time; compute is a sleep and background work runs on threads."""

    virtual = False

    def __init__(self):
        self._t0 = time.perf_counter()

    def now(self) -> float:
        return time.perf_counter() - self._t0

    def advance(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def advance_to(self, t: float) -> None:
        self.advance(t - self.now())

    def schedule(self, device: str, seconds: float, not_before: float | None = None) -> float:
        return self.now() + seconds

    def wait(self, ticket: Ticket):
        out = ticket.result()
        ticket.done = True
        return out


Clock = VirtualClock | WallClock


def make_clock(mode: str) -> Clock:
    if mode == "virtual":
        return VirtualClock()
    if mode == "wall":
        return WallClock()
    raise ValueError(f"unknown clock mode {mode!r}")
