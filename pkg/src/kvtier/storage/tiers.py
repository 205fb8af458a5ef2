from __future__ import annotations

import time
from dataclasses import dataclass

_RANK = {"ram": 0, "disk": 1, "remote": 2}


@dataclass(frozen=True, order=False)
class TierId:
    kind: str
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in _RANK:
            raise ValueError(f"unknown tier kind {self.kind!r}")
        if (self.kind == "remote") != bool(self.name):
            raise ValueError("only remote tiers carry a name")

    @property
    def rank(self) -> int:
        return _RANK[self.kind]

    def __lt__(self, other: TierId) -> bool:
        return (self.rank, self.name) < (other.rank, other.name)

    def __str__(self) -> str:
        return f"remote:{self.name}" if self.kind == "remote" else self.kind

    @classmethod
    def parse(cls, s: str | TierId) -> TierId:
        if isinstance(s, TierId):
            return s
        if s.startswith("remote:"):
            return cls("remote", s.split(":", 1)[1])
        return cls(s)


RAM = TierId("ram")
DISK = TierId("disk")


def Remote(name: str) -> TierId:
    return TierId("remote", name)


@dataclass(frozen=True)
class DeviceModel:
    """Latency/bandwidth model for a tier.

    Used to pace I/O in wall-clock runs and to account it in virtual-time runs.
    ``bandwidth`` is bytes per second; ``None`` means unthrottled.
    """

    bandwidth: float | None = None
    latency: float = 0.0

    def seconds(self, nbytes: int) -> float:
        t = self.latency
        if self.bandwidth:
            t += nbytes / self.bandwidth
        return t

    def pace(self, nbytes: int, started: float) -> float:
        """Sleep out whatever remains of the modelled duration; return the modelled time."""
        t = self.seconds(nbytes)
        left = t - (time.perf_counter() - started)
        if left > 0:
            time.sleep(left)
        return t
