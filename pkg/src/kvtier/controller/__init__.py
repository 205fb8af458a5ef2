"""Control plane: token pool, manager and per-instance workers."""

from .manager import ControlClient, Manager
from .pool import OutOfOrderEvent, PoolEntry, TokenPool, UnknownInstance, route
from .worker import Worker

__all__ = ["ControlClient", "Manager", "OutOfOrderEvent", "PoolEntry", "TokenPool", "UnknownInstance", "Worker",
           "route"]
