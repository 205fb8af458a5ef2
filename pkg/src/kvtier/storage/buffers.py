"""Reference-counted buffers shared by concurrent writes of the same bytes."""

from __future__ import annotations

import threading


class SharedBuffer:
    """A byte region written to several destinations without copying.

    The count starts at the number of pending writers; each writer calls
    :meth:`release` once. The region is dropped when the count reaches zero.
    """

    __slots__ = ("_data", "_count", "_pool", "_lock", "_on_drop", "nbytes")

    def __init__(self, data, count: int, pool: BufferPool | None = None):
        if count < 0:
            raise ValueError("count must be >= 0")
        self._data = data
        self._count = count
        self._pool = pool
        self._lock = threading.Lock()
        self._on_drop = []
        self.nbytes = getattr(data, "nbytes", None) or len(data)
        if pool is not None:
            pool._register(self)
        if count == 0:
            self._drop()

    @property
    def count(self) -> int:
        return self._count

    @property
    def data(self):
        if self._data is None:
            raise RuntimeError("buffer already released")
        return self._data

    @property
    def released(self) -> bool:
        return self._data is None

    def retain(self, n: int = 1) -> None:
        with self._lock:
            if self._data is None:
                raise RuntimeError("buffer already released")
            self._count += n

    def release(self) -> None:
        with self._lock:
            if self._count <= 0:
                raise RuntimeError("release() without a matching writer")
            self._count -= 1
            last = self._count == 0
        if last:
            self._drop()

    def on_drop(self, fn) -> None:
        """Call ``fn()`` once the region is released (immediately if it already was)."""
        with self._lock:
            if self._data is not None:
                self._on_drop.append(fn)
                return
        fn()

    def _drop(self) -> None:
        self._data = None
        if self._pool is not None:
            self._pool._unregister(self)
        for fn in self._on_drop:
            fn()
        self._on_drop = []


class BufferPool:
    """Accounting for live shared buffers (occupancy and outstanding counts)."""

    def __init__(self):
        self._live: dict[int, SharedBuffer] = {}
        self._lock = threading.Lock()
        self.peak_bytes = 0

    def share(self, data, count: int) -> SharedBuffer:
        return SharedBuffer(data, count, self)

    def _register(self, buf: SharedBuffer) -> None:
        with self._lock:
            self._live[id(buf)] = buf
            self.peak_bytes = max(self.peak_bytes, self.occupancy_bytes)

    def _unregister(self, buf: SharedBuffer) -> None:
        with self._lock:
            self._live.pop(id(buf), None)

    @property
    def occupancy(self) -> int:
        return len(self._live)

    @property
    def occupancy_bytes(self) -> int:
        return sum(b.nbytes for b in self._live.values())

    def outstanding(self) -> int:
        """Sum of reference counts over live buffers."""
        with self._lock:
            return sum(b.count for b in self._live.values())
