"""Per-instance worker: reports cache events and executes dispatched commands.

The worker serves its instance's storage engine on a wire endpoint (which
is the address the manager hands out) and connects outbound to the manager.
Every store/evict event from the storage engine is queued and forwarded in
order; :meth:`Worker.flush` returns once the manager has applied everything
emitted so far.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque

from ..storage.backends import NotFound
from ..storage.engine import StorageEngine, StoreEvent
from ..tokens import ChunkKey
from ..transfer.client import WireClient
from ..transfer.pd import send_chunks
from ..transfer.protocol import Message, Op, RemoteError
from ..transfer.server import WireServer, serve

logger = logging.getLogger(__name__)


class Worker:
    """Control-plane agent for one instance.

    Args:
        instance_id: name reported to the manager.
        store: the instance's storage engine.
        manager: manager endpoint (``host:port``).
        endpoint: where to serve this instance's store.
        batch: most events per EVENT message.
    """

    def __init__(self, instance_id: str, store: StorageEngine, manager, *, endpoint: str = "127.0.0.1:0",
                 batch: int = 256):
        self.instance_id = instance_id
        self.store = store
        self.manager_endpoint = manager
        self.batch = batch
        self.server: WireServer = serve(endpoint, store, handlers={Op.MOVE: self._move})
        self.endpoint = self.server.endpoint
        self._queue: deque = deque()
        self._cond = threading.Condition()
        self._seq = 0
        self._acked = 0
        self._closed = False
        self._client: WireClient | None = None
        self.reconnects = 0
        with store._lock:
            store.listeners.append(self._on_event)
            self._register()
        self._thread = threading.Thread(target=self._send_loop, daemon=True, name=f"worker-{instance_id}")
        self._thread.start()

    # -- registration and events ----------------------------------------------

    def _snapshot(self) -> list[dict]:
        out = []
        with self.store._lock:
            for e in self.store._index.values():
                tiers = sorted(str(t) for t in e.tiers)
                if tiers:
                    out.append({"key": e.key.to_dict(), "token_count": e.token_count, "tiers": tiers,
                                "pinned": sorted(str(t) for t, c in e.copies.items() if c.pinned and c.committed)})
        return out

    def _register(self) -> None:
        """(Re)register with a full snapshot; resets the event sequence."""
        if self._client is not None:
            self._client.close()
        self._client = WireClient(self.manager_endpoint)
        with self._cond:
            self._queue.clear()
            self._seq = 0
            self._acked = 0
            snapshot = self._snapshot()
        self._client.call(Op.EVENT, {
            "type": "register", "instance": self.instance_id, "endpoint": self.endpoint,
            "chunk_size": self.store.chunk_size, "model_tag": self.store.model.model_tag, "snapshot": snapshot})

    def _on_event(self, ev: StoreEvent) -> None:
        if ev.tier.kind == "remote":
            return
        with self._cond:
            self._seq += 1
            self._queue.append({"seq": self._seq, "kind": ev.kind, "key": ev.key.to_dict(), "tier": str(ev.tier),
                                "token_count": ev.token_count})
            self._cond.notify_all()

    def _send_loop(self) -> None:
        while True:
            with self._cond:
                while not self._queue and not self._closed:
                    self._cond.wait()
                if self._closed and not self._queue:
                    return
                events = [self._queue[i] for i in range(min(self.batch, len(self._queue)))]
            try:
                self._client.call(Op.EVENT, {"type": "events", "instance": self.instance_id, "events": events})
            except (ConnectionError, OSError, RemoteError) as e:
                if self._closed:
                    return
                logger.warning("worker %s lost the manager (%s); re-registering", self.instance_id, e)
                self._reconnect()
                continue
            with self._cond:
                for _ in events:
                    if self._queue and self._queue[0]["seq"] <= events[-1]["seq"]:
                        self._queue.popleft()
                self._acked = max(self._acked, events[-1]["seq"])
                self._cond.notify_all()

    def _reconnect(self) -> None:
        delay = 0.05
        while not self._closed:
            try:
                with self.store._lock:
                    self._register()
                self.reconnects += 1
                return
            except (ConnectionError, OSError, RemoteError):
                time.sleep(delay)
                delay = min(delay * 2, 1.0)

    def flush(self, timeout: float = 30) -> None:
        """Block until the manager has applied every event emitted so far."""
        deadline = time.monotonic() + timeout
        with self._cond:
            target = self._seq
            while self._acked < target and self._queue:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError(f"worker {self.instance_id}: events still in flight")
                self._cond.wait(left)

    def close(self) -> None:
        try:
            self.flush(5)
        except TimeoutError:
            pass
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        self._thread.join(timeout=5)
        with self.store._lock:
            if self._on_event in self.store.listeners:
                self.store.listeners.remove(self._on_event)
        if self._client is not None:
            self._client.close()
        self.server.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- commands ----------------------------------------------------------------

    def _move(self, msg: Message) -> Message:
        """Copy a key prefix to ``destination`` and drop it here once acknowledged."""
        keys = [ChunkKey.from_dict(k) for k in msg.meta["keys"]]
        chunks = []
        for k in keys:
            try:
                chunks.append(self.store.get(k, self.store.local_tiers))
            except NotFound:
                break
        if not chunks:
            return Message(Op.OK, 0, {"moved_chunks": 0, "moved_tokens": 0, "status": []})
        with WireClient(msg.meta["destination"]) as dst:
            status = send_chunks(dst, chunks)
        moved = 0
        tokens = 0
        for c, s in zip(chunks, status):
            if s not in ("ok", "exists"):
                break
            for t in self.store.local_tiers:
                self.store.clear_report([c.key], t)
            moved += 1
            tokens += c.token_count
        return Message(Op.OK, 0, {"moved_chunks": moved, "moved_tokens": tokens, "status": status})
