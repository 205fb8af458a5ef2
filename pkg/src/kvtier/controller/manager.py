"""Central manager: token pool, lookups and command dispatch.

Wire surface (all on one endpoint):

* ``EVENT`` from workers: ``{"type": "register", ...}`` or
  ``{"type": "events", "instance": id, "events": [...]}``.
* ``LOOKUP`` with ``{"verb": "lookup", "tokens": [...]}``,
  ``{"verb": "query_ip", "instances": [...]}`` or ``{"verb": "instances"}``.
* ``MOVE``, ``CLEAR``, ``PIN``, ``COMPRESS`` with token lists; the manager
  turns tokens into chunk keys and forwards per-chunk requests to the
  addressed worker's endpoint.
"""

from __future__ import annotations

import logging
import threading

from ..tokens import ChunkKey, chunk_keys
from ..transfer.client import WireClient
from ..transfer.protocol import Message, Op, RemoteError
from ..transfer.server import WireServer
from .pool import OutOfOrderEvent, TokenPool, UnknownInstance

logger = logging.getLogger(__name__)


class Manager:
    """Token-pool owner and command router.

    Args:
        endpoint: listen address (``"127.0.0.1:0"`` picks a free port).
    """

    def __init__(self, endpoint: str = "127.0.0.1:0"):
        self.pool = TokenPool()
        self._clients: dict[str, WireClient] = {}
        self._client_lock = threading.Lock()
        self._inst_locks: dict[str, threading.Lock] = {}
        self.server = WireServer(endpoint, {
            Op.EVENT: self._on_event, Op.LOOKUP: self._on_lookup, Op.MOVE: self._on_move,
            Op.CLEAR: self._on_clear, Op.PIN: self._on_pin, Op.COMPRESS: self._on_compress,
        }, {})
        self.endpoint = self.server.endpoint

    def close(self) -> None:
        with self._client_lock:
            for c in self._clients.values():
                c.close()
            self._clients.clear()
        self.server.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- worker side ----------------------------------------------------------

    def _lock_for(self, instance_id: str) -> threading.Lock:
        with self._client_lock:
            return self._inst_locks.setdefault(instance_id, threading.Lock())

    def register_event(self, instance_id: str, event: str, keys, tier: str, token_count: int = 0) -> None:
        """Apply store/evict events for ``keys`` on ``instance_id`` (unsequenced)."""
        with self._lock_for(instance_id):
            for k in keys:
                self.pool.apply(instance_id, event, k, tier, token_count)

    def _on_event(self, msg: Message) -> Message:
        m = msg.meta
        inst = m["instance"]
        with self._lock_for(inst):
            if m.get("type") == "register":
                self.pool.register_instance(inst, m["endpoint"], chunk_size=int(m.get("chunk_size", 256)),
                                            model_tag=m.get("model_tag", ""), snapshot=m.get("snapshot"))
                with self._client_lock:
                    old = self._clients.pop(inst, None)
                if old is not None:
                    old.close()
                return Message(Op.OK, 0, {"registered": inst})
            try:
                for ev in m.get("events", []):
                    self.pool.apply(inst, ev["kind"], ChunkKey.from_dict(ev["key"]), ev["tier"],
                                    int(ev.get("token_count", 0)), int(ev["seq"]))
            except UnknownInstance:
                raise RemoteError("unknown_instance", inst) from None
            except OutOfOrderEvent as e:
                raise RemoteError("out_of_order", str(e)) from None
        return Message(Op.OK, 0, {"applied": len(m.get("events", []))})

    # -- queries ----------------------------------------------------------------

    def lookup(self, tokens) -> dict[str, int]:
        return self.pool.lookup(tokens)

    def query_ip(self, instance_ids) -> dict[str, str]:
        return self.pool.query_ip(instance_ids)

    def instances(self) -> dict[str, str]:
        return self.pool.instances()

    def _on_lookup(self, msg: Message) -> Message:
        verb = msg.meta.get("verb", "lookup")
        try:
            if verb == "lookup":
                return Message(Op.OK, 0, {"hits": self.lookup(msg.meta["tokens"])})
            if verb == "query_ip":
                return Message(Op.OK, 0, {"endpoints": self.query_ip(msg.meta.get("instances", []))})
            if verb == "instances":
                return Message(Op.OK, 0, {"instances": self.instances()})
        except UnknownInstance as e:
            raise RemoteError("unknown_instance", str(e.args[0])) from None
        raise RemoteError("bad_verb", str(verb))

    # -- commands ---------------------------------------------------------------

    def _worker(self, instance_id: str) -> WireClient:
        endpoint = self.pool.info(instance_id).endpoint
        with self._client_lock:
            c = self._clients.get(instance_id)
            if c is None or c.endpoint != endpoint:
                c = self._clients[instance_id] = WireClient(endpoint)
            return c

    def _keys(self, instance_id: str, tokens) -> list[ChunkKey]:
        info = self.pool.info(instance_id)
        return chunk_keys(tokens, info.chunk_size, info.model_tag)

    def move(self, source: str, destination: str, tokens) -> dict:
        """Relocate the cached prefix of ``tokens`` from ``source`` to ``destination``."""
        keys = self._keys(source, tokens)
        dst = self.pool.info(destination).endpoint
        reply = self._worker(source).call(Op.MOVE, {"keys": [k.to_dict() for k in keys], "destination": dst})
        return dict(reply.meta)

    def clear(self, tokens, instance_id: str, storage_device: str) -> dict:
        keys = self._keys(instance_id, tokens)
        try:
            reply = self._worker(instance_id).call(Op.CLEAR, {"digests": [k.hex for k in keys],
                                                              "tier": storage_device})
        except RemoteError as e:
            return {"results": [e.code] * len(keys), "removed": 0, "refused": 0, "missing": 0, "cleared": 0}
        out = dict(reply.meta)
        out["cleared"] = out["removed"]
        return out

    def pin(self, tokens, instance_id: str, storage_device: str, on: bool = True) -> dict:
        keys = self._keys(instance_id, tokens)
        w = self._worker(instance_id)
        futures = [w.request(Op.PIN, {"digest": k.hex, "tier": storage_device, "on": on}) for k in keys]
        results = []
        for k, f in zip(keys, futures):
            try:
                f.result(60)
                results.append("ok")
                self.pool.set_flag(instance_id, k, storage_device, pinned=on)
            except RemoteError as e:
                results.append(e.code)
        return {"results": results, "pinned": results.count("ok")}

    def compress(self, tokens, instance_id: str, storage_device: str, compression_method: str) -> dict:
        keys = self._keys(instance_id, tokens)
        w = self._worker(instance_id)
        futures = [w.request(Op.COMPRESS, {"digest": k.hex, "tier": storage_device, "codec": compression_method})
                   for k in keys]
        results, sizes = [], []
        for k, f in zip(keys, futures):
            try:
                sizes.append(f.result(60).meta["size"])
                results.append("ok")
                self.pool.set_flag(instance_id, k, storage_device, codec=compression_method)
            except RemoteError as e:
                results.append(e.code)
                sizes.append(None)
        return {"results": results, "sizes": sizes, "compressed": results.count("ok")}

    def _dispatch(self, fn, *args) -> Message:
        try:
            return Message(Op.OK, 0, fn(*args))
        except UnknownInstance as e:
            raise RemoteError("unknown_instance", str(e.args[0])) from None

    def _on_move(self, msg: Message) -> Message:
        m = msg.meta
        return self._dispatch(self.move, m["source"], m["destination"], m["tokens"])

    def _on_clear(self, msg: Message) -> Message:
        m = msg.meta
        return self._dispatch(self.clear, m["tokens"], m["instance"], m["tier"])

    def _on_pin(self, msg: Message) -> Message:
        m = msg.meta
        return self._dispatch(self.pin, m["tokens"], m["instance"], m["tier"], bool(m.get("on", True)))

    def _on_compress(self, msg: Message) -> Message:
        m = msg.meta
        return self._dispatch(self.compress, m["tokens"], m["instance"], m["tier"], m["method"])


class ControlClient:
    """Client for a manager's admin surface (what ``kvctl`` uses)."""

    def __init__(self, endpoint, timeout: float = 60):
        self.client = WireClient(endpoint)
        self.timeout = timeout

    def close(self) -> None:
        self.client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, op: Op, meta: dict) -> dict:
        return dict(self.client.call(op, meta, timeout=self.timeout).meta)

    def lookup(self, tokens) -> dict[str, int]:
        return self._call(Op.LOOKUP, {"verb": "lookup", "tokens": [int(t) for t in tokens]})["hits"]

    def query_ip(self, instance_ids) -> dict[str, str]:
        return self._call(Op.LOOKUP, {"verb": "query_ip", "instances": list(instance_ids)})["endpoints"]

    def instances(self) -> dict[str, str]:
        return self._call(Op.LOOKUP, {"verb": "instances"})["instances"]

    def move(self, source, destination, tokens) -> dict:
        return self._call(Op.MOVE, {"source": source, "destination": destination, "tokens": [int(t) for t in tokens]})

    def clear(self, tokens, instance_id, storage_device) -> dict:
        return self._call(Op.CLEAR, {"tokens": [int(t) for t in tokens], "instance": instance_id,
                                     "tier": storage_device})

    def pin(self, tokens, instance_id, storage_device, on: bool = True) -> dict:
        return self._call(Op.PIN, {"tokens": [int(t) for t in tokens], "instance": instance_id,
                                   "tier": storage_device, "on": on})

    def compress(self, tokens, instance_id, storage_device, compression_method) -> dict:
        return self._call(Op.COMPRESS, {"tokens": [int(t) for t in tokens], "instance": instance_id,
                                        "tier": storage_device, "method": compression_method})
