"""Threaded wire server and the chunk-store request handlers."""

from __future__ import annotations

import logging
import socket
import threading
from typing import Callable

import numpy as np

from ..kv import KVChunk
from ..storage.backends import NotFound
from ..storage.codecs import UnknownCodec
from ..storage.tiers import TierId
from ..tokens import ChunkKey
from .client import drain, format_endpoint, parse_endpoint, recv_exact, send_buffers, tune
from .protocol import (
    HEADER, MAX_PAYLOAD, META_LEN, FrameError, Message, Op, RemoteError, check_header, err, parse_meta,
)

logger = logging.getLogger(__name__)

Handler = Callable[[Message], Message]
Sink = Callable[[dict, int], object]


class WireServer:
    """Accepts connections and dispatches each request to a handler by opcode.

    Requests on one connection are handled in order by that connection's
    thread; connections are served concurrently.

    Args:
        endpoint: ``"host:port"``; port 0 picks a free port.
        handlers: opcode -> ``fn(msg) -> reply``. The reply's request id is
            filled in by the server.
        sinks: opcode -> ``fn(meta, nbytes) -> buffer`` giving a destination for
            the request body so it is received in place. Raising
            :class:`RemoteError` rejects the request before the body is read.
        max_payload: largest accepted payload; bigger frames are drained and
            answered with ERR.
        max_connections: further connections are closed on accept.
    """

    def __init__(self, endpoint="127.0.0.1:0", handlers: dict[Op, Handler] | None = None,
                 sinks: dict[Op, Sink] | None = None, max_payload: int = MAX_PAYLOAD,
                 max_connections: int = 64):
        self.handlers: dict[Op, Handler] = dict(handlers or {})
        self.sinks: dict[Op, Sink] = dict(sinks or {})
        self.max_payload = max_payload
        self.max_connections = max_connections
        self._listener = socket.create_server(parse_endpoint(endpoint), reuse_port=False)
        self.endpoint = format_endpoint(self._listener.getsockname()[:2])
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._closed = False
        self.requests_served = 0
        self.errors_sent = 0
        self._accept = threading.Thread(target=self._accept_loop, daemon=True, name=f"wire-accept-{self.endpoint}")
        self._accept.start()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def connections(self) -> int:
        return len(self._conns)

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            with self._lock:
                if len(self._conns) >= self.max_connections:
                    sock.close()
                    continue
                self._conns.add(sock)
            tune(sock)
            threading.Thread(target=self._serve_conn, args=(sock,), daemon=True, name="wire-conn").start()

    def _reply(self, sock, lock, rid: int, msg: Message) -> None:
        msg.request_id = rid
        if msg.op == Op.ERR:
            self.errors_sent += 1
        with lock:
            send_buffers(sock, msg.buffers())

    def _serve_conn(self, sock: socket.socket) -> None:
        lock = threading.Lock()
        hb = bytearray(HEADER.size)
        try:
            while True:
                recv_exact(sock, memoryview(hb))
                try:
                    op, rid, n = check_header(hb, 0, self.max_payload)
                except FrameError as e:
                    if e.offset < 6:  # bad magic: the stream cannot be trusted
                        logger.info("closing connection: %s", e)
                        return
                    _, _, _, rid, n = HEADER.unpack(hb)
                    drain(sock, n)
                    code = "payload_too_large" if e.offset == 15 and n > self.max_payload else "bad_frame"
                    self._reply(sock, lock, rid, err(rid, code, e.reason))
                    continue
                self._handle(sock, lock, op, rid, n)
        except (EOFError, OSError):
            pass
        finally:
            with self._lock:
                self._conns.discard(sock)
            sock.close()

    def _handle(self, sock, lock, op: Op, rid: int, n: int) -> None:
        mb = bytearray(META_LEN.size)
        recv_exact(sock, memoryview(mb))
        (m,) = META_LEN.unpack(mb)
        if m > n - META_LEN.size:
            drain(sock, n - META_LEN.size)
            self._reply(sock, lock, rid, err(rid, "bad_frame", "meta length exceeds payload"))
            return
        raw = bytearray(m)
        recv_exact(sock, memoryview(raw))
        nbody = n - META_LEN.size - m
        try:
            meta, _ = parse_meta(bytes(mb) + bytes(raw))
        except FrameError as e:
            drain(sock, nbody)
            self._reply(sock, lock, rid, err(rid, "bad_meta", e.reason))
            return
        body = None
        sink = self.sinks.get(op)
        try:
            if sink is not None:
                body = sink(meta, nbody)
        except RemoteError as e:
            drain(sock, nbody)
            self._reply(sock, lock, rid, err(rid, e.code, e.detail))
            return
        if body is None:
            body = bytearray(nbody)
            recv_exact(sock, memoryview(body))
        else:
            view = memoryview(body).cast("B")
            if len(view) != nbody:
                drain(sock, nbody)
                self._reply(sock, lock, rid, err(rid, "bad_size", f"expected {len(view)} body bytes, got {nbody}"))
                return
            recv_exact(sock, view)
        handler = self.handlers.get(op)
        if handler is None:
            reply = err(rid, "unsupported", f"no handler for {op.name}")
        else:
            try:
                reply = handler(Message(op, rid, meta, body))
            except RemoteError as e:
                reply = err(rid, e.code, e.detail)
            except Exception as e:  # noqa: BLE001 - every request gets a reply
                logger.exception("handler for %s failed", op.name)
                reply = err(rid, type(e).__name__, str(e))
        self.requests_served += 1
        self._reply(sock, lock, rid, reply)

    def close(self) -> None:
        self._closed = True
        try:
            self._listener.shutdown(socket.SHUT_RDWR)  # wakes a blocked accept()
        except OSError:
            pass
        self._listener.close()
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._accept.join(timeout=5)


# -- chunk store service ----------------------------------------------------

def _key(d: dict) -> ChunkKey:
    if "key" in d:
        return ChunkKey.from_dict(d["key"])
    return ChunkKey(bytes.fromhex(d["digest"]), d.get("model_tag", ""), d.get("chunk_index", 0))


def _tier(store, meta: dict) -> list[TierId]:
    if meta.get("tier"):
        t = TierId.parse(meta["tier"])
        if t not in store.backends:
            raise RemoteError("unknown_tier", str(t))
        return [t]
    return store.local_tiers


def _put_status(result) -> str:
    statuses = list(result.status.values())
    if all(s == "exists" for s in statuses):
        return "exists"
    if all(s in ("ok", "exists") for s in statuses):
        return "ok"
    return next(s for s in statuses if s not in ("ok", "exists"))


class StoreService:
    """Request handlers exposing a :class:`StorageEngine` over the wire.

    PUT bodies are received straight into a fresh array that becomes the
    stored chunk's payload, so the server copies each byte once.
    """

    def __init__(self, store):
        self.store = store

    def handlers(self) -> dict[Op, Handler]:
        return {
            Op.PUT: self.put, Op.GET: self.get, Op.EXISTS: self.exists, Op.CLEAR: self.clear,
            Op.PIN: self.pin, Op.COMPRESS: self.compress,
        }

    def sinks(self) -> dict[Op, Sink]:
        return {Op.PUT: lambda meta, n: np.empty(n, dtype=np.uint8)}

    def put(self, msg: Message) -> Message:
        items = msg.meta["chunks"] if "chunks" in msg.meta else [dict(msg.meta, offset=0)]
        body = np.asarray(msg.body, dtype=np.uint8) if isinstance(msg.body, np.ndarray) \
            else np.frombuffer(msg.body, dtype=np.uint8)
        bpt = self.store.model.bytes_per_token_per_layer
        futures = []
        status: list[str | None] = []
        offset = 0
        for item in items:
            tc = int(item["token_count"])
            nbytes = self.store.model.chunk_bytes(tc)
            if offset + nbytes > body.size:
                raise RemoteError("bad_size", "body shorter than the chunks it describes")
            chunk = KVChunk(_key(item), tc, bpt, body[offset:offset + nbytes])
            offset += nbytes
            futures.append(self.store.put(chunk, pin=bool(item.get("pin", msg.meta.get("pin", False)))))
        if offset != body.size:
            raise RemoteError("bad_size", f"{body.size - offset} trailing body bytes")
        for f in futures:
            status.append(_put_status(f.result()))
        return Message(Op.OK, 0, {"status": status})

    def get(self, msg: Message) -> Message:
        key = _key(msg.meta)
        try:
            if msg.meta.get("layer") is not None:
                r = self.store.read_layer(key, int(msg.meta["layer"]), self.store.local_tiers)
            else:
                r = self.store.read(key, self.store.local_tiers)
        except NotFound:
            raise RemoteError("not_found", key.hex) from None
        return Message(Op.OK, 0, {"token_count": r.token_count, "tier": str(r.tier)}, r.data)

    def exists(self, msg: Message) -> Message:
        keys = [ChunkKey(bytes.fromhex(h), "", 0) for h in msg.meta.get("digests", [])]
        hits = [bool(t) for t in self.store.batch_contains(keys)]
        return Message(Op.OK, 0, {"hits": hits})

    def clear(self, msg: Message) -> Message:
        tiers = _tier(self.store, msg.meta)
        results = []
        for h in msg.meta.get("digests", []):
            key = ChunkKey(bytes.fromhex(h), "", 0)
            outcome = "missing"
            for t in tiers:
                r = self.store.clear_report([key], t)
                if r["removed"]:
                    outcome = "removed"
                elif r["refused"] and outcome == "missing":
                    outcome = "refused"
            results.append(outcome)
        return Message(Op.OK, 0, {
            "results": results,
            "removed": results.count("removed"),
            "refused": results.count("refused"),
            "missing": results.count("missing"),
        })

    def pin(self, msg: Message) -> Message:
        key = _key(msg.meta)
        done = 0
        for t in _tier(self.store, msg.meta):
            try:
                self.store.pin(key, t, bool(msg.meta.get("on", True)))
                done += 1
            except NotFound:
                pass
        if not done:
            raise RemoteError("not_found", key.hex)
        return Message(Op.OK, 0, {"pinned": done})

    def compress(self, msg: Message) -> Message:
        key = _key(msg.meta)
        sizes = []
        for t in _tier(self.store, msg.meta):
            if t in self.store.contains(key):
                try:
                    sizes.append(self.store.compress_entry(key, t, msg.meta["codec"]))
                except UnknownCodec:
                    raise RemoteError("unknown_codec", msg.meta["codec"]) from None
        if not sizes:
            raise RemoteError("not_found", key.hex)
        return Message(Op.OK, 0, {"size": sizes[0], "sizes": sizes})


def serve(endpoint, store, *, handlers: dict[Op, Handler] | None = None, sinks: dict[Op, Sink] | None = None,
          max_payload: int = MAX_PAYLOAD, max_connections: int = 64) -> WireServer:
    """Run a chunk-store server for ``store`` at ``endpoint`` (``"host:0"`` for any port).

    Extra ``handlers``/``sinks`` are merged over the store's, which is how the
    decoder side of PD and controller workers share one endpoint.
    """
    svc = StoreService(store) if store is not None else None
    h = svc.handlers() if svc else {}
    s = svc.sinks() if svc else {}
    h.update(handlers or {})
    s.update(sinks or {})
    server = WireServer(endpoint, h, s, max_payload, max_connections)
    server.service = svc
    return server
