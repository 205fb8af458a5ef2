"""Pipelined wire client plus socket helpers shared with the server."""

from __future__ import annotations

import itertools
import logging
import socket
import threading
from concurrent.futures import Future
from typing import Callable

from .protocol import HEADER, MAX_PAYLOAD, META_LEN, FrameError, Message, Op, RemoteError, check_header, parse_meta

logger = logging.getLogger(__name__)


def parse_endpoint(endpoint) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint[0], int(endpoint[1])
    host, _, port = str(endpoint).rpartition(":")
    return host or "127.0.0.1", int(port)


def format_endpoint(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


def tune(sock: socket.socket) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


def recv_exact(sock: socket.socket, view: memoryview) -> None:
    """Fill ``view`` completely or raise EOFError."""
    n = 0
    total = len(view)
    while n < total:
        k = sock.recv_into(view[n:], total - n, socket.MSG_WAITALL)
        if not k:
            raise EOFError("peer closed the connection")
        n += k


def drain(sock: socket.socket, nbytes: int) -> None:
    scratch = memoryview(bytearray(min(nbytes, 1 << 20) or 1))
    while nbytes:
        k = min(nbytes, len(scratch))
        recv_exact(sock, scratch[:k])
        nbytes -= k


def send_buffers(sock: socket.socket, buffers: list) -> None:
    """Scatter-gather send that copes with partial writes."""
    views = [memoryview(b).cast("B") for b in buffers if len(b)]
    while views:
        sent = sock.sendmsg(views)
        while sent:
            if sent >= len(views[0]):
                sent -= len(views[0])
                views.pop(0)
            else:
                views[0] = views[0][sent:]
                sent = 0


def read_message(sock: socket.socket, max_payload: int, body_into=None) -> Message:
    """Read one frame. ``body_into(meta, nbytes)`` may return a buffer to receive the body in place."""
    hb = bytearray(HEADER.size)
    recv_exact(sock, memoryview(hb))
    op, rid, n = check_header(hb, 0, max_payload)
    mb = bytearray(META_LEN.size)
    recv_exact(sock, memoryview(mb))
    (m,) = META_LEN.unpack(mb)
    if m > n - META_LEN.size:
        raise FrameError(HEADER.size, "meta length exceeds payload")
    raw = bytearray(m)
    recv_exact(sock, memoryview(raw))
    meta, _ = parse_meta(bytes(mb) + bytes(raw), HEADER.size)
    nbody = n - META_LEN.size - m
    dest = body_into(op, rid, meta, nbody) if body_into else None
    if dest is None:
        body = bytearray(nbody)
        recv_exact(sock, memoryview(body))
    else:
        view = memoryview(dest).cast("B")
        if len(view) != nbody:
            drain(sock, nbody)
            raise FrameError(HEADER.size, "body sink has the wrong size")
        recv_exact(sock, view)
        body = dest
    return Message(op, rid, meta, body)


class WireClient:
    """One connection; requests may be pipelined from any thread.

    A reader thread matches replies to requests by id. ``request`` returns a
    future resolving to the reply :class:`Message`, or raising
    :class:`RemoteError` for ERR replies.
    """

    def __init__(self, endpoint, max_payload: int = MAX_PAYLOAD, timeout: float | None = None):
        self.endpoint = format_endpoint(parse_endpoint(endpoint))
        self.max_payload = max_payload
        self.sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        self.sock.settimeout(None)
        tune(self.sock)
        self._ids = itertools.count(1)
        self._pending: dict[int, tuple[Future, object]] = {}
        self._send_lock = threading.Lock()
        self._lock = threading.Lock()
        self._closed = False
        self.messages_sent = 0
        self.bytes_sent = 0
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name="wire-client")
        self._reader.start()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _sink(self, op, rid, meta, nbytes):
        with self._lock:
            entry = self._pending.get(rid)
        if entry is None or entry[1] is None or op != Op.OK:
            return None
        into = entry[1]
        return into(meta, nbytes) if callable(into) else into

    def _read_loop(self) -> None:
        error: BaseException = EOFError("connection closed")
        try:
            while True:
                msg = read_message(self.sock, self.max_payload, self._sink)
                with self._lock:
                    entry = self._pending.pop(msg.request_id, None)
                if entry is None:
                    logger.warning("reply for unknown request %d", msg.request_id)
                    continue
                fut = entry[0]
                if msg.op == Op.ERR:
                    fut.set_exception(RemoteError(msg.meta.get("code", "error"), msg.meta.get("detail", "")))
                else:
                    fut.set_result(msg)
        except (OSError, EOFError, FrameError) as e:
            error = e
        finally:
            with self._lock:
                pending, self._pending = self._pending, {}
                self._closed = True
            for fut, _ in pending.values():
                if not fut.done():
                    fut.set_exception(ConnectionError(f"connection lost: {error}"))

    def request(self, op: Op, meta: dict | None = None, body=b"", into: object | Callable | None = None) -> Future:
        """Send one request.

        Args:
            op: request opcode.
            meta: JSON-serialisable metadata.
            body: payload bytes (any buffer).
            into: buffer, or ``callable(meta, nbytes) -> buffer``, receiving
                the reply body in place.
        """
        rid = next(self._ids)
        fut: Future = Future()
        msg = Message(op, rid, meta or {}, body)
        bufs = msg.buffers()
        size = sum(len(memoryview(b).cast("B")) for b in bufs) - HEADER.size
        if size > self.max_payload:
            raise ValueError(f"payload of {size} bytes exceeds {self.max_payload}")
        with self._lock:
            if self._closed:
                raise ConnectionError("connection closed")
            self._pending[rid] = (fut, into)
        with self._send_lock:
            send_buffers(self.sock, bufs)
            self.messages_sent += 1
            self.bytes_sent += size + HEADER.size
        return fut

    def call(self, op: Op, meta: dict | None = None, body=b"", into=None, timeout: float | None = 60) -> Message:
        return self.request(op, meta, body, into).result(timeout)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._reader.join(timeout=5)
