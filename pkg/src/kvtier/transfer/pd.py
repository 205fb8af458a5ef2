"""Prefill-to-decode KV transfer and chunk batching over the wire.

The decoder registers each incoming query up front, which pre-allocates one
staging slot per chunk. The prefiller pushes every chunk as soon as it is
complete; bodies are received straight into the slot. A page-granularity
mode, one message per 16-token page of one layer written straight into the
decoder's pages, serves as the baseline.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..kv import KVChunk, ModelSpec, PagedKVStore
from ..tokens import ChunkKey
from .client import WireClient
from .protocol import MAX_PAYLOAD, META_LEN, Message, Op, RemoteError

logger = logging.getLogger(__name__)

AWAITING, FILLED, CONSUMED = "awaiting", "filled", "consumed"


class UnknownQuery(KeyError):
    pass


def _qid(query_id):
    return query_id if isinstance(query_id, (int, str)) else str(query_id)


@dataclass
class PdBufferSlot:
    ordinal: int
    token_count: int
    buffer: np.ndarray
    state: str = AWAITING
    key: ChunkKey | None = None


class _Query:
    def __init__(self, slots: list[PdBufferSlot] | None, pages: bool):
        self.slots = slots or []
        self.pages = pages
        self.pages_received = 0


class PdReceiver:
    """Decoder-side endpoint for PD_PUSH.

    Args:
        model: KV layout (sizes the staging slots).
        pages: the decoder's paged memory, needed for page-mode pushes.
    """

    def __init__(self, model: ModelSpec, pages: PagedKVStore | None = None):
        self.model = model
        self.pages = pages
        self._queries: dict[object, _Query] = {}
        self._cond = threading.Condition()
        self.duplicates = 0

    # registration

    def register(self, query_id, chunk_token_counts: Iterable[int]) -> list[PdBufferSlot]:
        """Pre-allocate one slot per expected chunk."""
        L, bpt = self.model.num_layers, self.model.bytes_per_token_per_layer
        slots = [PdBufferSlot(i, n, np.empty((L, n * bpt), dtype=np.uint8))
                 for i, n in enumerate(chunk_token_counts)]
        with self._cond:
            self._queries[_qid(query_id)] = _Query(slots, pages=False)
        return slots

    def register_pages(self, query_id) -> None:
        """Accept page-mode pushes for a query whose pages are already allocated."""
        if self.pages is None:
            raise ValueError("page mode needs the decoder's PagedKVStore")
        with self._cond:
            self._queries[_qid(query_id)] = _Query(None, pages=True)

    def unregister(self, query_id) -> None:
        with self._cond:
            self._queries.pop(_qid(query_id), None)

    def slots(self, query_id) -> list[PdBufferSlot]:
        return self._queries[_qid(query_id)].slots

    # wire side

    def handlers(self) -> dict:
        return {Op.PD_PUSH: self._handle}

    def sinks(self) -> dict:
        return {Op.PD_PUSH: self._sink}

    def _query(self, meta) -> _Query:
        q = self._queries.get(_qid(meta.get("query")))
        if q is None:
            raise RemoteError("unknown_query", str(meta.get("query")))
        return q

    def _sink(self, meta: dict, nbytes: int):
        with self._cond:
            q = self._query(meta)
            if meta.get("mode") == "pages":
                pages = meta["pages"]
                if len(pages) == 1:
                    layer, idx = pages[0]
                    pid = self.pages.page_table(meta["query"])[layer][idx]
                    return self.pages.page_view(pid)
                return None
            ordinal = int(meta["ordinal"])
            if not 0 <= ordinal < len(q.slots):
                raise RemoteError("bad_ordinal", f"{ordinal} outside 0..{len(q.slots) - 1}")
            slot = q.slots[ordinal]
            if slot.state != AWAITING:
                return None  # duplicate: read into scratch, ack idempotently
            return slot.buffer

    def _handle(self, msg: Message) -> Message:
        meta = msg.meta
        with self._cond:
            q = self._query(meta)
            if meta.get("mode") == "pages":
                pages = meta["pages"]
                table = self.pages.page_table(meta["query"])
                ids = [table[layer][idx] for layer, idx in pages]
                if len(ids) == 1:
                    self.pages.mark_filled(ids[0])
                else:
                    pb = self.pages.model.page_bytes
                    body = np.frombuffer(msg.body, dtype=np.uint8)
                    for i, pid in enumerate(ids):
                        self.pages.scatter_pages(body[i * pb:(i + 1) * pb], [pid])
                q.pages_received += len(ids)
                self._cond.notify_all()
                return Message(Op.OK, 0, {"pages": len(ids)})
            slot = q.slots[int(meta["ordinal"])]
            if slot.state != AWAITING:
                self.duplicates += 1
                return Message(Op.OK, 0, {"status": "duplicate"})
            slot.key = ChunkKey.from_dict(meta["key"]) if meta.get("key") else None
            slot.state = FILLED
            self._cond.notify_all()
        return Message(Op.OK, 0, {"status": "ok"})

    # decoder side

    def pd_await(self, query_id, timeout: float | None = 60) -> list[KVChunk]:
        """Block until every slot of ``query_id`` is filled; return the chunks in order."""
        qid = _qid(query_id)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            q = self._queries.get(qid)
            if q is None:
                raise UnknownQuery(query_id)
            while any(s.state == AWAITING for s in q.slots):
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise TimeoutError(f"query {query_id!r}: chunks still awaiting")
                self._cond.wait(left)
            out = []
            for s in q.slots:
                s.state = CONSUMED
                out.append(KVChunk(s.key, s.token_count, self.model.bytes_per_token_per_layer, s.buffer)
                           if s.key is not None else s.buffer)
            return out

    def await_pages(self, query_id, expected: int, timeout: float | None = 60) -> None:
        qid = _qid(query_id)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            q = self._queries[qid]
            while q.pages_received < expected:
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise TimeoutError(f"query {query_id!r}: {q.pages_received}/{expected} pages")
                self._cond.wait(left)


# -- sender side ------------------------------------------------------------

def _checked(fut):
    try:
        return fut.result(60)
    except RemoteError as e:
        if e.code == "unknown_query":
            raise UnknownQuery(e.detail) from None
        raise


def pd_push(client: WireClient, query_id, ordinal: int, chunk: KVChunk, wait: bool = True):
    """Send one chunk to the decoder's slot ``ordinal`` for ``query_id``."""
    meta = {"query": _qid(query_id), "ordinal": ordinal, "token_count": chunk.token_count,
            "key": chunk.key.to_dict() if chunk.key is not None else None}
    fut = client.request(Op.PD_PUSH, meta, chunk.payload)
    return _checked(fut) if wait else fut


def push_pages(client: WireClient, query_id, pages: PagedKVStore, src_query, layer_pages: Iterable[tuple[int, int]],
               wait: bool = True) -> int:
    """Page-by-page transfer: one message per (layer, page index), each acknowledged before the next.

    Returns the number of messages sent.
    """
    table = pages.page_table(src_query)
    n = 0
    for layer, idx in layer_pages:
        meta = {"query": _qid(query_id), "mode": "pages", "pages": [[layer, idx]]}
        fut = client.request(Op.PD_PUSH, meta, pages.page_view(table[layer][idx]))
        if wait:
            _checked(fut)
        n += 1
    return n


def plan_batches(sizes: list[int], max_payload: int = MAX_PAYLOAD, meta_reserve: int = 64 << 10) -> list[list[int]]:
    """Greedy grouping of item indices so every batch fits under ``max_payload``."""
    limit = max_payload - META_LEN.size - meta_reserve
    batches: list[list[int]] = []
    cur: list[int] = []
    used = 0
    for i, n in enumerate(sizes):
        if n > limit:
            raise ValueError(f"item {i} of {n} bytes cannot fit in one message")
        if cur and used + n > limit:
            batches.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += n
    if cur:
        batches.append(cur)
    return batches


def send_chunks(client: WireClient, chunks: list[KVChunk], max_payload: int | None = None,
                pin: bool = False, window: int = 1) -> list[str]:
    """PUT ``chunks`` coalesced into as few messages as fit; returns per-chunk status.

    ``window`` bounds how many batch messages are in flight at once.
    """
    if not chunks:
        return []
    cap = min(max_payload or client.max_payload, client.max_payload)
    batches = plan_batches([c.nbytes for c in chunks], cap)
    status: list[str] = [""] * len(chunks)
    inflight: list[tuple[list[int], object]] = []

    def settle(entry):
        idx, fut = entry
        try:
            got = fut.result(120).meta["status"]
        except RemoteError as e:
            got = [f"error: {e}"] * len(idx)
        for i, s in zip(idx, got):
            status[i] = s

    for idx in batches:
        meta = {"pin": pin, "chunks": [{"key": chunks[i].key.to_dict(), "token_count": chunks[i].token_count}
                                       for i in idx]}
        body = [chunks[i].payload for i in idx]
        inflight.append((idx, client.request(Op.PUT, meta, body)))
        if len(inflight) >= window:
            settle(inflight.pop(0))
    for entry in inflight:
        settle(entry)
    return status

