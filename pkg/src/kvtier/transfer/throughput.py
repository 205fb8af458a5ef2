"""Loopback transfer-size experiments.

``measure`` pushes a fixed number of bytes through the PUT path at a given
message size and reports achieved throughput. The receiver lands bodies in
a ring buffer (nothing is indexed), so the numbers isolate the transport and
protocol costs: framing, metadata, per-chunk acknowledgement and the copy
into the destination.
"""

from __future__ import annotations

import contextlib
import gc
import logging
import time
from dataclasses import dataclass

import numpy as np

from ..kv import KVChunk, ModelSpec, PagedKVStore
from ..tokens import ChunkKey
from .client import WireClient
from .pd import PdReceiver, push_pages, send_chunks
from .protocol import Message, Op
from .server import WireServer

logger = logging.getLogger(__name__)

KiB = 1 << 10
MiB = 1 << 20
GiB = 1 << 30


@contextlib.contextmanager
def quiet_gc():
    """Collect once, then keep the cyclic collector out of a timed section."""
    gc.collect()
    enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


class RingSink:
    """PUT receiver that writes every body into a reusable ring and acknowledges each chunk."""

    def __init__(self, ring_bytes: int = 64 * MiB):
        self.ring = np.empty(ring_bytes, dtype=np.uint8)
        self.offset = 0
        self.received = 0

    def sink(self, meta: dict, nbytes: int):
        if self.offset + nbytes > self.ring.size:
            self.offset = 0
        view = self.ring[self.offset:self.offset + nbytes]
        self.offset += nbytes
        return view

    def handle(self, msg: Message) -> Message:
        self.received += len(msg.body)
        return Message(Op.OK, 0, {"status": ["ok"] * len(msg.meta.get("chunks", [1]))})

    def server(self, endpoint="127.0.0.1:0") -> WireServer:
        return WireServer(endpoint, {Op.PUT: self.handle}, {Op.PUT: self.sink})


@dataclass
class Measurement:
    message_bytes: int
    total_bytes: int
    messages: int
    seconds: float

    @property
    def gbps(self) -> float:
        """Achieved throughput in GB/s (10^9 bytes per second)."""
        return self.total_bytes / self.seconds / 1e9

    def to_dict(self) -> dict:
        return {"message_bytes": self.message_bytes, "total_bytes": self.total_bytes,
                "messages": self.messages, "seconds": self.seconds, "gbps": self.gbps}


def _chunks_for(model: ModelSpec, message_bytes: int, pool: np.ndarray) -> list[KVChunk]:
    """Chunks whose sizes make each coalesced message ``message_bytes`` long."""
    per_token = model.bytes_per_token
    tokens = max(1, min(256, message_bytes // per_token))
    per_msg = max(1, message_bytes // (tokens * per_token))
    out = []
    nbytes = tokens * per_token
    for i in range(per_msg):
        start = (i * nbytes) % max(1, pool.size - nbytes)
        key = ChunkKey(i.to_bytes(32, "little"), model.model_tag, i)
        out.append(KVChunk(key, tokens, model.bytes_per_token_per_layer, pool[start:start + nbytes]))
    return out


def measure(client: WireClient, message_bytes: int, total_bytes: int = GiB,
            model: ModelSpec | None = None, repeats: int = 1) -> Measurement:
    """Send ``total_bytes`` as messages of ``message_bytes``; best of ``repeats``.

    Each message is one ``send_chunks`` batch awaited before the next, so the
    per-message protocol cost is paid once per message at every size.
    """
    model = model or ModelSpec()
    rng = np.random.default_rng(0)
    pool = rng.integers(0, 256, size=min(total_bytes, 64 * MiB) + message_bytes, dtype=np.uint8)
    batch = _chunks_for(model, message_bytes, pool)
    actual = sum(c.nbytes for c in batch)
    n = max(1, total_bytes // actual)
    best = None
    for _ in range(repeats):
        with quiet_gc():
            t0 = time.perf_counter()
            for _ in range(n):
                send_chunks(client, batch, max_payload=max(actual + (1 * MiB), 2 * MiB))
            dt = time.perf_counter() - t0
        m = Measurement(actual, n * actual, n, dt)
        if best is None or m.seconds < best.seconds:
            best = m
    return best


def size_sweep(sizes=(64 * KiB, 256 * KiB, MiB, 16 * MiB), total_bytes: int = GiB, repeats: int = 2,
               model: ModelSpec | None = None) -> list[Measurement]:
    """Throughput at each message size over a fresh loopback server."""
    sink = RingSink()
    with sink.server() as srv, WireClient(srv.endpoint) as client:
        measure(client, sizes[-1], min(total_bytes, 256 * MiB), model)  # warm-up
        return [measure(client, s, total_bytes, model, repeats) for s in sizes]


def page_vs_chunk_push(prompt_tokens: int = 8192, model: ModelSpec | None = None,
                       chunk_size: int = 256, repeats: int = 2) -> dict:
    """Time moving one prompt's KV prefiller -> decoder by page and by chunk.

    Page mode sends every (layer, page) as its own acknowledged message into
    the decoder's pages; chunk mode pushes each chunk (all layers) into a
    pre-allocated slot. Both use the same connection type and receive in place.
    """
    from ..tokens import chunk_keys
    from .pd import pd_push

    model = model or ModelSpec()
    pages_per_layer = -(-prompt_tokens // model.page_tokens)
    src = PagedKVStore(model, pages_per_layer * model.num_layers)
    src.alloc_blocks("q", pages_per_layer)
    rng = np.random.default_rng(1)
    for layer in range(model.num_layers):
        src.write_tokens("q", layer, 0, rng.integers(0, 256, (prompt_tokens, model.bytes_per_token_per_layer),
                                                     dtype=np.uint8))
    dst = PagedKVStore(model, pages_per_layer * model.num_layers)
    dst.alloc_blocks("q", pages_per_layer)
    recv = PdReceiver(model, dst)
    keys = chunk_keys(np.arange(prompt_tokens), chunk_size, model.model_tag)
    chunks = []
    for k in keys:
        s = k.chunk_index * chunk_size
        e = min(s + chunk_size, prompt_tokens)
        payload = np.stack([src.read_tokens("q", layer, s, e).reshape(-1) for layer in range(model.num_layers)])
        chunks.append(KVChunk(k, e - s, model.bytes_per_token_per_layer, payload))
    out = {"prompt_tokens": prompt_tokens, "bytes": sum(c.nbytes for c in chunks)}
    layer_pages = [(layer, i) for layer in range(model.num_layers) for i in range(pages_per_layer)]
    page_times, chunk_times = [], []
    with WireServer("127.0.0.1:0", recv.handlers(), recv.sinks()) as srv, WireClient(srv.endpoint) as client:
        for r in range(repeats):
            recv.register_pages("q")  # lands in the decoder's own page table for "q"
            with quiet_gc():
                t0 = time.perf_counter()
                push_pages(client, "q", src, "q", layer_pages)
                page_times.append(time.perf_counter() - t0)
            recv.unregister("q")

            qid = f"chunks-{r}"
            recv.register(qid, [c.token_count for c in chunks])
            with quiet_gc():
                t0 = time.perf_counter()
                for i, c in enumerate(chunks):
                    pd_push(client, qid, i, c)
                recv.pd_await(qid)
                chunk_times.append(time.perf_counter() - t0)
            recv.unregister(qid)
    out["page_messages"] = len(layer_pages)
    out["chunk_messages"] = len(chunks)
    out["page_seconds"] = min(page_times)
    out["chunk_seconds"] = min(chunk_times)
    out["ratio"] = out["chunk_seconds"] / out["page_seconds"]
    out["pages_match"] = all(
        np.array_equal(src.gather_pages(src.page_table("q")[layer]), dst.gather_pages(dst.page_table("q")[layer]))
        for layer in range(model.num_layers))
    return out
