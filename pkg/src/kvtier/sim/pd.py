"""Prefill and decode on separate engines with KV pushed between them.

The prefiller computes each prompt chunk by chunk and pushes every finished
chunk to the decoder over the wire, so transfer overlaps the rest of the
prefill. The decoder pre-registers one receive slot per chunk, waits for
all of them, scatters the bytes into its own pages and decodes from there.
Its first token is recomputed from the received KV, so a transfer error
shows up as a different output.

In virtual time the link is a FIFO device: chunk ``i`` arrives at
``max(ready_i, link free) + latency + bytes / bandwidth``.
"""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import Future, ThreadPoolExecutor

import numpy as np

from ..kv import KVChunk, ModelSpec, synth_kv
from ..storage.tiers import DeviceModel
from ..tokens import chunk_keys
from ..transfer.client import WireClient
from ..transfer.pd import PdReceiver, pd_push
from ..transfer.server import WireServer
from .cost import CostModel
from .engine import QueryRecord, SimEngine, SimQuery, run_engines
from .model import fold_layer, next_token

logger = logging.getLogger(__name__)


def _layer_crc(engine: SimEngine, query_id, layer: int, n: int) -> int:
    crc = 0
    for view in engine.pages.token_views(query_id, layer, 0, n):
        crc = zlib.crc32(view, crc)
    return crc


class PrefillEngine(SimEngine):
    """Engine that only prefills and hands each query to a decoder."""

    def __init__(self, model: ModelSpec, num_pages: int, *, client: WireClient, receiver: PdReceiver,
                 decoder: "DecodeEngine", link: DeviceModel, chunk_size: int = 256, **kw):
        super().__init__(model, num_pages, **kw)
        self.client = client
        self.receiver = receiver
        self.decoder = decoder
        self.link = link
        self.chunk_size = chunk_size
        self._sender = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"{self.name}-push")
        self.pushed_bytes = 0

    def close(self) -> None:
        self._sender.shutdown(wait=True)
        super().close()

    def _prefill(self, q: SimQuery, meta) -> None:
        rec = self.records[q.query_id]
        n = len(q.tokens)
        L = self.model.num_layers
        bpt = self.model.bytes_per_token_per_layer
        keys = chunk_keys(q.tokens, self.chunk_size, self.model.model_tag)
        spans = [(k.chunk_index * self.chunk_size, min((k.chunk_index + 1) * self.chunk_size, n)) for k in keys]
        self.receiver.register(q.query_id, [e - s for s, e in spans])
        arrivals = []
        pushes: list[Future] = []
        for i, (key, (s, e)) in enumerate(zip(keys, spans)):
            pos = np.arange(s, e, dtype=np.uint64)
            rows = []
            for layer in range(L):
                kv = synth_kv(q.tokens[s:e].astype(np.uint64), pos, layer, bpt)
                self.pages.write_tokens(q.query_id, layer, s, kv)
                rows.append(self.pages.read_tokens(q.query_id, layer, s, e).reshape(-1))
            self.clock.advance(self.cost.span_cost(s, e))
            chunk = KVChunk(key, e - s, bpt, np.stack(rows))
            self.pushed_bytes += chunk.nbytes
            if self.clock.virtual:
                pd_push(self.client, q.query_id, i, chunk)
                arrivals.append(self.clock.schedule("link", self.link.seconds(chunk.nbytes)))
            else:
                pushes.append(self._sender.submit(pd_push, self.client, q.query_id, i, chunk))
        state = 0
        for layer in range(L):
            state = fold_layer(state, layer, _layer_crc(self, q.query_id, layer, n))
        now = self.clock.now()
        first = next_token(state, 0, self.vocab) if q.max_out > 0 else None
        rec.prefill_done_at = now
        rec.segments["prefill"] = now - rec.admitted_at
        kv_ready = max(arrivals, default=now) if self.clock.virtual else now
        self.pages.free_query(q.query_id)
        self.connector.request_finished(q.query_id)
        rec.outputs = [first] if first is not None else []
        rec.finished_at = now
        handoff = SimQuery(q.query_id, q.tokens, q.max_out, arrival=kv_ready, session=q.session)
        self.decoder.expect(handoff, {"first_token": first, "ready_at": rec.ready_at,
                                      "admitted_at": rec.admitted_at, "prefill_done_at": now,
                                      "kv_ready": kv_ready, "pushes": pushes})


class DecodeEngine(SimEngine):
    """Engine that receives prefilled KV instead of computing it."""

    def __init__(self, model: ModelSpec, num_pages: int, *, receiver: PdReceiver, await_timeout: float = 120, **kw):
        kw.setdefault("store", None)
        super().__init__(model, num_pages, **kw)
        self.receiver = receiver
        self.await_timeout = await_timeout
        self.handoffs: dict = {}
        self.first_token_mismatches = 0

    def expect(self, query: SimQuery, info: dict) -> None:
        self.handoffs[query.query_id] = info
        self.submit(query)

    def _prefill(self, q: SimQuery, meta) -> None:
        info = self.handoffs.pop(q.query_id)
        rec = self.records[q.query_id]
        chunks = self.receiver.pd_await(q.query_id, self.await_timeout)
        for f in info["pushes"]:
            f.result()
        self.receiver.unregister(q.query_id)
        start = 0
        for c in chunks:
            for layer in range(self.model.num_layers):
                self.pages.write_tokens(q.query_id, layer, start, c.layer(layer))
            start += c.token_count
        n = len(q.tokens)
        state = 0
        for layer in range(self.model.num_layers):
            state = fold_layer(state, layer, _layer_crc(self, q.query_id, layer, n))
        now = self.clock.now()
        if q.max_out > 0 and next_token(state, 0, self.vocab) != info["first_token"]:
            self.first_token_mismatches += 1
        rec.ready_at = info["ready_at"]
        kv_ready = info["kv_ready"] if self.clock.virtual else now
        rec.segments = {"prefill": info["prefill_done_at"] - info["ready_at"],
                        "transfer": kv_ready - info["prefill_done_at"]}
        rec.details = {"prefill_queue": info["admitted_at"] - info["ready_at"],
                       "prefill_compute": info["prefill_done_at"] - info["admitted_at"],
                       "decode_queue": max(0.0, now - kv_ready)}
        rec.prefill_done_at = kv_ready  # the decode segment starts once the KV has arrived
        rec.matched_tokens = 0
        rec.mode = "pd"
        self._start_decode(q, rec, state)


class PdPair:
    """A prefiller and a decoder joined by a loopback wire connection.

    Args:
        model: KV layout shared by both engines.
        prefill_pages: page pool of the prefiller.
        decode_pages: page pool of the decoder.
        cost: compute cost model.
        clock: ``"virtual"`` or ``"wall"``.
        link: transfer-time model for the prefiller->decoder link.
        max_concurrent: decode batch size limit.
    """

    def __init__(self, model: ModelSpec, *, prefill_pages: int, decode_pages: int, cost: CostModel | None = None,
                 clock: str = "virtual", link: DeviceModel | None = None, vocab: int = 32000,
                 max_concurrent: int = 8, chunk_size: int = 256):
        from .clock import make_clock

        self.model = model
        self.finished: dict = {}
        self.receiver = PdReceiver(model)
        self.server = WireServer("127.0.0.1:0", self.receiver.handlers(), self.receiver.sinks())
        self.client = WireClient(self.server.endpoint)
        self.decoder = DecodeEngine(model, decode_pages, receiver=self.receiver, cost=cost,
                                    clock=make_clock(clock), vocab=vocab, max_concurrent=max_concurrent,
                                    name="decoder", finished=self.finished)
        self.prefiller = PrefillEngine(model, prefill_pages, client=self.client, receiver=self.receiver,
                                       decoder=self.decoder, link=link or DeviceModel(bandwidth=25e9, latency=1e-5),
                                       chunk_size=chunk_size, cost=cost, clock=make_clock(clock), vocab=vocab,
                                       max_concurrent=1, name="prefiller", finished=self.finished)
        if clock == "wall":
            self.decoder.clock = self.prefiller.clock  # one timeline for both sides

    def close(self) -> None:
        self.prefiller.close()
        self.decoder.close()
        self.client.close()
        self.server.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def run(self, queries: list[SimQuery]) -> dict[object, QueryRecord]:
        for q in queries:
            self.prefiller.submit(q)
        run_engines([self.prefiller, self.decoder])
        return dict(self.decoder.records)


def run_pd(model: ModelSpec, queries: list[SimQuery], **kw) -> tuple[dict, PdPair]:
    pair = PdPair(model, **kw)
    try:
        return pair.run(queries), pair
    finally:
        pair.close()
