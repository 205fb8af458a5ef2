"""Iteration-level serving engine over paged KV memory.

Each :meth:`SimEngine.step` admits waiting queries (FIFO among those whose
arrival time has passed and whose predecessor in the session finished),
prefills them through the connector, then runs one decode iteration for
every decoding query. Compute is a cost-model advance of the engine clock;
the KV it "produces" is real bytes written into pages, and output tokens
are derived from those bytes (see :mod:`kvtier.sim.model`).
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..connector import BLOCKING, LAYERWISE, ChunkMissing, KVConnector, NoOpConnector, SchedulerOutput
from ..kv import ModelSpec, OutOfPages, PagedKVStore, synth_kv
from .clock import VirtualClock, make_clock
from .cost import CostModel
from .model import fold_layer, layer_crc, next_token, token_kv

logger = logging.getLogger(__name__)


@dataclass
class SimQuery:
    """One request.

    Args:
        query_id: unique id.
        tokens: prompt token ids.
        max_out: output tokens to generate.
        arrival: earliest time the query may start.
        after: id of a query that must finish first (the previous round of
            the same session); ``think_time`` is added after it finishes.
    """

    query_id: object
    tokens: np.ndarray
    max_out: int = 16
    arrival: float = 0.0
    after: object = None
    think_time: float = 0.0
    session: object = None
    round: int = 1

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)


@dataclass
class QueryRecord:
    query_id: object
    engine: str
    prompt_tokens: int
    max_out: int
    ready_at: float = 0.0
    admitted_at: float = 0.0
    prefill_done_at: float = 0.0
    first_token_at: float | None = None
    finished_at: float = 0.0
    token_times: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    matched_tokens: int = 0
    loaded_tokens: int = 0
    mode: str = BLOCKING
    load_seconds: float = 0.0
    store_seconds: float = 0.0
    loaded_from: dict = field(default_factory=dict)
    segments: dict = field(default_factory=dict)  # phases that sum to e2e
    details: dict = field(default_factory=dict)  # finer timings, not part of the sum
    first_compute_at: float | None = None

    @property
    def ttft(self) -> float | None:
        return None if self.first_token_at is None else self.first_token_at - self.ready_at

    @property
    def itl(self) -> float | None:
        if len(self.token_times) < 2:
            return None
        return float(np.mean(np.diff(self.token_times)))

    @property
    def e2e(self) -> float:
        return self.finished_at - self.ready_at

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id, "engine": self.engine, "prompt_tokens": self.prompt_tokens,
            "max_out": self.max_out, "ready_at": self.ready_at, "admitted_at": self.admitted_at,
            "first_token_at": self.first_token_at, "finished_at": self.finished_at,
            "ttft": self.ttft, "itl": self.itl, "e2e": self.e2e,
            "matched_tokens": self.matched_tokens, "loaded_tokens": self.loaded_tokens, "mode": self.mode,
            "load_seconds": self.load_seconds, "store_seconds": self.store_seconds,
            "loaded_from": dict(self.loaded_from), "segments": dict(self.segments),
            "details": dict(self.details), "first_compute_at": self.first_compute_at,
            "outputs": list(self.outputs),
        }


class _Running:
    __slots__ = ("query", "record", "state", "outputs")

    def __init__(self, query: SimQuery, record: QueryRecord):
        self.query = query
        self.record = record
        self.state = 0
        self.outputs: list[int] = []


class SimEngine:
    """A serving engine instance.

    Args:
        model: KV layout.
        num_pages: size of the page pool.
        store: storage engine to cache into; ``None`` runs without a cache.
        mode: connector transfer mode (layerwise or blocking).
        clock: ``"virtual"``, ``"wall"`` or a clock object.
        cost: compute cost model.
        vocab: vocabulary size for generated tokens.
        max_concurrent: queries admitted at once.
        store_decode: also cache KV produced while decoding.
        finished: shared ``query_id -> finish time`` map, so sessions can
            span engines.
        connector_kwargs: extra :class:`KVConnector` options.
    """

    def __init__(self, model: ModelSpec, num_pages: int, *, store=None, mode: str = LAYERWISE, clock="virtual",
                 cost: CostModel | None = None, vocab: int = 32000, max_concurrent: int = 8,
                 store_decode: bool = True, name: str = "engine", finished: dict | None = None,
                 connector_kwargs: dict | None = None, prefetch: bool = False):
        self.model = model
        self.name = name
        self.clock = make_clock(clock) if isinstance(clock, str) else clock
        self.cost = cost or CostModel(num_layers=model.num_layers)
        if self.cost.num_layers != model.num_layers:
            raise ValueError("cost model and KV layout disagree on num_layers")
        self.pages = PagedKVStore(model, num_pages)
        if store is None:
            self.connector = NoOpConnector(model, self.clock)
        else:
            self.connector = KVConnector(store, self.pages, self.clock, mode=mode, name=name,
                                         **(connector_kwargs or {}))
        self.vocab = vocab
        self.max_concurrent = max_concurrent
        self.store_decode = store_decode and store is not None
        self.prefetch_enabled = prefetch
        self.finished = finished if finished is not None else {}
        self.records: dict[object, QueryRecord] = {}
        self._queue: list[SimQuery] = []
        self._running: list[_Running] = []
        self._prefetched: set = set()
        self.iterations = 0

    def close(self) -> None:
        self.connector.close()

    # -- queue -----------------------------------------------------------

    def submit(self, query: SimQuery) -> None:
        self._queue.append(query)

    def pending(self) -> bool:
        return bool(self._queue or self._running)

    def _ready_at(self, q: SimQuery) -> float:
        if q.after is None:
            return q.arrival
        done = self.finished.get(q.after)
        return math.inf if done is None else max(q.arrival, done + q.think_time)

    def next_time(self) -> float:
        """Earliest time this engine has work (``inf`` when blocked on other engines)."""
        if self._running:
            return self.clock.now()
        t = min((self._ready_at(q) for q in self._queue), default=math.inf)
        return max(t, self.clock.now()) if t < math.inf else t

    # -- scheduling ----------------------------------------------------------

    def _admit(self) -> list[SimQuery]:
        now = self.clock.now()
        admitted = []
        pt = self.model.page_tokens
        for q in list(self._queue):
            if self._ready_at(q) > now:
                continue
            if len(self._running) + len(admitted) >= self.max_concurrent:
                if self.prefetch_enabled and q.query_id not in self._prefetched:
                    self._prefetched.add(q.query_id)
                    self.connector.prefetch(q)
                continue
            n = len(q.tokens)
            matched = self.connector.get_num_new_matched_tokens(q)
            try:
                blocks = self.pages.alloc_blocks(q.query_id, -(-(n + q.max_out) // pt))
            except OutOfPages:
                if not self._running and not admitted:
                    raise RuntimeError(f"query {q.query_id!r} cannot fit in {self.pages.num_pages} pages") from None
                break  # FIFO: retry once pages free up
            self.connector.update_state_after_alloc(q, blocks, -(-matched // pt))
            self._queue.remove(q)
            rec = QueryRecord(q.query_id, self.name, n, q.max_out, ready_at=self._ready_at(q), admitted_at=now,
                              matched_tokens=matched)
            self.records[q.query_id] = rec
            admitted.append(q)
        return admitted

    def step(self) -> bool:
        """One scheduler iteration; returns False when there is nothing left to do."""
        if not self.pending():
            return False
        admitted = self._admit()
        if admitted:
            metas = self.connector.build_connector_meta(SchedulerOutput([q.query_id for q in admitted]))
            for q, meta in zip(admitted, metas):
                self._prefill(q, meta)
        if self._running:
            self._decode_iteration()
        elif not admitted:
            t = self.next_time()
            if t == math.inf:
                return False
            self.clock.advance_to(t)
        return True

    def run(self) -> list[QueryRecord]:
        while self.step():
            pass
        if self._queue:
            raise RuntimeError(f"{len(self._queue)} queries wait on sessions that never finish")
        return list(self.records.values())

    # -- compute ---------------------------------------------------------------

    def _compute_layer(self, q: SimQuery, layer: int, start: int) -> int:
        """Fill tokens ``[start, n)`` of one layer and return the layer's CRC over the whole context."""
        n = len(q.tokens)
        log = self.connector.log
        log("compute_start", q.query_id, layer, start=start)
        rec = self.records.get(q.query_id)
        if rec is not None and rec.first_compute_at is None:
            rec.first_compute_at = self.clock.now()
        if start < n:
            pos = np.arange(start, n, dtype=np.uint64)
            kv = synth_kv(q.tokens[start:].astype(np.uint64), pos, layer, self.model.bytes_per_token_per_layer)
            self.pages.write_tokens(q.query_id, layer, start, kv)
        self.clock.advance(self.cost.layer_cost(start, n))
        crc = 0
        for view in self.pages.token_views(q.query_id, layer, 0, n):
            crc = zlib.crc32(view, crc)
        log("compute_done", q.query_id, layer)
        return crc

    def _prefill(self, q: SimQuery, meta) -> None:
        rec = self.records[q.query_id]
        conn = self.connector
        L = self.model.num_layers
        start_from = [meta.matched_tokens] * L
        try:
            conn.start_load_kv(meta)
        except ChunkMissing as e:
            start_from = [min(s, e.safe_tokens) for s in start_from]
        state = 0
        for layer in range(L):
            try:
                conn.wait_load_kv(meta, layer)
            except ChunkMissing as e:
                for i in range(layer, L):
                    start_from[i] = min(start_from[i], e.safe_tokens)
            state = fold_layer(state, layer, self._compute_layer(q, layer, start_from[layer]))
            if meta.mode == LAYERWISE:
                if layer > 0:
                    conn.wait_store_kv(meta, layer - 1)
                conn.start_store_kv(meta, layer)
        if meta.mode == LAYERWISE:
            conn.wait_store_kv(meta, L - 1)
        else:
            conn.start_store_kv(meta)
            conn.wait_store_kv(meta, L - 1)
        now = self.clock.now()
        rec.prefill_done_at = now
        rec.mode = meta.mode
        rec.loaded_tokens = min(start_from)
        rec.load_seconds = meta.load_seconds
        rec.store_seconds = meta.store_seconds
        rec.loaded_from = dict(meta.loaded_from)
        rec.segments["queue"] = rec.admitted_at - rec.ready_at
        rec.segments["prefill"] = now - rec.admitted_at
        rec.details["schedule_to_first_layer"] = rec.first_compute_at - rec.admitted_at
        self._start_decode(q, rec, state)

    def _start_decode(self, q: SimQuery, rec: QueryRecord, state: int) -> None:
        """Emit the first token and either finish or join the decode batch."""
        run = _Running(q, rec)
        run.state = state
        if self.store_decode:
            self.connector.begin_decode(q.query_id, q.tokens)
        if q.max_out <= 0:
            self._finish(run)
            return
        tok = next_token(state, 0, self.vocab)
        run.outputs.append(tok)
        rec.first_token_at = self.clock.now()
        rec.token_times.append(rec.first_token_at)
        if q.max_out == 1:
            self._append_kv(run, tok)
            self._finish(run)
        else:
            self._running.append(run)

    def _append_kv(self, run: _Running, token: int) -> None:
        """Write one generated token's KV into pages and fold it into the state."""
        q = run.query
        pos = len(q.tokens) + len(run.outputs) - 1
        kvs = []
        for layer in range(self.model.num_layers):
            kv = token_kv(self.model, token, pos, layer)
            self.pages.write_tokens(q.query_id, layer, pos, kv)
            run.state = fold_layer(run.state, layer, layer_crc(self.pages.read_tokens(q.query_id, layer, pos, pos + 1)))
            kvs.append(kv)
        if self.store_decode:
            self.connector.save_decode_kv(q.query_id, token, np.stack(kvs))

    def _decode_iteration(self) -> None:
        self.iterations += 1
        self.clock.advance(self.cost.decode_cost_per_token)
        now = self.clock.now()
        for run in list(self._running):
            self._append_kv(run, run.outputs[-1])
            tok = next_token(run.state, len(run.outputs), self.vocab)
            run.outputs.append(tok)
            run.record.token_times.append(now)
            if len(run.outputs) >= run.query.max_out:
                self._append_kv(run, tok)  # last token's KV is kept for the next round
                self._running.remove(run)
                self._finish(run)

    def _finish(self, run: _Running) -> None:
        q, rec = run.query, run.record
        if self.store_decode:
            self.connector.finish_decode(q.query_id)
        self.pages.free_query(q.query_id)
        self.connector.request_finished(q.query_id)
        rec.outputs = list(run.outputs)
        rec.finished_at = self.clock.now()
        rec.segments["decode"] = rec.finished_at - rec.prefill_done_at
        self.finished[q.query_id] = rec.finished_at


def run_engines(engines: list[SimEngine]) -> dict[object, QueryRecord]:
    """Co-schedule several engines, always stepping the one furthest behind."""
    while True:
        live = [e for e in engines if e.pending()]
        if not live:
            break
        e = min(live, key=lambda x: (x.next_time(), x.name))
        if e.next_time() == math.inf:
            raise RuntimeError("queries wait on sessions that never finish")
        e.step()
    out = {}
    for e in engines:
        out.update(e.records)
    return out


def check_call_order(events: list[tuple], num_layers: int) -> list[str]:
    """Audit a connector event log for pipeline-safety violations.

    A layer's compute must start only after that layer's load completed (or
    the query has no load for it), and a layer's store must start only after
    the previous layer's store was waited on.
    """
    problems = []
    loaded: dict = {}
    issued: dict = {}
    store_waited: dict = {}
    blocking_loaded: set = set()
    for _, op, qid, layer, extra in events:
        if op == "load_issue":
            issued.setdefault(qid, set()).add(layer)
        elif op == "load_done":
            if layer is None:
                blocking_loaded.add(qid)
            else:
                loaded.setdefault(qid, set()).add(layer)
        elif op == "compute_start":
            if layer in issued.get(qid, set()) and layer not in loaded.get(qid, set()):
                problems.append(f"{qid}: layer {layer} computed before its load completed")
        elif op == "wait_store_kv":
            store_waited.setdefault(qid, set()).add(layer)
        elif op == "start_store_kv" and layer is not None and layer > 0:
            if layer - 1 not in store_waited.get(qid, set()):
                problems.append(f"{qid}: layer {layer} store started before layer {layer - 1} store was waited")
        elif op == "request_finished":
            for d in (loaded, issued, store_waited):
                d.pop(qid, None)
            blocking_loaded.discard(qid)
    return problems


def cache_free_outputs(model: ModelSpec, queries: list[SimQuery], vocab: int = 32000) -> dict:
    """Outputs of every query on a cache-free engine (the correctness baseline)."""
    from .model import reference_generate

    return {q.query_id: reference_generate(q.tokens, q.max_out, model, vocab) for q in queries}


__all__ = ["SimQuery", "QueryRecord", "SimEngine", "run_engines", "check_call_order", "cache_free_outputs",
           "VirtualClock"]
