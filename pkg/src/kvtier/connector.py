"""Engine-facing connector between paged KV memory and the storage engine.

The engine drives seven calls, in this order for each scheduled query:

1. ``get_num_new_matched_tokens(query)`` when the query is considered,
2. ``update_state_after_alloc(query, blocks, num_external_blocks)`` after
   pages are allocated,
3. ``build_connector_meta(scheduler_output)`` once per scheduling step,
4. ``start_load_kv(meta)`` and ``wait_load_kv(meta, layer)`` around each
   layer's compute,
5. ``start_store_kv(meta, layer)`` and ``wait_store_kv(meta, layer)`` after
   each layer's compute.

In layerwise mode ``start_load_kv`` fetches layer 0 only, and
``wait_load_kv(L)`` returns once layer L is in place after kicking off layer
L+1, so loading the next layer overlaps computing the current one. Stores
trail compute by one layer. Blocking mode loads everything up front and
stores synchronously after the last layer.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kv import ChunkDescriptor, ModelSpec, PagedKVStore
from .sim.clock import Ticket, VirtualClock
from .storage.backends import NotFound
from .storage.chunkfile import CorruptChunk
from .storage.engine import StorageEngine
from .storage.tiers import RAM, TierId
from .tokens import ChunkKey, chunk_keys, longest_prefix_match

logger = logging.getLogger(__name__)

LAYERWISE = "layerwise"
BLOCKING = "blocking"


class InconsistentAlloc(ValueError):
    pass


class ChunkMissing(RuntimeError):
    """A planned chunk could not be read; tokens ``[0, safe_tokens)`` are usable."""

    def __init__(self, key: ChunkKey, safe_tokens: int, layer: int | None = None):
        super().__init__(f"chunk {key!r} missing; safe prefix {safe_tokens} tokens")
        self.key = key
        self.safe_tokens = safe_tokens
        self.layer = layer


@dataclass
class LayerTicket:
    query_id: object
    layer_id: int | None
    direction: str  # "load" | "store"
    ticket: Ticket
    error: BaseException | None = None

    @property
    def done(self) -> bool:
        return self.ticket.done


@dataclass
class SchedulerOutput:
    """Queries scheduled in one engine step (only the ids matter to the connector)."""

    query_ids: list


@dataclass
class ConnectorMetadata:
    query_id: object
    matched_tokens: int
    load_plan: list[ChunkDescriptor]
    store_plan: list[ChunkDescriptor]
    mode: str = LAYERWISE
    # runtime state
    load_tickets: dict[int, LayerTicket] = field(default_factory=dict)
    store_tickets: dict[int, LayerTicket] = field(default_factory=dict)
    safe_tokens: int | None = None
    store_status: dict = field(default_factory=dict)
    peak_load_staging: int = 0
    peak_store_staging: int = 0
    load_seconds: float = 0.0
    store_seconds: float = 0.0
    loaded_from: dict = field(default_factory=dict)
    _writers: dict = field(default_factory=dict, repr=False)
    _sealed: bool = False

    @property
    def loaded_tokens(self) -> int:
        return self.matched_tokens if self.safe_tokens is None else self.safe_tokens


class StagingPool:
    """Byte budget for in-flight layer buffers."""

    def __init__(self, capacity_bytes: int):
        self.capacity_bytes = capacity_bytes
        self.in_use = 0
        self.peak = 0
        self.fallbacks = 0
        self._lock = threading.Lock()

    def try_acquire(self, nbytes: int) -> bool:
        with self._lock:
            if self.in_use + nbytes > self.capacity_bytes:
                return False
            self.in_use += nbytes
            self.peak = max(self.peak, self.in_use)
            return True

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.in_use -= nbytes
            if self.in_use < 0:
                raise RuntimeError("staging released more than acquired")


@dataclass
class _Request:
    query: object
    keys: list[ChunkKey]
    matched: int = 0
    blocks: list[list[int]] | None = None
    external_blocks: int = 0
    prefetch: list = field(default_factory=list)


class _Index:
    """Membership view for prefix matching from one batched contains call."""

    def __init__(self, hits: set[bytes]):
        self.hits = hits

    def __contains__(self, key: ChunkKey) -> bool:
        return key.digest in self.hits


class KVConnector:
    """Connector for one engine.

    Args:
        store: backing storage engine.
        pages: the engine's paged memory.
        clock: the engine clock; background I/O is timed against it.
        mode: default transfer mode for new metadata.
        chunk_size: instance chunk size.
        store_tiers: tiers written by stores (default: the store's defaults).
        staging_bytes: staging pool size; a query that cannot get one
            layer of staging runs in blocking mode instead.
        prefetch_tier: target tier for :meth:`prefetch`.
    """

    def __init__(self, store: StorageEngine, pages: PagedKVStore, clock, *, mode: str = LAYERWISE,
                 chunk_size: int | None = None, store_tiers=None, staging_bytes: int | None = None,
                 prefetch_tier: TierId = RAM, name: str = "engine"):
        if mode not in (LAYERWISE, BLOCKING):
            raise ValueError(f"unknown mode {mode!r}")
        self.store = store
        self.pages = pages
        self.model: ModelSpec = pages.model
        self.clock = clock
        self.mode = mode
        self.chunk_size = chunk_size or store.chunk_size
        if self.chunk_size != store.chunk_size:
            raise ValueError("connector and store disagree on chunk_size")
        self.store_tiers = set(store_tiers) if store_tiers else set(store.default_tiers)
        self.staging = StagingPool(staging_bytes if staging_bytes is not None else 1 << 62)
        self.prefetch_tier = prefetch_tier
        self.name = name
        self.events: list[tuple] = []
        self._reqs: dict[object, _Request] = {}
        self._io = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"{name}-load")
        self._st = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"{name}-store")
        self._log_lock = threading.Lock()

    def close(self) -> None:
        self._io.shutdown(wait=True)
        self._st.shutdown(wait=True)

    @property
    def virtual(self) -> bool:
        return isinstance(self.clock, VirtualClock)

    def log(self, op: str, query_id, layer=None, **extra) -> None:
        with self._log_lock:
            self.events.append((self.clock.now(), op, query_id, layer, extra))

    def _prefer(self) -> list[TierId]:
        return sorted(self.store.backends)

    # 1 -------------------------------------------------------------------

    def get_num_new_matched_tokens(self, query) -> int:
        """Cached prefix length for ``query``, capped so one token is always computed."""
        tokens = query.tokens
        keys = chunk_keys(tokens, self.chunk_size, self.model.model_tag)
        hits = self.store.batch_contains(keys)
        index = _Index({k.digest for k, h in zip(keys, hits) if h})
        matched = longest_prefix_match(tokens, index, self.chunk_size, self.model.model_tag, keys=keys)
        matched = min(matched, max(len(tokens) - 1, 0))
        req = self._reqs.get(query.query_id)
        if req is None or req.query is not query:
            req = self._reqs[query.query_id] = _Request(query, keys)
        req.matched = matched
        self.log("get_num_new_matched_tokens", query.query_id, matched=matched)
        return matched

    # 2 -------------------------------------------------------------------

    def update_state_after_alloc(self, query, blocks, num_external_blocks: int) -> None:
        """Record the query's pages; the first ``num_external_blocks`` per layer come from the cache."""
        req = self._reqs[query.query_id]
        pt = self.model.page_tokens
        needed = -(-req.matched // pt)
        if num_external_blocks != needed:
            raise InconsistentAlloc(f"{num_external_blocks} external blocks, matched tokens need {needed}")
        if len(blocks) != self.model.num_layers or any(len(b) < needed for b in blocks):
            raise InconsistentAlloc(f"allocation has fewer than the {needed} pages per layer the cache hit needs")
        req.blocks = [list(b) for b in blocks]
        req.external_blocks = num_external_blocks
        self.log("update_state_after_alloc", query.query_id, external=num_external_blocks)

    # 3 -------------------------------------------------------------------

    def build_connector_meta(self, scheduler_output: SchedulerOutput) -> list[ConnectorMetadata]:
        """Load and store plans for every scheduled query."""
        out = []
        for qid in scheduler_output.query_ids:
            req = self._reqs[qid]
            n = len(req.query.tokens)
            hits = self.store.batch_contains(req.keys)
            load, store = [], []
            pt = self.model.page_tokens
            for key, tiers in zip(req.keys, hits):
                s = key.chunk_index * self.chunk_size
                e = min(s + self.chunk_size, n)
                pages = tuple(tuple(b[s // pt:-(-e // pt)]) for b in req.blocks)
                if s < req.matched:
                    stop = min(e, req.matched)
                    load.append(ChunkDescriptor(key, s, stop, (0, self.model.num_layers - 1),
                                                min(tiers) if tiers else None, pages))
                elif not tiers:
                    store.append(ChunkDescriptor(key, s, e, (0, self.model.num_layers - 1), None, pages))
            meta = ConnectorMetadata(qid, req.matched, load, store, self.mode)
            self.log("build_connector_meta", qid, load=len(load), store=len(store))
            out.append(meta)
        return out

    # 4: loading -----------------------------------------------------------

    def _layer_bytes(self, plan) -> int:
        return sum(d.token_count for d in plan) * self.model.bytes_per_token_per_layer

    def _load_layer(self, meta: ConnectorMetadata, layer: int, plan) -> float:
        """Read one layer of every planned chunk into pages; returns modelled I/O seconds."""
        secs = 0.0
        bpt = self.model.bytes_per_token_per_layer
        for d in plan:
            try:
                r = self.store.read_layer(d.key, layer, self._prefer())
            except (NotFound, CorruptChunk):
                raise ChunkMissing(d.key, d.start, layer) from None
            self.pages.write_tokens(meta.query_id, layer, d.start, r.data[:d.token_count * bpt])
            if layer == 0:
                meta.loaded_from[str(r.tier)] = meta.loaded_from.get(str(r.tier), 0) + d.token_count
            secs += r.seconds
        return secs

    def _truncate(self, meta: ConnectorMetadata, safe: int) -> list[ChunkDescriptor]:
        meta.safe_tokens = safe if meta.safe_tokens is None else min(meta.safe_tokens, safe)
        return [d for d in meta.load_plan if d.stop <= meta.safe_tokens]

    def _issue_load(self, meta: ConnectorMetadata, layer: int) -> None:
        """Start one layer's load; without staging room it runs synchronously."""
        plan = self._truncate(meta, meta.safe_tokens) if meta.safe_tokens is not None else meta.load_plan
        nbytes = self._layer_bytes(plan)
        staged = self.staging.try_acquire(nbytes)
        if staged:
            meta.peak_load_staging = max(meta.peak_load_staging, nbytes)
        else:
            self.staging.fallbacks += 1
        issued = self.clock.now()

        def work():
            try:
                return self._load_layer(meta, layer, plan)
            finally:
                if staged:
                    self.staging.release(nbytes)

        self.log("load_issue", meta.query_id, layer, staged=staged)
        if self.virtual or not staged:
            fut: Future = Future()
            try:
                fut.set_result(work())
            except ChunkMissing as e:
                fut.set_exception(e)
            secs = fut.result() if fut.exception() is None else 0.0
            ready = self.clock.schedule(f"{self.name}:load", secs) if self.virtual else issued
        else:
            fut = self._io.submit(work)
            ready = issued
        meta.load_tickets[layer] = LayerTicket(meta.query_id, layer, "load", Ticket(issued, ready, fut, "load"))

    def start_load_kv(self, meta: ConnectorMetadata) -> None:
        """Begin loading the load plan into the query's pages.

        Layerwise mode issues layer 0 and returns. Blocking mode, or a query
        whose first layer does not fit in the staging pool, loads every layer
        before returning.
        """
        self.log("start_load_kv", meta.query_id)
        if not meta.load_plan:
            return
        if meta.mode == LAYERWISE:
            if self._layer_bytes(meta.load_plan) <= self.staging.capacity_bytes - self.staging.in_use:
                self._issue_load(meta, 0)
                return
            self.staging.fallbacks += 1
            meta.mode = BLOCKING
            logger.debug("staging exhausted; %r falls back to blocking mode", meta.query_id)
        issued = self.clock.now()
        secs = 0.0
        bpt = self.model.bytes_per_token_per_layer
        missing = None
        for d in meta.load_plan:
            try:
                r = self.store.read(d.key, self._prefer())
            except (NotFound, CorruptChunk):
                missing = ChunkMissing(d.key, d.start)
                break
            rows = r.data.reshape(self.model.num_layers, -1)
            for layer in range(self.model.num_layers):
                self.pages.write_tokens(meta.query_id, layer, d.start, rows[layer, :d.token_count * bpt])
            meta.loaded_from[str(r.tier)] = meta.loaded_from.get(str(r.tier), 0) + d.token_count
            secs += r.seconds
        meta.peak_load_staging = max(meta.peak_load_staging,
                                     max((d.token_count for d in meta.load_plan), default=0) * self.model.bytes_per_token)
        ready = self.clock.schedule(f"{self.name}:load", secs) if self.virtual else self.clock.now()
        t = Ticket(issued, ready, None, "load")
        self.clock.wait(t)
        meta.load_seconds += secs
        for layer in range(self.model.num_layers):
            meta.load_tickets[layer] = LayerTicket(meta.query_id, layer, "load", t)
        self.log("load_done", meta.query_id, None, seconds=secs)
        if missing is not None:
            self._truncate(meta, missing.safe_tokens)
            self.log("chunk_missing", meta.query_id, None, safe=missing.safe_tokens)
            raise missing

    def wait_load_kv(self, meta: ConnectorMetadata, layer_id: int) -> None:
        """Return once layer ``layer_id`` is in place; in layerwise mode start the next layer.

        Raises ChunkMissing (once) when a chunk disappeared; later layers are
        then loaded only up to the safe prefix.
        """
        t = meta.load_tickets.get(layer_id)
        if t is None or t.done or meta.mode == BLOCKING:
            return
        failure = None
        try:
            secs = self.clock.wait(t.ticket)
            meta.load_seconds += secs or 0.0
        except ChunkMissing as e:
            failure = e
            t.error = e
            t.ticket.done = True
            self._truncate(meta, e.safe_tokens)
        self.log("load_done", meta.query_id, layer_id)
        if layer_id + 1 < self.model.num_layers:
            self._issue_load(meta, layer_id + 1)
        self.log("wait_load_kv", meta.query_id, layer_id)
        if failure is not None:
            self.log("chunk_missing", meta.query_id, layer_id, safe=failure.safe_tokens)
            raise failure

    # 5: storing -----------------------------------------------------------

    def _writer(self, meta: ConnectorMetadata, d: ChunkDescriptor):
        w = meta._writers.get(d.key.digest)
        if w is None:
            w = meta._writers[d.key.digest] = self.store.open_writer(d.key, d.token_count, self.store_tiers)
        return w

    def start_store_kv(self, meta: ConnectorMetadata, layer_id: int | None = None) -> None:
        """Offload computed KV for the store plan.

        Layerwise: one layer (the previous layer's store must have been
        waited on). Blocking: all layers, synchronously.
        """
        self.log("start_store_kv", meta.query_id, layer_id)
        if not meta.store_plan:
            return
        if meta.mode == BLOCKING or layer_id is None:
            self._store_blocking(meta)
            return
        prev = meta.store_tickets.get(layer_id - 1)
        if prev is not None and not prev.done:
            raise RuntimeError(f"layer {layer_id - 1} store not waited before layer {layer_id}")
        nbytes = self._layer_bytes(meta.store_plan)
        staged = self.staging.try_acquire(nbytes)
        if staged:
            meta.peak_store_staging = max(meta.peak_store_staging, nbytes)
        else:
            self.staging.fallbacks += 1
        issued = self.clock.now()
        pending = [len(meta.store_plan)]
        lock = threading.Lock()

        def released():
            with lock:
                pending[0] -= 1
                last = pending[0] == 0
            if last and staged:
                self.staging.release(nbytes)

        futures = []
        for d in meta.store_plan:
            row = self.pages.read_tokens(meta.query_id, layer_id, d.start, d.stop).reshape(-1)
            futures.append(self._writer(meta, d).write_layer(layer_id, row, released))
        if self.virtual or not staged:
            secs = sum(f.result() for f in futures)
            ready = self.clock.schedule(f"{self.name}:store", secs) if self.virtual else issued
            fut: Future = Future()
            fut.set_result(secs)
        else:
            fut = _all(futures)
            ready = issued
        meta.store_tickets[layer_id] = LayerTicket(meta.query_id, layer_id, "store", Ticket(issued, ready, fut, "store"))

    def _store_blocking(self, meta: ConnectorMetadata) -> None:
        issued = self.clock.now()
        secs = 0.0
        for d in meta.store_plan:
            w = self._writer(meta, d)
            for layer in range(self.model.num_layers):
                w.write_layer(layer, self.pages.read_tokens(meta.query_id, layer, d.start, d.stop).reshape(-1))
        meta.peak_store_staging = max(meta.peak_store_staging,
                                      sum(d.token_count for d in meta.store_plan) * self.model.bytes_per_token)
        results = self._seal(meta)
        secs = sum(r.seconds for r in results)
        ready = self.clock.schedule(f"{self.name}:store", secs) if self.virtual else self.clock.now()
        t = Ticket(issued, ready, None, "store")
        self.clock.wait(t)
        meta.store_seconds += secs
        for layer in range(self.model.num_layers):
            meta.store_tickets[layer] = LayerTicket(meta.query_id, layer, "store", t)
        self.log("store_done", meta.query_id, None)

    def _seal(self, meta: ConnectorMetadata):
        if meta._sealed:
            return []
        meta._sealed = True
        results = []
        for d in meta.store_plan:
            w = meta._writers.get(d.key.digest)
            if w is None:
                continue
            r = w.seal().result()
            meta.store_status[d.key.hex] = {str(t): s for t, s in r.status.items()}
            results.append(r)
        return results

    def wait_store_kv(self, meta: ConnectorMetadata, layer_id: int) -> None:
        """Wait for a layer's store; the last layer also commits every chunk."""
        t = meta.store_tickets.get(layer_id)
        if t is not None and not t.done:
            secs = self.clock.wait(t.ticket)
            meta.store_seconds += secs or 0.0
            self.log("store_done", meta.query_id, layer_id)
        if layer_id == self.model.num_layers - 1 and meta.store_plan and not meta._sealed:
            self._seal(meta)
        self.log("wait_store_kv", meta.query_id, layer_id)

    # lifecycle -------------------------------------------------------------

    def request_finished(self, query_id) -> None:
        self._reqs.pop(query_id, None)
        self.log("request_finished", query_id)

    def prefetch(self, query) -> int:
        """Promote the query's cached chunks into the prefetch tier ahead of scheduling.

        Returns how many promotions were started. Virtual-time engines
        complete promotions immediately.
        """
        keys = chunk_keys(query.tokens, self.chunk_size, self.model.model_tag)
        hits = self.store.batch_contains(keys)
        started = 0
        req = self._reqs.setdefault(query.query_id, _Request(query, keys))
        for key, tiers in zip(keys, hits):
            if not tiers:
                break
            if self.prefetch_tier in tiers or min(tiers) < self.prefetch_tier:
                continue
            fut = self.store.promote(key, self.prefetch_tier)
            if self.virtual:
                fut.result()
            req.prefetch.append(fut)
            started += 1
        self.log("prefetch", query.query_id, started=started)
        return started

    # decode-time storing ---------------------------------------------------

    def begin_decode(self, query_id, prefix_tokens) -> None:
        n = len(prefix_tokens)
        tail = n % self.chunk_size
        tail_kv = None
        if tail:
            tail_kv = np.stack([self.pages.read_tokens(query_id, layer, n - tail, n)
                                for layer in range(self.model.num_layers)])
        self.store.begin_decode(query_id, prefix_tokens, tail_kv)

    def save_decode_kv(self, query_id, token: int, kv: np.ndarray) -> None:
        key = self.store.decode_append(query_id, [token], kv, self.store_tiers)
        if key is not None and self.virtual:
            for f in self.store._decode_puts.get(query_id, []):
                f.result()

    def finish_decode(self, query_id) -> list:
        self.store.finish_decode(query_id, self.store_tiers)
        results = [f.result() for f in self.store.decode_puts(query_id)]
        return results


def _all(futures: list[Future]) -> Future:
    out: Future = Future()
    if not futures:
        out.set_result(0.0)
        return out
    left = [len(futures)]
    lock = threading.Lock()

    def done(_):
        with lock:
            left[0] -= 1
            last = left[0] == 0
        if last:
            try:
                out.set_result(sum(f.result() for f in futures))
            except BaseException as e:  # noqa: BLE001
                out.set_exception(e)

    for f in futures:
        f.add_done_callback(done)
    return out


class NoOpConnector:
    """Connector that never finds or stores anything (a cache-free engine)."""

    mode = BLOCKING

    def __init__(self, model: ModelSpec | None = None, clock=None):
        self.events: list[tuple] = []
        self.clock = clock

    def log(self, op, query_id, layer=None, **extra):
        self.events.append((self.clock.now() if self.clock else 0.0, op, query_id, layer, extra))

    def close(self):
        pass

    def get_num_new_matched_tokens(self, query) -> int:
        self.log("get_num_new_matched_tokens", query.query_id, matched=0)
        return 0

    def update_state_after_alloc(self, query, blocks, num_external_blocks: int) -> None:
        if num_external_blocks:
            raise InconsistentAlloc("no-op connector has no external blocks")
        self.log("update_state_after_alloc", query.query_id, external=0)

    def build_connector_meta(self, scheduler_output: SchedulerOutput) -> list[ConnectorMetadata]:
        return [ConnectorMetadata(q, 0, [], [], BLOCKING) for q in scheduler_output.query_ids]

    def start_load_kv(self, meta):
        self.log("start_load_kv", meta.query_id)

    def wait_load_kv(self, meta, layer_id):
        pass

    def start_store_kv(self, meta, layer_id=None):
        self.log("start_store_kv", meta.query_id, layer_id)

    def wait_store_kv(self, meta, layer_id):
        pass

    def request_finished(self, query_id):
        pass

    def prefetch(self, query):
        return 0

    def begin_decode(self, query_id, prefix_tokens):
        pass

    def save_decode_kv(self, query_id, token, kv):
        pass

    def finish_decode(self, query_id):
        return []
