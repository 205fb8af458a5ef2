"""Hierarchical chunk store over RAM, local disk and remote tiers."""

from __future__ import annotations

import itertools
import logging
import threading
import time
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from ..kv import KVChunk, ModelSpec
from ..tokens import DEFAULT_CHUNK_SIZE, ChunkKey
from . import codecs
from .backends import NotFound, TierFull
from .buffers import BufferPool, SharedBuffer
from .chunkfile import ChunkHeader, CorruptChunk, combine_digests, row_digest, tag_hash
from .decode import DecodeAccumulator
from .tiers import DISK, RAM, TierId

logger = logging.getLogger(__name__)


class DuplicateKey(RuntimeError):
    pass


@dataclass
class TierCopy:
    nbytes: int
    header: ChunkHeader
    checksum: int = 0
    pinned: bool = False
    committed: bool = False
    codec: str | None = None


@dataclass
class CacheEntry:
    key: ChunkKey
    token_count: int
    copies: dict[TierId, TierCopy] = field(default_factory=dict)
    share_count: int = 0
    last_touch: int = 0

    @property
    def tiers(self) -> set[TierId]:
        return {t for t, c in self.copies.items() if c.committed}

    def pinned_on(self, tier: TierId) -> bool:
        c = self.copies.get(tier)
        return bool(c and c.pinned)


@dataclass(frozen=True)
class StoreEvent:
    kind: str  # "stored" | "evicted"
    key: ChunkKey
    tier: TierId
    token_count: int
    pinned: bool = False
    share_count: int = 0


@dataclass
class PutResult:
    key: ChunkKey
    status: dict[TierId, str] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(s in ("ok", "exists") for s in self.status.values())

    @property
    def stored_tiers(self) -> set[TierId]:
        return {t for t, s in self.status.items() if s in ("ok", "exists")}


@dataclass
class ReadResult:
    data: np.ndarray
    tier: TierId
    seconds: float
    token_count: int


def _resolved(value) -> Future:
    f: Future = Future()
    f.set_result(value)
    return f


def _gather(futures: list[Future], combine: Callable[[list], object]) -> Future:
    """Future resolving to ``combine(results)`` once every input future is done."""
    out: Future = Future()
    if not futures:
        out.set_result(combine([]))
        return out
    remaining = [len(futures)]
    lock = threading.Lock()

    def done(_):
        with lock:
            remaining[0] -= 1
            last = remaining[0] == 0
        if last:
            try:
                out.set_result(combine([f.result() for f in futures]))
            except BaseException as e:  # noqa: BLE001 - surfaced through the future
                out.set_exception(e)

    for f in futures:
        f.add_done_callback(done)
    return out


class StorageEngine:
    """Chunk store spanning several tiers.

    Local tiers (RAM pool, disk) are indexed here; remote tiers are consulted
    through their backend because other instances may write to them.

    Args:
        model: KV layout of the chunks this store accepts.
        backends: one backend per tier.
        chunk_size: instance-wide chunk size in tokens.
        default_tiers: where ``put`` writes when no tiers are given.
        demote_on_evict: copy RAM victims to disk instead of discarding them.
        realtime: sleep out each backend's :class:`DeviceModel` time.
        audit: keep every event in :attr:`event_log`.
    """

    def __init__(
        self,
        model: ModelSpec,
        backends: Iterable,
        *,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        default_tiers: Iterable[TierId] | None = None,
        demote_on_evict: bool = False,
        realtime: bool = False,
        max_workers: int = 4,
        audit: bool = False,
    ):
        model.check_chunk_size(chunk_size)
        self.model = model
        self.chunk_size = chunk_size
        self.backends = {b.tier: b for b in backends}
        if not self.backends:
            raise ValueError("a storage engine needs at least one tier")
        self.default_tiers = set(default_tiers) if default_tiers else {min(self.backends)}
        self.demote_on_evict = demote_on_evict
        self.realtime = realtime
        self.audit = audit
        self.buffers = BufferPool()
        self.event_log: list[StoreEvent] = []
        self.listeners: list[Callable[[StoreEvent], None]] = []
        self.bytes_written: dict[TierId, int] = {t: 0 for t in self.backends}
        self.bytes_read: dict[TierId, int] = {t: 0 for t in self.backends}
        self._index: dict[bytes, CacheEntry] = {}
        self._lru: dict[TierId, OrderedDict[bytes, None]] = {t: OrderedDict() for t in self.backends}
        self._clock = itertools.count(1)
        self._lock = threading.RLock()
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="kvtier-io")
        self._decoders: dict[object, DecodeAccumulator] = {}
        self._decode_puts: dict[object, list[Future]] = {}
        self._tag_hash = tag_hash(model.model_tag)

    def close(self) -> None:
        self._pool.shutdown(wait=True)
        for b in self.backends.values():
            close = getattr(b, "close", None)
            if close:
                close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- helpers -------------------------------------------------------------

    @property
    def local_tiers(self) -> list[TierId]:
        return sorted(t for t in self.backends if t.kind != "remote")

    @property
    def remote_tiers(self) -> list[TierId]:
        return sorted(t for t in self.backends if t.kind == "remote")

    def _order(self, prefer: Iterable[TierId] | None) -> list[TierId]:
        if prefer is None:
            return sorted(self.backends)
        return [t for t in prefer if t in self.backends]

    def _header(self, key: ChunkKey, token_count: int) -> ChunkHeader:
        return ChunkHeader(key.digest, self._tag_hash, token_count, self.model.num_layers,
                           self.model.bytes_per_token_per_layer)

    def _io(self, tier: TierId, nbytes: int, started: float) -> float:
        dev = self.backends[tier].device
        if self.realtime:
            return dev.pace(nbytes, started)
        return dev.seconds(nbytes)

    def _emit(self, kind: str, entry: CacheEntry, tier: TierId, copy: TierCopy | None = None) -> None:
        ev = StoreEvent(kind, entry.key, tier, entry.token_count,
                        pinned=bool(copy and copy.pinned), share_count=entry.share_count)
        if self.audit:
            self.event_log.append(ev)
        for fn in self.listeners:
            fn(ev)

    def _touch(self, entry: CacheEntry, tier: TierId) -> None:
        entry.last_touch = next(self._clock)
        lru = self._lru.get(tier)
        if lru is not None and entry.key.digest in lru:
            lru.move_to_end(entry.key.digest)

    def entry(self, key: ChunkKey) -> CacheEntry | None:
        return self._index.get(key.digest)

    def keys(self, tier: TierId | None = None) -> list[ChunkKey]:
        with self._lock:
            return [e.key for e in self._index.values() if tier is None or tier in e.tiers]

    def used_bytes(self, tier: TierId) -> int:
        return self.backends[tier].used_bytes

    # -- membership ----------------------------------------------------------

    def contains(self, key: ChunkKey) -> set[TierId]:
        with self._lock:
            e = self._index.get(key.digest)
            tiers = set(e.tiers) if e else set()
        for t in self.remote_tiers:
            if self.backends[t].exists([key.digest])[0]:
                tiers.add(t)
        return tiers

    def batch_contains(self, keys: list[ChunkKey]) -> list[set[TierId]]:
        with self._lock:
            out = []
            for k in keys:
                e = self._index.get(k.digest)
                out.append(set(e.tiers) if e else set())
        for t in self.remote_tiers:
            for s, hit in zip(out, self.backends[t].exists([k.digest for k in keys])):
                if hit:
                    s.add(t)
        return out

    def __contains__(self, key: ChunkKey) -> bool:
        return bool(self.contains(key))

    # -- eviction --------------------------------------------------------------

    def _evictable(self, entry: CacheEntry, tier: TierId) -> bool:
        c = entry.copies.get(tier)
        return bool(c and c.committed and not c.pinned and entry.share_count == 0)

    def evict_until(self, tier: TierId, bytes_needed: int) -> int:
        """Evict least-recently-touched, unpinned, unshared entries from ``tier``.

        Stops as soon as ``bytes_needed`` more bytes fit; returns bytes freed.
        """
        backend = self.backends[tier]
        freed = 0
        with self._lock:
            while backend.bytes_to_free(bytes_needed) > 0:
                victim = next(
                    (self._index[d] for d in self._lru[tier] if self._evictable(self._index[d], tier)),
                    None,
                )
                if victim is None:
                    break
                freed += self._drop_copy(victim, tier, demote=self.demote_on_evict)
        return freed

    def _drop_copy(self, entry: CacheEntry, tier: TierId, demote: bool = False) -> int:
        copy = entry.copies[tier]
        backend = self.backends[tier]
        if demote and tier == RAM and DISK in self.backends and DISK not in entry.copies:
            try:
                self._demote(entry, copy)
            except TierFull:
                logger.debug("no disk room to demote %r", entry.key)
        freed = backend.stored_size(entry.key.digest)
        backend.delete(entry.key.digest)
        del entry.copies[tier]
        self._lru[tier].pop(entry.key.digest, None)
        self._emit("evicted", entry, tier, copy)
        if not entry.copies:
            del self._index[entry.key.digest]
        return freed

    def _demote(self, entry: CacheEntry, copy: TierCopy) -> None:
        src = self.backends[RAM]
        blob = src.read_all(entry.key.digest)
        self.evict_until(DISK, self.backends[DISK].reserve_size(copy.header))
        disk = self.backends[DISK]
        disk.reserve(entry.key.digest, copy.header)
        disk.write(entry.key.digest, 0, blob)
        disk.commit(entry.key.digest, copy.header, copy.checksum)
        entry.copies[DISK] = TierCopy(blob.size, copy.header, copy.checksum, committed=True, codec=copy.codec)
        self._lru[DISK][entry.key.digest] = None
        self._emit("stored", entry, DISK)

    # -- writes ----------------------------------------------------------------

    def open_writer(self, key: ChunkKey, token_count: int, tiers: Iterable[TierId] | None = None,
                    pin: bool = False) -> ChunkWriter:
        """Start a chunk that is filled layer by layer and becomes visible on :meth:`ChunkWriter.seal`."""
        return ChunkWriter(self, key, token_count, set(tiers) if tiers else set(self.default_tiers), pin)

    def put(self, chunk: KVChunk, tiers: Iterable[TierId] | None = None, pin: bool = False) -> Future:
        """Store a sealed chunk on every tier in ``tiers``.

        One :class:`SharedBuffer` backs all tier writes; the returned future
        resolves to a :class:`PutResult` with a status per tier.
        """
        writer = self.open_writer(chunk.key, chunk.token_count, tiers, pin)
        writer.write_all(chunk.payload)
        return writer.seal()

    def batch_put(self, items: Iterable[tuple[KVChunk, Iterable[TierId] | None]], pin: bool = False) -> Future:
        """Issue all puts at once so writes to different tiers overlap."""
        futures = [self.put(chunk, tiers, pin) for chunk, tiers in items]
        return _gather(futures, list)

    # -- reads -----------------------------------------------------------------

    def _acquire(self, key: ChunkKey, order: list[TierId]):
        with self._lock:
            e = self._index.get(key.digest)
            if e is not None:
                for t in order:
                    c = e.copies.get(t)
                    if c is not None and c.committed:
                        e.share_count += 1
                        self._touch(e, t)
                        return e, t, c
        return None

    def _release(self, entry: CacheEntry) -> None:
        with self._lock:
            entry.share_count -= 1

    def read_layer(self, key: ChunkKey, layer: int, prefer: Iterable[TierId] | None = None) -> ReadResult:
        """One layer row of a chunk from the fastest tier holding it."""
        order = self._order(prefer)
        local = [t for t in order if t.kind != "remote"]
        while True:
            got = self._acquire(key, local)
            if got is None:
                break
            entry, tier, copy = got
            try:
                started = time.perf_counter()
                if copy.codec:
                    full = self._decoded(tier, key, copy)
                    row = full.reshape(self.model.num_layers, -1)[layer].copy()
                else:
                    lb = copy.header.layer_bytes
                    row = self.backends[tier].read(key.digest, layer * lb, lb)
                self.bytes_read[tier] += row.nbytes
                return ReadResult(row, tier, self._io(tier, row.nbytes, started), entry.token_count)
            except (CorruptChunk, FileNotFoundError, NotFound) as e:
                logger.warning("dropping %r from %s: %s", key, tier, e)
                self._drop_bad(entry, tier)
                local.remove(tier)
            finally:
                self._release(entry)
        for tier in (t for t in order if t.kind == "remote"):
            started = time.perf_counter()
            try:
                row, token_count = self.backends[tier].read_layer(key.digest, layer)
            except NotFound:
                continue
            self.bytes_read[tier] += row.nbytes
            return ReadResult(row, tier, self._io(tier, row.nbytes, started), token_count)
        raise NotFound(repr(key))

    def read(self, key: ChunkKey, prefer: Iterable[TierId] | None = None) -> ReadResult:
        """Whole chunk payload (decoded, checksum-verified on disk)."""
        order = self._order(prefer)
        local = [t for t in order if t.kind != "remote"]
        while True:
            got = self._acquire(key, local)
            if got is None:
                break
            entry, tier, copy = got
            try:
                started = time.perf_counter()
                data = self._decoded(tier, key, copy)
                self.bytes_read[tier] += data.nbytes
                return ReadResult(data, tier, self._io(tier, data.nbytes, started), entry.token_count)
            except (CorruptChunk, FileNotFoundError, NotFound) as e:
                logger.warning("dropping %r from %s: %s", key, tier, e)
                self._drop_bad(entry, tier)
                local.remove(tier)
            finally:
                self._release(entry)
        for tier in (t for t in order if t.kind == "remote"):
            started = time.perf_counter()
            try:
                data, token_count = self.backends[tier].read_chunk(key.digest)
            except (NotFound, CorruptChunk):
                continue
            self.bytes_read[tier] += data.nbytes
            return ReadResult(data, tier, self._io(tier, data.nbytes, started), token_count)
        raise NotFound(repr(key))

    def get(self, key: ChunkKey, prefer: Iterable[TierId] | None = None) -> KVChunk:
        r = self.read(key, prefer)
        return KVChunk(key, r.token_count, self.model.bytes_per_token_per_layer, r.data)

    def batch_get(self, keys: Iterable[ChunkKey], prefer: Iterable[TierId] | None = None) -> list[Future]:
        prefer = list(prefer) if prefer is not None else None
        return [self._pool.submit(self.get, k, prefer) for k in keys]

    def _decoded(self, tier: TierId, key: ChunkKey, copy: TierCopy) -> np.ndarray:
        backend = self.backends[tier]
        blob = backend.read_all(key.digest)
        if copy.codec:
            return codecs.get_codec(copy.codec).decode(blob)
        return blob

    def _drop_bad(self, entry: CacheEntry, tier: TierId) -> None:
        with self._lock:
            if tier in entry.copies:
                entry.copies[tier].pinned = False
                self._drop_copy(entry, tier)

    # -- control ops -----------------------------------------------------------

    def pin(self, key: ChunkKey, tier: TierId, on: bool = True) -> None:
        if tier.kind == "remote":
            if not self.backends[tier].pin(key.digest, on):
                raise NotFound(repr(key))
            return
        with self._lock:
            e = self._index.get(key.digest)
            c = e.copies.get(tier) if e else None
            if c is None or not c.committed:
                raise NotFound(f"{key!r} not on {tier}")
            c.pinned = on

    def clear_report(self, keys: Iterable[ChunkKey], tier: TierId) -> dict[str, int]:
        removed = refused = missing = 0
        if tier.kind == "remote":
            backend = self.backends[tier]
            for k in keys:
                r = backend.delete(k.digest)
                removed += r == "removed"
                refused += r == "refused"
                missing += r == "missing"
            return {"removed": removed, "refused": refused, "missing": missing}
        with self._lock:
            for k in keys:
                e = self._index.get(k.digest)
                c = e.copies.get(tier) if e else None
                if c is None or not c.committed:
                    missing += 1
                elif c.pinned or e.share_count:
                    refused += 1
                else:
                    self._drop_copy(e, tier)
                    removed += 1
        return {"removed": removed, "refused": refused, "missing": missing}

    def clear(self, keys: Iterable[ChunkKey], tier: TierId) -> int:
        """Remove ``keys`` from ``tier``; pinned or in-use entries are refused."""
        return self.clear_report(keys, tier)["removed"]

    def compress_entry(self, key: ChunkKey, tier: TierId, codec: str) -> int:
        """Re-encode one stored copy with ``codec``; returns the new stored payload size."""
        target = codecs.get_codec(codec)
        if tier.kind == "remote":
            return self.backends[tier].compress(key.digest, codec)
        with self._lock:
            e = self._index.get(key.digest)
            c = e.copies.get(tier) if e else None
            if c is None or not c.committed:
                raise NotFound(f"{key!r} not on {tier}")
            e.share_count += 1
        try:
            raw = self._decoded(tier, key, c)
            blob = target.encode(raw) if codec != "identity" else raw
            header = self._header(key, e.token_count)
            if codec != "identity":
                header.codec = target.code
                header.encoded_len = blob.size
                rows = [blob]
            else:
                rows = blob.reshape(self.model.num_layers, -1)
            checksum = combine_digests([row_digest(r) for r in rows])
            with self._lock:
                self.backends[tier].replace(key.digest, header, blob, checksum)
                c.header, c.checksum, c.nbytes = header, checksum, blob.size
                c.codec = codec if codec != "identity" else None
                c.committed = True
            return blob.size
        finally:
            self._release(e)

    def codec_of(self, key: ChunkKey, tier: TierId) -> str:
        e = self._index.get(key.digest)
        c = e.copies.get(tier) if e else None
        if c is None:
            raise NotFound(repr(key))
        return c.codec or "identity"

    def promote(self, key: ChunkKey, target: TierId = RAM) -> Future:
        """Copy ``key`` into ``target`` from a slower tier, in the background."""
        def run():
            if target in self.contains(key):
                return PutResult(key, {target: "exists"})
            chunk = self.get(key, [t for t in self._order(None) if t != target])
            return self.put(chunk, {target}).result()
        return self._pool.submit(run)

    # -- delayed decode storing ------------------------------------------------

    def begin_decode(self, query_id, prefix_tokens, tail_kv: np.ndarray | None = None) -> None:
        """Start accumulating decode KV for ``query_id``.

        ``prefix_tokens`` is the full token sequence so far; if it ends in a
        partial chunk, ``tail_kv`` holds that chunk's KV (``(num_layers, T, bpt)``)
        so the first flush covers a whole chunk.
        """
        self._decoders[query_id] = DecodeAccumulator(
            query_id, self.model, self.chunk_size, prefix_tokens, tail_kv)
        self._decode_puts.setdefault(query_id, [])

    def decode_append(self, query_id, token_ids, kv: np.ndarray, tiers=None) -> ChunkKey | None:
        """Append KV for new decode tokens; stores nothing until a chunk fills."""
        chunk = self._decoders[query_id].append(token_ids, kv)
        if chunk is None:
            return None
        self._decode_puts[query_id].append(self.put(chunk, tiers))
        return chunk.key

    def finish_decode(self, query_id, tiers=None) -> ChunkKey | None:
        acc = self._decoders.pop(query_id)
        chunk = acc.finish()
        if chunk is not None:
            self._decode_puts[query_id].append(self.put(chunk, tiers))
        return chunk.key if chunk is not None else None

    def decode_puts(self, query_id) -> list[Future]:
        return self._decode_puts.pop(query_id, [])


class ChunkWriter:
    """Writes one chunk into several tiers, one layer row at a time.

    Space is reserved on every tier when the writer opens; rows go out on the
    store's worker pool, each tier as its own task so tiers proceed
    concurrently. Nothing is visible to readers until :meth:`seal`.
    """

    def __init__(self, store: StorageEngine, key: ChunkKey, token_count: int, tiers: set[TierId], pin: bool):
        self.store = store
        self.key = key
        self.token_count = token_count
        self.pin = pin
        self.header = store._header(key, token_count)
        self.status: dict[TierId, str] = {}
        self.seconds: dict[TierId, float] = {}
        self._rows: dict[int, bytes] = {}
        self._futures: list[Future] = []
        self._tiers: list[TierId] = []
        self._entry: CacheEntry | None = None
        self._sealed = False
        self._open(tiers)

    def _open(self, tiers: set[TierId]) -> None:
        store = self.store
        for tier in sorted(tiers):
            if tier not in store.backends:
                self.status[tier] = "error: no such tier"
                continue
            backend = store.backends[tier]
            if tier.kind == "remote":
                if backend.exists([self.key.digest])[0]:
                    self.status[tier] = "exists"
                    continue
                backend.reserve(self.key.digest, self.header)
                self._tiers.append(tier)
                continue
            with store._lock:
                e = store._index.get(self.key.digest)
                if e is not None and tier in e.copies:
                    self.status[tier] = "exists"
                    continue
                need = backend.reserve_size(self.header)
                store.evict_until(tier, need)
                try:
                    backend.reserve(self.key.digest, self.header)
                except TierFull:
                    self.status[tier] = "full"
                    continue
                if e is None:
                    e = store._index[self.key.digest] = CacheEntry(self.key, self.token_count)
                e.copies[tier] = TierCopy(need, self.header, pinned=self.pin)
                if self._entry is None:
                    e.share_count += 1  # in use until sealed
                self._entry = e
                self._tiers.append(tier)
        for t in self._tiers:
            self.seconds[t] = 0.0

    @property
    def tiers(self) -> list[TierId]:
        return list(self._tiers)

    def _write_task(self, tier: TierId, layer: int, buf: SharedBuffer) -> float:
        try:
            started = time.perf_counter()
            data = buf.data
            lb = self.header.layer_bytes
            self.store.backends[tier].write(self.key.digest, layer * lb, data)
            self.store.bytes_written[tier] += data.nbytes
            t = self.store._io(tier, data.nbytes, started)
            self.seconds[tier] += t
            return t
        finally:
            buf.release()

    def write_layer(self, layer: int, data: np.ndarray, on_release: Callable[[], None] | None = None) -> Future:
        """Queue one layer row; resolves to the modelled I/O seconds (max over tiers)."""
        if self._sealed:
            raise RuntimeError("writer already sealed")
        row = np.ascontiguousarray(data, dtype=np.uint8).reshape(-1)
        if row.size != self.header.layer_bytes:
            raise ValueError(f"layer row is {row.size} bytes, expected {self.header.layer_bytes}")
        self._rows[layer] = row_digest(row)
        if not self._tiers:
            if on_release:
                on_release()
            return _resolved(0.0)
        buf = self.store.buffers.share(row, len(self._tiers))
        if on_release:
            buf.on_drop(on_release)
        fs = [self.store._pool.submit(self._write_task, t, layer, buf) for t in self._tiers]
        self._futures.extend(fs)
        return _gather(fs, lambda ts: max(ts, default=0.0))

    def write_all(self, payload: np.ndarray) -> Future:
        """All layer rows in one task per tier, sharing one buffer."""
        payload = np.asarray(payload, dtype=np.uint8).reshape(self.store.model.num_layers, -1)
        for i in range(payload.shape[0]):
            self._rows[i] = row_digest(payload[i])
        if not self._tiers:
            return _resolved(0.0)
        buf = self.store.buffers.share(payload, len(self._tiers))

        def task(tier):
            try:
                started = time.perf_counter()
                self.store.backends[tier].write(self.key.digest, 0, buf.data)
                self.store.bytes_written[tier] += payload.nbytes
                t = self.store._io(tier, payload.nbytes, started)
                self.seconds[tier] += t
                return t
            finally:
                buf.release()

        fs = [self.store._pool.submit(task, t) for t in self._tiers]
        self._futures.extend(fs)
        return _gather(fs, lambda ts: max(ts, default=0.0))

    def seal(self) -> Future:
        """Commit on every tier once all rows landed; resolves to a :class:`PutResult`."""
        if self._sealed:
            raise RuntimeError("writer already sealed")
        self._sealed = True
        pending = list(self._futures)

        def finish(_results):
            return self._commit(pending)

        return _gather(pending, finish)

    def _commit(self, pending: list[Future]) -> PutResult:
        store = self.store
        failed = next((f.exception() for f in pending if f.exception() is not None), None)
        missing = set(range(store.model.num_layers)) - set(self._rows)
        checksum = combine_digests([self._rows[i] for i in sorted(self._rows)]) if not missing else 0
        for tier in self._tiers:
            backend = store.backends[tier]
            if failed is not None or missing:
                self.status[tier] = f"error: {failed or f'layers {sorted(missing)} never written'}"
                self._abort_tier(tier)
                continue
            try:
                if tier.kind == "remote":
                    backend.commit(self.key.digest, self.header, checksum, pin=self.pin)
                    self.status[tier] = "ok"
                    continue
                backend.commit(self.key.digest, self.header, checksum)
            except Exception as e:  # noqa: BLE001 - reported per tier
                self.status[tier] = f"error: {e}"
                self._abort_tier(tier)
                continue
            with store._lock:
                e = self._entry
                c = e.copies[tier]
                c.checksum = checksum
                c.committed = True
                store._lru[tier][self.key.digest] = None
                store._touch(e, tier)
                store._emit("stored", e, tier, c)
            self.status[tier] = "ok"
        if self._entry is not None:
            store._release(self._entry)
        return PutResult(self.key, dict(self.status), max(self.seconds.values(), default=0.0))

    def _abort_tier(self, tier: TierId) -> None:
        store = self.store
        store.backends[tier].abort(self.key.digest)
        if tier.kind == "remote":
            return
        with store._lock:
            e = self._entry
            e.copies.pop(tier, None)
            if not e.copies and store._index.get(self.key.digest) is e:
                del store._index[self.key.digest]

