"""KV payload model and the paged memory that stands in for engine GPU memory."""

from __future__ import annotations

import hashlib
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .tokens import ChunkKey


class OutOfPages(RuntimeError):
    """Not enough free pages; the caller should queue the query."""


class UnpopulatedPage(RuntimeError):
    """A page was read before anything was written to it."""


class SizeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Shape of the KV cache of a (simulated) model.

    The defaults give 4 KiB per token per layer, so one 16-token page of one
    layer is 64 KiB.
    """

    num_layers: int = 8
    bytes_per_token_per_layer: int = 4096
    page_tokens: int = 16
    model_tag: str = "sim-8x4096"

    def __post_init__(self) -> None:
        if self.num_layers < 1 or self.bytes_per_token_per_layer < 1 or self.page_tokens < 1:
            raise ValueError("ModelSpec fields must be positive")

    @property
    def page_bytes(self) -> int:
        return self.page_tokens * self.bytes_per_token_per_layer

    @property
    def bytes_per_token(self) -> int:
        return self.num_layers * self.bytes_per_token_per_layer

    def chunk_bytes(self, token_count: int) -> int:
        return self.num_layers * token_count * self.bytes_per_token_per_layer

    def check_chunk_size(self, chunk_size: int) -> None:
        if chunk_size % self.page_tokens:
            raise ValueError(f"page_tokens={self.page_tokens} must divide chunk_size={chunk_size}")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "bytes_per_token_per_layer": self.bytes_per_token_per_layer,
            "page_tokens": self.page_tokens,
            "model_tag": self.model_tag,
        }


class KVChunk:
    """Sealed per-layer KV payload for one token chunk.

    ``payload`` has shape ``(num_layers, token_count * bytes_per_token_per_layer)``
    and is read-only; layer ``i`` is the contiguous row ``payload[i]``.
    """

    __slots__ = ("key", "token_count", "bytes_per_token_per_layer", "payload")

    def __init__(self, key: ChunkKey, token_count: int, bytes_per_token_per_layer: int, payload: np.ndarray):
        payload = np.ascontiguousarray(payload, dtype=np.uint8)
        if payload.ndim == 1:
            payload = payload.reshape(-1, token_count * bytes_per_token_per_layer)
        if payload.shape[1] != token_count * bytes_per_token_per_layer:
            raise SizeMismatch(
                f"layer rows are {payload.shape[1]} bytes, expected "
                f"{token_count} * {bytes_per_token_per_layer}"
            )
        if token_count < 1:
            raise ValueError("a chunk holds at least one token")
        if payload.flags.writeable:
            payload = payload.copy() if payload.base is not None else payload
            payload.flags.writeable = False
        self.key = key
        self.token_count = token_count
        self.bytes_per_token_per_layer = bytes_per_token_per_layer
        self.payload = payload

    def __setattr__(self, name, value):
        if hasattr(self, "payload"):
            raise AttributeError("KVChunk is immutable once sealed")
        object.__setattr__(self, name, value)

    @property
    def num_layers(self) -> int:
        return self.payload.shape[0]

    @property
    def nbytes(self) -> int:
        return self.payload.nbytes

    def layer(self, i: int) -> np.ndarray:
        return self.payload[i]

    def payload_digest(self) -> bytes:
        return hashlib.blake2b(self.payload.tobytes(), digest_size=16).digest()

    def __repr__(self) -> str:
        return f"KVChunk({self.key!r}, tokens={self.token_count}, layers={self.num_layers})"


@dataclass(frozen=True)
class ChunkDescriptor:
    """Where one chunk's bytes live, per layer.

    ``start``/``stop`` are token positions inside the owning query. For an
    engine-resident chunk ``page_ids[layer]`` lists the pages covering those
    tokens; for a stored chunk ``tier`` names where it is read from.
    """

    key: ChunkKey
    start: int
    stop: int
    layers: tuple[int, int]
    tier: object | None = None
    page_ids: tuple[tuple[int, ...], ...] = ()

    @property
    def token_count(self) -> int:
        return self.stop - self.start


# -- deterministic KV content ------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def synth_kv(tokens: np.ndarray, positions: np.ndarray, layer: int, bytes_per_token: int) -> np.ndarray:
    """KV bytes for ``tokens`` at ``positions`` in ``layer``, shape ``(T, bytes_per_token)``.

    Stands in for the attention projections: a pure function of
    (token id, position, layer), cheap to vectorise and byte-exact.
    """
    tokens = np.asarray(tokens, dtype=np.uint64)
    positions = np.asarray(positions, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = _splitmix(tokens * _GOLD ^ (positions << np.uint64(20)) ^ (np.uint64(layer + 1) * _M2))
        words = -(-bytes_per_token // 8)
        lanes = np.arange(words, dtype=np.uint64) * _GOLD
        out = _splitmix(base[:, None] + lanes[None, :])
    return out.view(np.uint8).reshape(len(tokens), words * 8)[:, :bytes_per_token]


# -- paged memory ------------------------------------------------------------

@dataclass
class _QueryPages:
    tables: list[list[int]] = field(default_factory=list)


class PagedKVStore:
    """Fixed pool of pages, each holding ``page_tokens`` tokens of one layer.

    Page tables are per layer: ``page_table(q)[layer]`` lists the pages that
    hold tokens ``0, page_tokens, 2 * page_tokens, ...`` of query ``q``.
    Writes are tracked per token slot so reading a slot that was never written
    raises :class:`UnpopulatedPage`.
    """

    def __init__(self, model: ModelSpec, num_pages: int):
        self.model = model
        self.num_pages = num_pages
        self.page_tokens = model.page_tokens
        self.bpt = model.bytes_per_token_per_layer
        self._pool = np.zeros((num_pages, self.page_tokens, self.bpt), dtype=np.uint8)
        self._filled = np.zeros((num_pages, self.page_tokens), dtype=bool)
        self._free: deque[int] = deque(range(num_pages))
        self._owner: dict[int, tuple[object, int]] = {}
        self._queries: dict[object, _QueryPages] = {}
        self._lock = threading.RLock()

    # allocation

    @property
    def free_count(self) -> int:
        return len(self._free)

    def allocated_count(self, query_id=None) -> int:
        if query_id is None:
            return len(self._owner)
        q = self._queries.get(query_id)
        return sum(len(t) for t in q.tables) if q else 0

    def free_pages(self) -> list[int]:
        return list(self._free)

    def alloc_pages(self, query_id, pages_needed: int, layer: int = 0) -> list[int]:
        """Bind ``pages_needed`` free pages to ``query_id``'s table for ``layer``."""
        if pages_needed < 0:
            raise ValueError("pages_needed must be >= 0")
        with self._lock:
            if pages_needed > len(self._free):
                raise OutOfPages(f"need {pages_needed} pages, {len(self._free)} free")
            ids = [self._free.popleft() for _ in range(pages_needed)]
            q = self._queries.setdefault(query_id, _QueryPages())
            while len(q.tables) <= layer:
                q.tables.append([])
            q.tables[layer].extend(ids)
            for p in ids:
                self._owner[p] = (query_id, layer)
                self._filled[p] = False
            return ids

    def alloc_blocks(self, query_id, blocks: int) -> list[list[int]]:
        """Allocate ``blocks`` pages in every layer, all or nothing."""
        with self._lock:
            need = blocks * self.model.num_layers
            if need > len(self._free):
                raise OutOfPages(f"need {need} pages, {len(self._free)} free")
            return [self.alloc_pages(query_id, blocks, layer) for layer in range(self.model.num_layers)]

    def free_query(self, query_id) -> int:
        with self._lock:
            q = self._queries.pop(query_id, None)
            if q is None:
                return 0
            n = 0
            for table in q.tables:
                for p in table:
                    del self._owner[p]
                    self._filled[p] = False
                    self._free.append(p)
                    n += 1
            return n

    def page_table(self, query_id) -> list[list[int]]:
        q = self._queries.get(query_id)
        if q is None:
            raise KeyError(query_id)
        return [list(t) for t in q.tables]

    def capacity_tokens(self, query_id) -> int:
        q = self._queries.get(query_id)
        if not q or not q.tables:
            return 0
        return min(len(t) for t in q.tables) * self.page_tokens

    # page-level access

    def _check_pages(self, page_ids, layer: int | None) -> np.ndarray:
        ids = np.asarray(page_ids, dtype=np.int64)
        for p in ids.tolist():
            owner = self._owner.get(p)
            if owner is None:
                raise UnpopulatedPage(f"page {p} is not allocated")
            if layer is not None and owner[1] != layer:
                raise ValueError(f"page {p} belongs to layer {owner[1]}, not {layer}")
        return ids

    def gather_pages(self, page_ids, layer: int | None = None) -> np.ndarray:
        """Concatenate whole pages into one contiguous buffer."""
        ids = self._check_pages(page_ids, layer)
        if not len(ids):
            return np.empty(0, dtype=np.uint8)
        if not self._filled[ids].all():
            bad = ids[~self._filled[ids].all(axis=1)][0]
            raise UnpopulatedPage(f"page {bad} has unwritten token slots")
        return self._pool[ids].reshape(-1)

    def scatter_pages(self, buffer, page_ids, layer: int | None = None) -> None:
        """Inverse of :meth:`gather_pages`."""
        ids = self._check_pages(page_ids, layer)
        buf = np.frombuffer(buffer, dtype=np.uint8) if not isinstance(buffer, np.ndarray) else buffer
        expected = len(ids) * self.page_tokens * self.bpt
        if buf.size != expected:
            raise SizeMismatch(f"buffer has {buf.size} bytes, {len(ids)} pages need {expected}")
        if not len(ids):
            return
        self._pool[ids] = buf.reshape(len(ids), self.page_tokens, self.bpt)
        self._filled[ids] = True

    def page_view(self, page_id: int, num_tokens: int | None = None) -> memoryview:
        n = self.page_tokens if num_tokens is None else num_tokens
        return memoryview(self._pool[page_id, :n]).cast("B")

    def mark_filled(self, page_id: int, num_tokens: int | None = None) -> None:
        n = self.page_tokens if num_tokens is None else num_tokens
        self._filled[page_id, :n] = True

    # token-level access

    def _spans(self, query_id, layer: int, start: int, stop: int):
        """``(page_id, slot_start, slot_stop, offset)`` pieces covering tokens ``start..stop``."""
        q = self._queries.get(query_id)
        if q is None or layer >= len(q.tables):
            raise KeyError(f"no pages for query {query_id!r} layer {layer}")
        table = q.tables[layer]
        pt = self.page_tokens
        if stop > len(table) * pt:
            raise SizeMismatch(f"tokens up to {stop} exceed {len(table)} allocated pages")
        out = []
        for i in range(start // pt, -(-stop // pt)):
            a = max(start, i * pt)
            b = min(stop, (i + 1) * pt)
            out.append((table[i], a - i * pt, b - i * pt, a - start))
        return out

    def write_tokens(self, query_id, layer: int, start: int, data: np.ndarray) -> None:
        """Write ``data`` (``(T, bpt)`` or flat) at token positions ``start..start+T``."""
        data = np.asarray(data, dtype=np.uint8).reshape(-1, self.bpt)
        for pid, s, e, o in self._spans(query_id, layer, start, start + len(data)):
            self._pool[pid, s:e] = data[o:o + e - s]
            self._filled[pid, s:e] = True

    def _check_filled(self, spans, query_id, layer, start, stop) -> None:
        for pid, s, e, _ in spans:
            if not self._filled[pid, s:e].all():
                raise UnpopulatedPage(f"query {query_id!r} layer {layer} tokens {start}:{stop} not populated")

    def read_tokens(self, query_id, layer: int, start: int, stop: int) -> np.ndarray:
        """Copy of tokens ``start..stop`` of one layer, shape ``(T, bpt)``."""
        spans = self._spans(query_id, layer, start, stop)
        self._check_filled(spans, query_id, layer, start, stop)
        out = np.empty((max(stop - start, 0), self.bpt), dtype=np.uint8)
        for pid, s, e, o in spans:
            out[o:o + e - s] = self._pool[pid, s:e]
        return out

    def token_views(self, query_id, layer: int, start: int, stop: int) -> list[np.ndarray]:
        """Zero-copy views, in token order, covering ``start..stop`` of one layer."""
        spans = self._spans(query_id, layer, start, stop)
        self._check_filled(spans, query_id, layer, start, stop)
        return [self._pool[pid, s:e] for pid, s, e, _ in spans]

    def tokens_filled(self, query_id, layer: int, start: int, stop: int) -> bool:
        return all(self._filled[pid, s:e].all() for pid, s, e, _ in self._spans(query_id, layer, start, stop))
