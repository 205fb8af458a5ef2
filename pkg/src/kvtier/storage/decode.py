"""Delayed storing of KV produced during decoding."""

from __future__ import annotations

import numpy as np

from ..kv import KVChunk, ModelSpec
from ..tokens import ZERO_DIGEST, as_token_array, chunk_key


class DecodeAccumulator:
    """Collects per-token decode KV and releases it one whole chunk at a time.

    Args:
        query_id: owning query.
        model: KV layout.
        chunk_size: tokens per chunk.
        prefix_tokens: every token of the sequence before decoding starts.
        tail_kv: KV of the trailing partial chunk of ``prefix_tokens``, shape
            ``(num_layers, T, bytes_per_token_per_layer)``; required when the
            prefix does not end on a chunk boundary.
    """

    def __init__(self, query_id, model: ModelSpec, chunk_size: int, prefix_tokens, tail_kv=None):
        self.query_id = query_id
        self.model = model
        self.chunk_size = chunk_size
        toks = as_token_array(prefix_tokens)
        full = len(toks) // chunk_size
        parent = ZERO_DIGEST
        for i in range(full):
            parent = chunk_key(parent, toks[i * chunk_size:(i + 1) * chunk_size], model.model_tag, i).digest
        self._parent = parent
        self._index = full
        tail = toks[full * chunk_size:]
        self._tokens: list[int] = tail.tolist()
        self._kv: list[np.ndarray] = []
        if len(tail):
            if tail_kv is None:
                raise ValueError("prefix ends mid-chunk; tail_kv is required")
            tail_kv = np.asarray(tail_kv, dtype=np.uint8).reshape(model.num_layers, len(tail), -1)
            self._kv.append(tail_kv)
        self.appended = 0
        self.flushes = 0
        self._fresh = 0  # decoded tokens in the pending chunk

    @property
    def pending(self) -> int:
        return len(self._tokens)

    def append(self, token_ids, kv: np.ndarray) -> KVChunk | None:
        """Add one window of tokens with KV ``(num_layers, T, bpt)``.

        Returns the chunk that filled up, if any. Windows longer than the room
        left in the current chunk are rejected; decode appends one token at a
        time in practice.
        """
        token_ids = list(np.atleast_1d(np.asarray(token_ids)).tolist())
        kv = np.asarray(kv, dtype=np.uint8).reshape(self.model.num_layers, len(token_ids), -1)
        if len(self._tokens) + len(token_ids) > self.chunk_size:
            raise ValueError("window crosses a chunk boundary")
        self._tokens.extend(token_ids)
        self._kv.append(kv)
        self.appended += len(token_ids)
        self._fresh += len(token_ids)
        if len(self._tokens) == self.chunk_size:
            return self._flush()
        return None

    def finish(self) -> KVChunk | None:
        """Flush the partial chunk if decoding added anything to it."""
        if not self._fresh:
            return None
        return self._flush()

    def _flush(self) -> KVChunk:
        toks = np.asarray(self._tokens, dtype="<u4")
        key = chunk_key(self._parent, toks, self.model.model_tag, self._index)
        payload = np.concatenate(self._kv, axis=1).reshape(self.model.num_layers, -1)
        chunk = KVChunk(key, len(toks), self.model.bytes_per_token_per_layer, payload)
        self._parent = key.digest
        self._index += 1
        self._tokens = []
        self._kv = []
        self._fresh = 0
        self.flushes += 1
        return chunk
