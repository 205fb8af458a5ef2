"""Token chunking, prefix-chained chunk keys and prefix matching.

A token sequence is cut into fixed spans of ``chunk_size`` tokens (the last
span may be shorter). Every span gets a 32-byte key that hashes the model tag,
the key of the previous span and the span's tokens, so equal keys imply equal
token prefixes.
"""

from __future__ import annotations

import hashlib
from collections.abc import Container, Sequence
from dataclasses import dataclass

import numpy as np

DEFAULT_CHUNK_SIZE = 256
ZERO_DIGEST = bytes(32)

# Fixed key so digests from this package never collide with plain blake2b.
_HASH_KEY = b"kvtier/chunk-key/v1"


@dataclass(frozen=True)
class ChunkSpan:
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class ChunkKey:
    """Identity of one stored chunk.

    ``digest`` already covers ``model_tag`` and the whole token prefix, so it
    is what indexes hash on. ``chunk_index`` is the ordinal of the span inside
    the sequence it was cut from.
    """

    digest: bytes
    model_tag: str
    chunk_index: int

    def __post_init__(self) -> None:
        if len(self.digest) != 32:
            raise ValueError(f"digest must be 32 bytes, got {len(self.digest)}")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def to_dict(self) -> dict:
        return {"digest": self.hex, "model_tag": self.model_tag, "chunk_index": self.chunk_index}

    @classmethod
    def from_dict(cls, d: dict) -> ChunkKey:
        return cls(bytes.fromhex(d["digest"]), d["model_tag"], int(d["chunk_index"]))

    def __repr__(self) -> str:
        return f"ChunkKey({self.hex[:12]}…, {self.model_tag!r}, #{self.chunk_index})"


def as_token_array(tokens: Sequence[int] | np.ndarray) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise ValueError("tokens must be one-dimensional")
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
        raise ValueError("token ids must fit in an unsigned 32-bit integer")
    return arr.astype("<u4", copy=False)


def chunk_tokens(tokens: Sequence[int] | np.ndarray, chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[ChunkSpan]:
    """Tile ``[0, len(tokens))`` with spans of ``chunk_size`` tokens.

    >>> [(s.start, s.end) for s in chunk_tokens(range(600), 256)]
    [(0, 256), (256, 512), (512, 600)]
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    n = len(tokens)
    return [ChunkSpan(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]


def chunk_key(parent: bytes, tokens: np.ndarray, model_tag: str, chunk_index: int) -> ChunkKey:
    """Key for one span given the digest of the span before it."""
    tag = model_tag.encode("utf-8")
    h = hashlib.blake2b(digest_size=32, key=_HASH_KEY)
    h.update(len(tag).to_bytes(4, "little"))
    h.update(tag)
    h.update(parent)
    h.update(as_token_array(tokens).tobytes())
    return ChunkKey(h.digest(), model_tag, chunk_index)


def chunk_keys(
    tokens: Sequence[int] | np.ndarray,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    model_tag: str = "",
) -> list[ChunkKey]:
    arr = as_token_array(tokens)
    keys: list[ChunkKey] = []
    parent = ZERO_DIGEST
    for i, span in enumerate(chunk_tokens(arr, chunk_size)):
        key = chunk_key(parent, arr[span.start:span.end], model_tag, i)
        keys.append(key)
        parent = key.digest
    return keys


def longest_prefix_match(
    tokens: Sequence[int] | np.ndarray,
    index: Container,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    model_tag: str = "",
    keys: list[ChunkKey] | None = None,
) -> int:
    """Number of leading tokens whose chunks are all present in ``index``.

    ``index`` only needs ``__contains__`` for :class:`ChunkKey`. The result is
    a multiple of ``chunk_size`` unless every chunk, including a short final
    one, is present, in which case it is ``len(tokens)``.
    """
    if keys is None:
        keys = chunk_keys(tokens, chunk_size, model_tag)
    n = len(tokens)
    matched = 0
    for key in keys:
        if key not in index:
            break
        matched = min(matched + chunk_size, n)
    return matched
