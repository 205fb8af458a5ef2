"""On-disk chunk file format (little-endian throughout).

    offset  size  field
    0       4     magic b"LMCK"
    4       2     version (1 = raw payload, 2 = codec-encoded payload)
    6       8     model tag hash (blake2b-64 of the UTF-8 tag)
    14      32    chunk key digest
    46      2     token_count
    48      2     num_layers
    50      4     bytes_per_token_per_layer
    -- version 2 only --
    54      1     codec id
    55      4     encoded payload length
    -- then --
            n     payload (v1: num_layers rows of token_count * bpt bytes)
            8     checksum (u64)

The checksum is a two-level blake2b-64: hash each layer row (v2: the single
encoded blob), then hash the concatenated row digests. Rows can therefore be
written in any order and checksummed independently.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"LMCK"
V_RAW = 1
V_CODEC = 2
HEADER = struct.Struct("<4sH8s32sHHI")
CODEC_EXT = struct.Struct("<BI")
CHECKSUM = struct.Struct("<Q")


class CorruptChunk(ValueError):
    pass


def tag_hash(model_tag: str) -> bytes:
    return hashlib.blake2b(model_tag.encode("utf-8"), digest_size=8).digest()


def row_digest(row) -> bytes:
    return hashlib.blake2b(memoryview(np.ascontiguousarray(row)).cast("B"), digest_size=8).digest()


def combine_digests(digests: list[bytes]) -> int:
    return CHECKSUM.unpack(hashlib.blake2b(b"".join(digests), digest_size=8).digest())[0]


def payload_checksum(rows) -> int:
    return combine_digests([row_digest(r) for r in rows])


@dataclass
class ChunkHeader:
    digest: bytes
    model_tag_hash: bytes
    token_count: int
    num_layers: int
    bytes_per_token_per_layer: int
    codec: int = 0
    encoded_len: int = 0

    @property
    def version(self) -> int:
        return V_CODEC if self.codec else V_RAW

    @property
    def size(self) -> int:
        return HEADER.size + (CODEC_EXT.size if self.codec else 0)

    @property
    def layer_bytes(self) -> int:
        return self.token_count * self.bytes_per_token_per_layer

    @property
    def payload_len(self) -> int:
        return self.encoded_len if self.codec else self.num_layers * self.layer_bytes

    def pack(self) -> bytes:
        out = HEADER.pack(
            MAGIC, self.version, self.model_tag_hash, self.digest,
            self.token_count, self.num_layers, self.bytes_per_token_per_layer,
        )
        if self.codec:
            out += CODEC_EXT.pack(self.codec, self.encoded_len)
        return out

    @classmethod
    def unpack(cls, buf: bytes) -> ChunkHeader:
        if len(buf) < HEADER.size:
            raise CorruptChunk("truncated header")
        magic, version, th, digest, tc, nl, bpt = HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise CorruptChunk(f"bad magic {magic!r}")
        h = cls(digest, th, tc, nl, bpt)
        if version == V_CODEC:
            if len(buf) < HEADER.size + CODEC_EXT.size:
                raise CorruptChunk("truncated codec header")
            h.codec, h.encoded_len = CODEC_EXT.unpack_from(buf, HEADER.size)
            if h.codec == 0:
                raise CorruptChunk("version 2 file with codec 0")
        elif version != V_RAW:
            raise CorruptChunk(f"unsupported version {version}")
        return h


def encode_file(header: ChunkHeader, rows) -> bytes:
    """Whole file image for ``rows`` (layer rows, or one encoded blob)."""
    parts = [header.pack()]
    parts += [np.ascontiguousarray(r).tobytes() for r in rows]
    parts.append(CHECKSUM.pack(payload_checksum(rows)))
    return b"".join(parts)


def decode_file(buf: bytes) -> tuple[ChunkHeader, np.ndarray]:
    """Parse and verify a file image; returns the header and the flat payload."""
    h = ChunkHeader.unpack(buf)
    end = h.size + h.payload_len
    if len(buf) != end + CHECKSUM.size:
        raise CorruptChunk(f"file is {len(buf)} bytes, header implies {end + CHECKSUM.size}")
    payload = np.frombuffer(buf, dtype=np.uint8, count=h.payload_len, offset=h.size)
    rows = [payload] if h.codec else payload.reshape(h.num_layers, h.layer_bytes)
    (stored,) = CHECKSUM.unpack_from(buf, end)
    if stored != payload_checksum(rows):
        raise CorruptChunk("checksum mismatch")
    return h, payload
