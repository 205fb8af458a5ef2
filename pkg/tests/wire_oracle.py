"""Reference frame parser and fuzz corpus for wire-protocol tests.

Written from the documented frame layout alone, without the package's parser,
so the two can be compared byte for byte.
"""

import json
import struct

import numpy as np

MAGIC = b"LMWP"
OPCODES = set(range(1, 13))
HEADER_SIZE = 19


def reference_parse(data: bytes, max_payload: int = 64 << 20):
    """Returns ``(frames, error_offset)``; ``frames`` holds ``(op, rid, meta, body)``."""
    frames = []
    pos = 0
    while True:
        avail = len(data) - pos
        for i in range(min(avail, 4)):
            if data[pos + i] != MAGIC[i]:
                return frames, pos + i
        if avail < HEADER_SIZE:
            return frames, None
        version = int.from_bytes(data[pos + 4:pos + 6], "little")
        if version != 1:
            return frames, pos + 4
        op = data[pos + 6]
        if op not in OPCODES:
            return frames, pos + 6
        rid = int.from_bytes(data[pos + 7:pos + 15], "little")
        n = int.from_bytes(data[pos + 15:pos + 19], "little")
        if n < 4 or n > max_payload:
            return frames, pos + 15
        if avail < HEADER_SIZE + n:
            return frames, None
        payload = data[pos + HEADER_SIZE:pos + HEADER_SIZE + n]
        m = int.from_bytes(payload[:4], "little")
        if m > n - 4:
            return frames, pos + HEADER_SIZE
        try:
            meta = json.loads(payload[4:4 + m].decode("utf-8")) if m else {}
        except (UnicodeDecodeError, ValueError):
            return frames, pos + HEADER_SIZE + 4
        if not isinstance(meta, dict):
            return frames, pos + HEADER_SIZE + 4
        frames.append((op, rid, meta, payload[4 + m:]))
        pos += HEADER_SIZE + n


def valid_frame(rng: np.random.Generator) -> bytes:
    meta = json.dumps({"k": int(rng.integers(0, 1000))}).encode() if rng.random() < 0.8 else b""
    body = rng.integers(0, 256, int(rng.integers(0, 40)), dtype=np.uint8).tobytes()
    n = 4 + len(meta) + len(body)
    return (MAGIC + struct.pack("<HBQI", 1, int(rng.integers(1, 13)), int(rng.integers(0, 2**63)), n)
            + struct.pack("<I", len(meta)) + meta + body)


def fuzz_frame(rng: np.random.Generator) -> bytes:
    """A valid frame, often with a few bytes flipped, truncated or extended."""
    f = bytearray(valid_frame(rng))
    r = rng.random()
    if r < 0.6:
        for _ in range(int(rng.integers(1, 4))):
            f[int(rng.integers(0, len(f)))] = int(rng.integers(0, 256))
    elif r < 0.75:
        del f[int(rng.integers(0, len(f))):]
    elif r < 0.85:
        f += rng.integers(0, 256, int(rng.integers(1, 30)), dtype=np.uint8).tobytes()
    return bytes(f)
