"""Length-prefixed binary framing shared by the data and control planes.

Frame layout (little-endian)::

    offset  size  field
    0       4     magic b"LMWP"
    4       2     version (1)
    6       1     opcode
    7       8     request id
    15      4     payload length
    19      n     payload

Payload layout::

    0       4     meta length m
    4       m     meta: UTF-8 JSON object
    4+m     ...   body: opaque bytes

Parse failures are reported with the absolute stream offset of the first
offending byte, so the same input always fails at the same place no matter
how it was split into reads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum

MAGIC = b"LMWP"
VERSION = 1
HEADER = struct.Struct("<4sHBQI")
META_LEN = struct.Struct("<I")
MAX_PAYLOAD = 64 << 20


class Op(IntEnum):
    PUT = 1
    GET = 2
    EXISTS = 3
    CLEAR = 4
    PIN = 5
    MOVE = 6
    COMPRESS = 7
    LOOKUP = 8
    PD_PUSH = 9
    EVENT = 10
    OK = 11
    ERR = 12


_OPCODES = frozenset(int(o) for o in Op)


class FrameError(ValueError):
    """Unparseable input at stream offset ``offset``."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"{reason} at offset {offset}")
        self.offset = offset
        self.reason = reason


class RemoteError(RuntimeError):
    """An ERR reply; ``code`` is a short machine-readable name."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


@dataclass
class Message:
    op: Op
    request_id: int
    meta: dict = field(default_factory=dict)
    body: object = b""  # any buffer, or a list of buffers sent back to back

    def encode_meta(self) -> bytes:
        return json.dumps(self.meta, separators=(",", ":")).encode("utf-8")

    def buffers(self) -> list:
        """Frame as a list of buffers for scatter-gather sends."""
        meta = self.encode_meta()
        parts = self.body if isinstance(self.body, (list, tuple)) else [self.body]
        parts = [p if isinstance(p, bytes) else memoryview(p).cast("B") for p in parts]
        parts = [p for p in parts if len(p)]
        n = META_LEN.size + len(meta) + sum(len(p) for p in parts)
        head = HEADER.pack(MAGIC, VERSION, int(self.op), self.request_id, n) + META_LEN.pack(len(meta)) + meta
        return [head, *parts]

    def to_bytes(self) -> bytes:
        return b"".join(bytes(b) for b in self.buffers())


def err(request_id: int, code: str, detail: str = "") -> Message:
    return Message(Op.ERR, request_id, {"code": code, "detail": detail})


def check_header(buf, offset: int = 0, max_payload: int = MAX_PAYLOAD) -> tuple[Op, int, int]:
    """Validate a 19-byte header; returns ``(op, request_id, payload_len)``.

    Raises FrameError pointing at the bad field. ``offset`` is the stream
    position of the header's first byte.
    """
    magic, version, op, rid, n = HEADER.unpack_from(buf)
    if magic != MAGIC:
        bad = next(i for i in range(4) if magic[i] != MAGIC[i])
        raise FrameError(offset + bad, "bad magic")
    if version != VERSION:
        raise FrameError(offset + 4, f"unsupported version {version}")
    if op not in _OPCODES:
        raise FrameError(offset + 6, f"unknown opcode {op}")
    if n < META_LEN.size:
        raise FrameError(offset + 15, "payload shorter than meta length field")
    if n > max_payload:
        raise FrameError(offset + 15, f"payload of {n} bytes exceeds {max_payload}")
    return Op(op), rid, n


def parse_meta(payload, offset: int = 0) -> tuple[dict, int]:
    """Decode the meta object from a payload; returns ``(meta, body_start)``.

    ``offset`` is the stream position of the payload's first byte.
    """
    (m,) = META_LEN.unpack_from(payload)
    if m > len(payload) - META_LEN.size:
        raise FrameError(offset, "meta length exceeds payload")
    raw = bytes(payload[META_LEN.size:META_LEN.size + m])
    try:
        meta = json.loads(raw.decode("utf-8")) if m else {}
    except (UnicodeDecodeError, ValueError):
        raise FrameError(offset + META_LEN.size, "meta is not valid JSON") from None
    if not isinstance(meta, dict):
        raise FrameError(offset + META_LEN.size, "meta is not a JSON object")
    return meta, META_LEN.size + m


class FrameParser:
    """Incremental parser: feed bytes, collect complete messages.

    On malformed input :attr:`error` is set and parsing stops for good; the
    messages completed before the bad frame are still returned.
    """

    def __init__(self, max_payload: int = MAX_PAYLOAD):
        self.max_payload = max_payload
        self._buf = bytearray()
        self._base = 0  # stream offset of _buf[0]
        self.error: FrameError | None = None

    @property
    def consumed(self) -> int:
        return self._base

    def feed(self, data) -> list[Message]:
        if self.error:
            return []
        self._buf += data
        out = []
        pos = 0
        buf = self._buf
        try:
            while True:
                avail = len(self._buf) - pos
                at = self._base + pos
                if avail < HEADER.size:
                    # a bad magic prefix is detectable before the header completes
                    for i in range(min(avail, 4)):
                        if self._buf[pos + i] != MAGIC[i]:
                            raise FrameError(at + i, "bad magic")
                    break
                op, rid, n = check_header(bytes(buf[pos:pos + HEADER.size]), at, self.max_payload)
                if avail < HEADER.size + n:
                    break
                start = pos + HEADER.size
                payload = bytes(buf[start:start + n])
                meta, body_at = parse_meta(payload, at + HEADER.size)
                out.append(Message(op, rid, meta, payload[body_at:]))
                pos = start + n
        except FrameError as e:
            self.error = e
        finally:
            if pos:
                del self._buf[:pos]
                self._base += pos
        return out


def parse_stream(data: bytes, max_payload: int = MAX_PAYLOAD) -> tuple[list[Message], FrameError | None, int]:
    """Parse a complete byte string.

    Returns the messages parsed, the error that stopped parsing (if any) and
    the number of trailing bytes left over as an incomplete frame.
    """
    p = FrameParser(max_payload)
    msgs = p.feed(data)
    return msgs, p.error, 0 if p.error else len(data) - p.consumed
