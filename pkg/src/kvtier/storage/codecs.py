"""Payload codecs used by ``compress``.

``q8-scale`` reads the payload as little-endian int16 lanes, keeps one
scale per chunk (``max|lane| / 127``) and stores int8 lanes. Decoding
multiplies back and rounds, so every lane is off by at most ``scale / 2``
(half a quantisation step). The encoded size is ``len/2`` plus a 12-byte
header.
"""

from __future__ import annotations

import struct

import numpy as np


class UnknownCodec(KeyError):
    pass


class Codec:
    name: str = ""
    code: int = 0

    def encode(self, data: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, data: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityCodec(Codec):
    name = "identity"
    code = 0

    def encode(self, data):
        return np.ascontiguousarray(data, dtype=np.uint8).reshape(-1).copy()

    def decode(self, data):
        return np.ascontiguousarray(data, dtype=np.uint8).reshape(-1).copy()


_Q8_HEADER = struct.Struct("<dI")


class Q8ScaleCodec(Codec):
    name = "q8-scale"
    code = 1

    @staticmethod
    def error_bound(data: np.ndarray) -> float:
        """Largest per-lane absolute error decoding can introduce for ``data``."""
        lanes = _lanes(np.asarray(data, dtype=np.uint8).reshape(-1))
        peak = float(np.abs(lanes.astype(np.int32)).max()) if lanes.size else 0.0
        return peak / 127 / 2

    def encode(self, data):
        raw = np.ascontiguousarray(data, dtype=np.uint8).reshape(-1)
        lanes = _lanes(raw).astype(np.float64)
        peak = float(np.abs(lanes).max()) if lanes.size else 0.0
        scale = peak / 127 if peak else 1.0
        q = np.clip(np.rint(lanes / scale), -127, 127).astype(np.int8)
        head = np.frombuffer(_Q8_HEADER.pack(scale, raw.size), dtype=np.uint8)
        return np.concatenate([head, q.view(np.uint8)])

    def decode(self, data):
        data = np.ascontiguousarray(data, dtype=np.uint8).reshape(-1)
        scale, n = _Q8_HEADER.unpack(data[:_Q8_HEADER.size].tobytes())
        q = data[_Q8_HEADER.size:].view(np.int8).astype(np.float64)
        lanes = np.clip(np.rint(q * scale), -32768, 32767).astype("<i2")
        return lanes.view(np.uint8)[:n].copy()


def _lanes(raw: np.ndarray) -> np.ndarray:
    if raw.size % 2:
        raw = np.concatenate([raw, np.zeros(1, np.uint8)])
    return raw.view("<i2")


REGISTRY: dict[str, Codec] = {c.name: c for c in (IdentityCodec(), Q8ScaleCodec())}
BY_CODE: dict[int, Codec] = {c.code: c for c in REGISTRY.values()}


def get_codec(name: str) -> Codec:
    try:
        return REGISTRY[name]
    except KeyError:
        raise UnknownCodec(name) from None
