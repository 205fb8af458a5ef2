"""Tiered chunk storage."""

from .backends import LocalDiskBackend, NotFound, RamPoolBackend, TierFull
from .buffers import BufferPool, SharedBuffer
from .chunkfile import ChunkHeader, CorruptChunk
from .codecs import UnknownCodec, get_codec
from .decode import DecodeAccumulator
from .engine import CacheEntry, ChunkWriter, PutResult, ReadResult, StorageEngine, StoreEvent
from .tiers import DISK, RAM, DeviceModel, Remote, TierId

__all__ = [
    "BufferPool", "CacheEntry", "ChunkHeader", "ChunkWriter", "CorruptChunk", "DISK",
    "DecodeAccumulator", "DeviceModel", "LocalDiskBackend", "NotFound", "PutResult", "RAM",
    "RamPoolBackend", "ReadResult", "Remote", "SharedBuffer", "StorageEngine", "StoreEvent",
    "TierFull", "TierId", "UnknownCodec", "get_codec",
]
