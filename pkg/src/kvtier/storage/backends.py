"""Tier backends: a pre-allocated RAM slab and a local chunk-file directory.

Backends only move bytes. Indexing, eviction policy and pinning live in
:class:`~kvtier.storage.engine.StorageEngine`, which serialises calls that
change what a backend holds.
"""

from __future__ import annotations

import os
import threading
from pathlib import Path

import numpy as np

from . import chunkfile
from .chunkfile import CHECKSUM, ChunkHeader, CorruptChunk
from .tiers import DISK, RAM, DeviceModel, TierId


class TierFull(RuntimeError):
    def __init__(self, tier: TierId, needed: int = 0):
        super().__init__(f"tier {tier} full (need {needed} bytes)")
        self.tier = tier
        self.needed = needed


class NotFound(KeyError):
    pass


class Backend:
    tier: TierId
    device: DeviceModel

    def bytes_to_free(self, nbytes: int) -> int:
        """How many stored bytes must go before ``nbytes`` more fit (0 if they fit)."""
        raise NotImplementedError

    def stored_size(self, digest: bytes) -> int:
        raise NotImplementedError


class RamPoolBackend(Backend):
    """Fixed-size slots carved out of one pre-allocated slab.

    Every stored chunk takes one slot of ``slot_bytes`` regardless of its
    length, so allocation never fragments.
    """

    def __init__(self, capacity_bytes: int, slot_bytes: int, device: DeviceModel | None = None):
        if slot_bytes <= 0:
            raise ValueError("slot_bytes must be positive")
        self.tier = RAM
        self.device = device or DeviceModel()
        self.slot_bytes = slot_bytes
        self.num_slots = capacity_bytes // slot_bytes
        self._slab = np.zeros((self.num_slots, slot_bytes), dtype=np.uint8)
        self._free = list(range(self.num_slots - 1, -1, -1))
        self._slots: dict[bytes, tuple[int, int]] = {}
        self._lock = threading.Lock()

    @property
    def capacity_bytes(self) -> int:
        return self.num_slots * self.slot_bytes

    @property
    def used_bytes(self) -> int:
        return (self.num_slots - len(self._free)) * self.slot_bytes

    def reserve_size(self, header: ChunkHeader) -> int:
        return header.payload_len

    def bytes_to_free(self, nbytes: int) -> int:
        if nbytes > self.slot_bytes:
            raise ValueError(f"{nbytes} bytes do not fit a {self.slot_bytes}-byte slot")
        return 0 if self._free else self.slot_bytes

    def stored_size(self, digest: bytes) -> int:
        return self.slot_bytes

    def reserve(self, digest: bytes, header: ChunkHeader) -> int:
        nbytes = header.payload_len
        with self._lock:
            if nbytes > self.slot_bytes or not self._free:
                raise TierFull(self.tier, nbytes)
            slot = self._free.pop()
            self._slots[digest] = (slot, nbytes)
            return slot

    def write(self, digest: bytes, offset: int, data) -> None:
        slot, n = self._slots[digest]
        flat = np.asarray(data, dtype=np.uint8).reshape(-1)
        self._slab[slot, offset:offset + flat.size] = flat

    def commit(self, digest: bytes, header: ChunkHeader, checksum: int) -> None:
        pass

    def abort(self, digest: bytes) -> None:
        if digest in self._slots:
            self.delete(digest)

    def read(self, digest: bytes, offset: int, nbytes: int) -> np.ndarray:
        slot, n = self._slots[digest]
        return self._slab[slot, offset:offset + nbytes].copy()

    def read_all(self, digest: bytes) -> np.ndarray:
        slot, n = self._slots[digest]
        return self._slab[slot, :n].copy()

    def replace(self, digest: bytes, header: ChunkHeader, blob: np.ndarray, checksum: int) -> None:
        slot, _ = self._slots[digest]
        if blob.size > self.slot_bytes:
            raise ValueError("replacement larger than slot")
        self._slab[slot, :blob.size] = blob
        self._slots[digest] = (slot, blob.size)

    def delete(self, digest: bytes) -> None:
        with self._lock:
            slot, _ = self._slots.pop(digest)
            self._free.append(slot)

    def __contains__(self, digest: bytes) -> bool:
        return digest in self._slots


class LocalDiskBackend(Backend):
    """One chunk file per digest under ``root/ab/cd/<hex>.lmck``.

    Files are written to a temporary name and renamed on commit, so a crash
    mid-write never leaves a valid-looking chunk behind.
    """

    SUFFIX = ".lmck"

    def __init__(self, root: str | os.PathLike, quota_bytes: int | None = None, device: DeviceModel | None = None):
        self.tier = DISK
        self.device = device or DeviceModel()
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.quota_bytes = quota_bytes
        self._sizes: dict[bytes, int] = {}
        self._pending: dict[bytes, tuple[int, ChunkHeader]] = {}
        self._fds: dict[bytes, int] = {}
        self._lock = threading.Lock()

    def path_for(self, digest: bytes) -> Path:
        h = digest.hex()
        return self.root / h[:2] / h[2:4] / (h + self.SUFFIX)

    @property
    def used_bytes(self) -> int:
        return sum(self._sizes.values()) + sum(n for n, _ in self._pending.values())

    def bytes_to_free(self, nbytes: int) -> int:
        if self.quota_bytes is None:
            return 0
        return max(0, self.used_bytes + nbytes - self.quota_bytes)

    def stored_size(self, digest: bytes) -> int:
        return self._sizes.get(digest) or self._pending[digest][0]

    def reserve_size(self, header: ChunkHeader) -> int:
        return self.file_size(header)

    def file_size(self, header: ChunkHeader) -> int:
        return header.size + header.payload_len + CHECKSUM.size

    def reserve(self, digest: bytes, header: ChunkHeader) -> int:
        size = self.file_size(header)
        with self._lock:
            if self.quota_bytes is not None and self.used_bytes + size > self.quota_bytes:
                raise TierFull(self.tier, size)
            path = self.path_for(digest)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            fd = os.open(tmp, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
            try:
                os.pwrite(fd, header.pack(), 0)
            except BaseException:
                os.close(fd)
                raise
            self._pending[digest] = (size, header)
            self._fds[digest] = fd
            return size

    def write(self, digest: bytes, offset: int, data) -> None:
        _, header = self._pending[digest]
        buf = memoryview(np.ascontiguousarray(data, dtype=np.uint8)).cast("B")
        os.pwrite(self._fds[digest], buf, header.size + offset)

    def commit(self, digest: bytes, header: ChunkHeader, checksum: int) -> None:
        fd = self._fds.pop(digest)
        try:
            os.pwrite(fd, CHECKSUM.pack(checksum), header.size + header.payload_len)
        finally:
            os.close(fd)
        path = self.path_for(digest)
        os.replace(path.with_suffix(".tmp"), path)
        with self._lock:
            size, _ = self._pending.pop(digest)
            self._sizes[digest] = size

    def abort(self, digest: bytes) -> None:
        fd = self._fds.pop(digest, None)
        if fd is not None:
            os.close(fd)
        with self._lock:
            self._pending.pop(digest, None)
        try:
            os.unlink(self.path_for(digest).with_suffix(".tmp"))
        except FileNotFoundError:
            pass

    def read(self, digest: bytes, offset: int, nbytes: int) -> np.ndarray:
        path = self.path_for(digest)
        out = np.empty(nbytes, dtype=np.uint8)
        with open(path, "rb", buffering=0) as f:
            head = ChunkHeader.unpack(f.read(chunkfile.HEADER.size + chunkfile.CODEC_EXT.size))
            f.seek(head.size + offset)
            got = f.readinto(memoryview(out))
        if got != nbytes:
            raise CorruptChunk(f"short read from {path.name}")
        return out

    def read_all(self, digest: bytes) -> np.ndarray:
        try:
            buf = self.path_for(digest).read_bytes()
        except FileNotFoundError:
            raise NotFound(digest.hex()) from None
        head, payload = chunkfile.decode_file(buf)
        if head.digest != digest:
            raise CorruptChunk("file holds a different chunk key")
        return payload.copy()

    def replace(self, digest: bytes, header: ChunkHeader, blob: np.ndarray, checksum: int) -> None:
        path = self.path_for(digest)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(header.pack() + blob.tobytes() + CHECKSUM.pack(checksum))
        os.replace(tmp, path)
        with self._lock:
            self._sizes[digest] = self.file_size(header)

    def delete(self, digest: bytes) -> None:
        with self._lock:
            self._sizes.pop(digest, None)
        try:
            os.unlink(self.path_for(digest))
        except FileNotFoundError:
            pass

    def __contains__(self, digest: bytes) -> bool:
        return digest in self._sizes
