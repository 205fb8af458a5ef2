"""Remote tier: a chunk-store server reached over the wire protocol."""

from __future__ import annotations

import threading

import numpy as np

from ..storage.backends import Backend, NotFound
from ..storage.chunkfile import ChunkHeader
from ..storage.tiers import DeviceModel, Remote
from ..tokens import ChunkKey
from .client import WireClient
from .protocol import Op, RemoteError


class RemoteBackend(Backend):
    """Backend whose bytes live in another process.

    Writes are staged locally and sent as one PUT on commit; reads receive
    the reply body directly into a fresh array. Membership is always asked of
    the server because other instances write to it too.

    Args:
        name: tier name, giving ``TierId("remote", name)``.
        endpoint: server address.
        device: optional pacing model on top of the real transport.
        connections: requests are spread round-robin over this many sockets.
    """

    def __init__(self, name: str, endpoint, device: DeviceModel | None = None, connections: int = 1):
        self.tier = Remote(name)
        self.device = device or DeviceModel()
        self.endpoint = endpoint
        self.clients = [WireClient(endpoint) for _ in range(max(1, connections))]
        self._rr = 0
        self._staged: dict[bytes, tuple[ChunkHeader, np.ndarray]] = {}
        self._lock = threading.Lock()

    @property
    def client(self) -> WireClient:
        with self._lock:
            self._rr = (self._rr + 1) % len(self.clients)
            return self.clients[self._rr]

    def close(self) -> None:
        for c in self.clients:
            c.close()

    # capacity is the server's business
    used_bytes = 0

    def bytes_to_free(self, nbytes: int) -> int:
        return 0

    def reserve_size(self, header: ChunkHeader) -> int:
        return header.payload_len

    def stored_size(self, digest: bytes) -> int:
        return 0

    def exists(self, digests: list[bytes]) -> list[bool]:
        if not digests:
            return []
        reply = self.client.call(Op.EXISTS, {"digests": [d.hex() for d in digests]})
        return reply.meta["hits"]

    def reserve(self, digest: bytes, header: ChunkHeader) -> None:
        with self._lock:
            self._staged[digest] = (header, np.empty(header.payload_len, dtype=np.uint8))

    def write(self, digest: bytes, offset: int, data) -> None:
        _, buf = self._staged[digest]
        flat = np.asarray(data, dtype=np.uint8).reshape(-1)
        buf[offset:offset + flat.size] = flat

    def commit(self, digest: bytes, header: ChunkHeader, checksum: int, pin: bool = False) -> None:
        with self._lock:
            _, buf = self._staged.pop(digest)
        meta = {"digest": digest.hex(), "token_count": header.token_count, "pin": pin}
        status = self.client.call(Op.PUT, meta, buf).meta["status"][0]
        if status not in ("ok", "exists"):
            raise RuntimeError(f"remote put failed: {status}")

    def abort(self, digest: bytes) -> None:
        with self._lock:
            self._staged.pop(digest, None)

    def _get(self, digest: bytes, layer: int | None):
        meta = {"digest": digest.hex(), "layer": layer}
        try:
            reply = self.client.call(Op.GET, meta, into=lambda m, n: np.empty(n, dtype=np.uint8))
        except RemoteError as e:
            if e.code == "not_found":
                raise NotFound(digest.hex()) from None
            raise
        return reply.body, reply.meta["token_count"]

    def read_chunk(self, digest: bytes) -> tuple[np.ndarray, int]:
        return self._get(digest, None)

    def read_layer(self, digest: bytes, layer: int) -> tuple[np.ndarray, int]:
        return self._get(digest, layer)

    def delete(self, digest: bytes) -> str:
        return self.client.call(Op.CLEAR, {"digests": [digest.hex()]}).meta["results"][0]

    def pin(self, digest: bytes, on: bool) -> bool:
        try:
            self.client.call(Op.PIN, {"digest": digest.hex(), "on": on})
        except RemoteError as e:
            if e.code == "not_found":
                return False
            raise
        return True

    def compress(self, digest: bytes, codec: str) -> int:
        try:
            return self.client.call(Op.COMPRESS, {"digest": digest.hex(), "codec": codec}).meta["size"]
        except RemoteError as e:
            if e.code == "not_found":
                raise NotFound(digest.hex()) from None
            if e.code == "unknown_codec":
                from ..storage.codecs import UnknownCodec
                raise UnknownCodec(codec) from None
            raise


def remote_key(digest: bytes) -> ChunkKey:
    return ChunkKey(digest, "", 0)
