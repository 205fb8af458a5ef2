"""Registry of which chunks every instance currently holds."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from ..tokens import ChunkKey, chunk_keys, longest_prefix_match


class UnknownInstance(KeyError):
    pass


class OutOfOrderEvent(RuntimeError):
    pass


@dataclass
class PoolEntry:
    key: ChunkKey
    token_count: int
    tiers: set = field(default_factory=set)
    pinned: set = field(default_factory=set)
    codec: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"key": self.key.to_dict(), "token_count": self.token_count, "tiers": sorted(self.tiers),
                "pinned": sorted(self.pinned), "codec": dict(self.codec)}


@dataclass
class InstanceInfo:
    instance_id: str
    endpoint: str
    chunk_size: int = 256
    model_tag: str = ""
    last_seq: int = 0
    entries: dict = field(default_factory=dict)  # digest -> PoolEntry


class _Members:
    def __init__(self, entries: dict):
        self.entries = entries

    def __contains__(self, key: ChunkKey) -> bool:
        return key.digest in self.entries


class TokenPool:
    """Chunks per instance, built only from registrations and store/evict events.

    Events of one instance must arrive in sequence order; a registration
    (with a snapshot of the instance's contents) resets that instance.
    """

    def __init__(self):
        self._instances: dict[str, InstanceInfo] = {}
        self._lock = threading.RLock()
        self.events_applied = 0

    # registration

    def register_instance(self, instance_id: str, endpoint: str, *, chunk_size: int = 256, model_tag: str = "",
                          snapshot: list[dict] | None = None) -> None:
        info = InstanceInfo(instance_id, endpoint, chunk_size, model_tag)
        for item in snapshot or []:
            key = ChunkKey.from_dict(item["key"])
            info.entries[key.digest] = PoolEntry(key, int(item["token_count"]), set(item.get("tiers", [])),
                                                 set(item.get("pinned", [])))
        with self._lock:
            self._instances[instance_id] = info

    def instances(self) -> dict[str, str]:
        with self._lock:
            return {i: info.endpoint for i, info in sorted(self._instances.items())}

    def info(self, instance_id: str) -> InstanceInfo:
        with self._lock:
            info = self._instances.get(instance_id)
        if info is None:
            raise UnknownInstance(instance_id)
        return info

    def query_ip(self, instance_ids) -> dict[str, str]:
        return {i: self.info(i).endpoint for i in instance_ids}

    # events

    def apply(self, instance_id: str, kind: str, key: ChunkKey, tier: str, token_count: int = 0,
              seq: int | None = None) -> None:
        """Apply one store/evict event."""
        with self._lock:
            info = self.info(instance_id)
            if seq is not None:
                if seq <= info.last_seq:
                    return  # redelivered
                if seq != info.last_seq + 1:
                    raise OutOfOrderEvent(f"{instance_id}: event {seq} after {info.last_seq}")
                info.last_seq = seq
            e = info.entries.get(key.digest)
            if kind == "stored":
                if e is None:
                    e = info.entries[key.digest] = PoolEntry(key, token_count)
                e.tiers.add(tier)
            elif kind == "evicted":
                if e is not None:
                    e.tiers.discard(tier)
                    e.pinned.discard(tier)
                    e.codec.pop(tier, None)
                    if not e.tiers:
                        del info.entries[key.digest]
            else:
                raise ValueError(f"unknown event kind {kind!r}")
            self.events_applied += 1

    def set_flag(self, instance_id: str, key: ChunkKey, tier: str, *, pinned: bool | None = None,
                 codec: str | None = None) -> None:
        with self._lock:
            e = self.info(instance_id).entries.get(key.digest)
            if e is None or tier not in e.tiers:
                return
            if pinned is not None:
                (e.pinned.add if pinned else e.pinned.discard)(tier)
            if codec is not None:
                e.codec[tier] = codec

    # queries

    def entries(self, instance_id: str) -> dict[bytes, PoolEntry]:
        with self._lock:
            return dict(self.info(instance_id).entries)

    def lookup(self, tokens) -> dict[str, int]:
        """Prefix-hit tokens per instance; instances without a hit are omitted."""
        out = {}
        with self._lock:
            infos = list(self._instances.values())
            keys_by_layout: dict[tuple, list] = {}
            for info in infos:
                layout = (info.chunk_size, info.model_tag)
                if layout not in keys_by_layout:
                    keys_by_layout[layout] = chunk_keys(tokens, *layout)
                hits = longest_prefix_match(tokens, _Members(info.entries), info.chunk_size, info.model_tag,
                                            keys=keys_by_layout[layout])
                if hits:
                    out[info.instance_id] = hits
        return dict(sorted(out.items()))

    def snapshot(self) -> dict[str, list[dict]]:
        with self._lock:
            return {i: [e.to_dict() for e in info.entries.values()] for i, info in self._instances.items()}


def route(lookup: dict[str, int], instances) -> str:
    """Instance with the most hit tokens; ties go to the lowest id."""
    best = sorted(instances)[0]
    for inst in sorted(instances):
        if lookup.get(inst, 0) > lookup.get(best, 0):
            best = inst
    return best
