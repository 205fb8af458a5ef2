"""Tiers, eviction, pinning, corruption fallback and compression.

A tiny RAM tier (four chunks) sits above a local disk tier. Chunks written
to both tiers share one buffer. RAM evicts least recently used chunks, but
a pinned chunk stays. A damaged disk copy is detected by its checksum and
the read falls back to RAM. Finally a chunk is re-encoded with ``q8-scale``.

    python demos/02_tiers_pinning_codecs.py
"""

import tempfile
from pathlib import Path

import numpy as np

from kvtier.kv import KVChunk, ModelSpec
from kvtier.storage import DISK, RAM, LocalDiskBackend, RamPoolBackend, StorageEngine
from kvtier.storage.codecs import Q8ScaleCodec
from kvtier.tokens import chunk_keys

model = ModelSpec(num_layers=4, bytes_per_token_per_layer=64, model_tag="demo-4x64")
rng = np.random.default_rng(1)
tmp = tempfile.TemporaryDirectory()
slot = model.chunk_bytes(256)
store = StorageEngine(model, [RamPoolBackend(4 * slot, slot), LocalDiskBackend(tmp.name)],
                      default_tiers=[RAM, DISK])


def chunk(key):
    payload = rng.integers(0, 256, (model.num_layers, 256 * model.bytes_per_token_per_layer), dtype=np.uint8)
    return KVChunk(key, 256, model.bytes_per_token_per_layer, payload)


keys = chunk_keys(rng.integers(0, 32000, 256 * 8), 256, model.model_tag)
chunks = [chunk(k) for k in keys]
store.put(chunks[0]).result()
store.pin(keys[0], RAM)
print("chunk 0 written to RAM and disk and pinned in RAM")
for c in chunks[1:]:
    store.put(c).result()
print("RAM now holds chunks", [keys.index(k) for k in store.keys(RAM)], "(0 survived, LRU evicted the rest)")
print("disk holds", len(store.keys(DISK)), "chunks")

(path,) = [f for f in Path(tmp.name).rglob("*") if f.is_file() and keys[0].hex in f.name]
raw = bytearray(path.read_bytes())
raw[100] ^= 0xFF
path.write_bytes(bytes(raw))
got = store.read(keys[0], prefer=[DISK, RAM])
print(f"read of chunk 0 after damaging its disk file came from {got.tier}; bytes intact:",
      bytes(np.asarray(got.data)) == chunks[0].payload.tobytes())

size = store.compress_entry(keys[7], RAM, "q8-scale")
back = store.get(keys[7], prefer=[RAM]).payload
err = np.abs(back.reshape(-1).view("<i2").astype(int) - chunks[7].payload.reshape(-1).view("<i2").astype(int)).max()
print(f"q8-scale: {chunks[7].nbytes} -> {size} bytes, worst lane error {err} "
      f"(bound {Q8ScaleCodec.error_bound(chunks[7].payload):.1f})")
store.close()
tmp.cleanup()
