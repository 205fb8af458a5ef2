import numpy as np
import pytest

from kvtier.kv import KVChunk, ModelSpec
from kvtier.storage import RamPoolBackend, StorageEngine
from kvtier.tokens import chunk_keys

SMALL = ModelSpec(num_layers=4, bytes_per_token_per_layer=32, page_tokens=16, model_tag="test-4x32")


@pytest.fixture
def model():
    return SMALL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_chunks(model, tokens, rng, chunk_size=256):
    """Random-payload chunks keyed by ``tokens``."""
    out = []
    n = len(tokens)
    for k in chunk_keys(tokens, chunk_size, model.model_tag):
        t = min(chunk_size, n - k.chunk_index * chunk_size)
        payload = rng.integers(0, 256, (model.num_layers, t * model.bytes_per_token_per_layer), dtype=np.uint8)
        out.append(KVChunk(k, t, model.bytes_per_token_per_layer, payload))
    return out


def ram_store(model, chunks=64, **kw):
    slot = model.chunk_bytes(256)
    return StorageEngine(model, [RamPoolBackend(chunks * slot, slot)], **kw)


def assert_no_leaks(store):
    """Every shared buffer was released and nothing is held for reads."""
    assert store.buffers.outstanding() == 0
    assert store.buffers.occupancy == 0
    with store._lock:
        assert all(e.share_count == 0 for e in store._index.values())
