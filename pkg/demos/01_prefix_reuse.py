"""Prefix reuse on one engine.

A long document is asked about twice. The first query computes its KV and
stores it chunk by chunk; the second finds every chunk in RAM, loads it and
only computes its own question. Both produce the same tokens as an engine
with no cache at all.

    python demos/01_prefix_reuse.py
"""

import numpy as np

from kvtier.kv import ModelSpec
from kvtier.sim.cost import CostModel
from kvtier.sim.engine import SimEngine, SimQuery, cache_free_outputs
from kvtier.storage import RamPoolBackend, StorageEngine

model = ModelSpec(num_layers=8, bytes_per_token_per_layer=128, model_tag="demo-8x128")
store = StorageEngine(model, [RamPoolBackend(256 << 20, model.chunk_bytes(256))])
engine = SimEngine(model, model.num_layers * 1200, store=store, cost=CostModel(num_layers=8))

rng = np.random.default_rng(0)
doc = rng.integers(0, 32000, 12_000)
questions = [rng.integers(0, 32000, 40) for _ in range(2)]

for i, q in enumerate(questions):
    query = SimQuery(f"q{i}", np.concatenate([doc, q]), max_out=20, arrival=engine.clock.now())
    engine.submit(query)
    engine.run()
    rec = engine.records[query.query_id]
    ref = cache_free_outputs(model, [query])[query.query_id]
    print(f"{query.query_id}: prompt {rec.prompt_tokens} tokens, reused {rec.loaded_tokens}, "
          f"TTFT {rec.ttft * 1e3:7.2f} ms, same tokens as a cache-free engine: {rec.outputs == ref}")

print(f"chunks held in RAM: {len(store.keys())}")
engine.close()
store.close()
