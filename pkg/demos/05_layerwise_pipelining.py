"""Overlapping KV loads with compute.

Warm queries load an 8K-token prefix from a deliberately slow RAM tier
(25 MB/s), where loading one layer takes about as long as computing it.
Blocking mode loads everything and then computes. Layer-wise mode starts
layer ``i`` as soon as its KV is in, while the next layer is still
loading. Latencies are wall-clock.

    python demos/05_layerwise_pipelining.py
"""

import numpy as np

from kvtier.kv import ModelSpec
from kvtier.sim.cost import CostModel
from kvtier.sim.engine import SimEngine, SimQuery
from kvtier.storage import DeviceModel, RamPoolBackend, StorageEngine

model = ModelSpec(num_layers=8, bytes_per_token_per_layer=128, model_tag="demo-8x128")
cost = CostModel(a=3.2e-3, b=0, num_layers=8)
rng = np.random.default_rng(4)
ctx = rng.integers(0, 32000, 8192)

for mode in ("blocking", "layerwise"):
    store = StorageEngine(model, [RamPoolBackend(128 << 20, model.chunk_bytes(256), DeviceModel(bandwidth=2.5e7))],
                          realtime=True)
    seed = SimEngine(model, 8 * 600, store=store, mode=mode, cost=cost)
    seed.submit(SimQuery("seed", ctx, max_out=1))
    seed.run()
    e = SimEngine(model, 8 * 600, store=store, mode=mode, clock="wall", cost=cost)
    lat = []
    for i in range(8):
        q = SimQuery(i, np.concatenate([ctx, rng.integers(0, 32000, 100)]), max_out=1, arrival=e.clock.now())
        e.submit(q)
        e.run()
        lat.append(e.records[i].e2e)
    print(f"{mode:9s} mean warm latency {np.mean(lat) * 1e3:6.1f} ms over {len(lat)} queries")
    e.close()
    seed.close()
    store.close()
