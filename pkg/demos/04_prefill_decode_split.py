"""Prefill on one engine, decode on another.

The prefiller computes an 8K-token prompt and pushes its KV chunk by chunk
to the decoder over a loopback connection. The decoder writes the chunks
into its own pages and generates. The tokens match a single engine doing
both, and the latency splits into prefill, transfer and decode.

It then times moving the same KV page by page against chunk by chunk.

    python demos/04_prefill_decode_split.py
"""

import numpy as np

from kvtier.kv import ModelSpec
from kvtier.sim.cost import CostModel
from kvtier.sim.engine import SimQuery, cache_free_outputs
from kvtier.sim.pd import PdPair
from kvtier.storage import DeviceModel
from kvtier.transfer.throughput import page_vs_chunk_push

model = ModelSpec(num_layers=8, bytes_per_token_per_layer=128, model_tag="demo-8x128")
rng = np.random.default_rng(3)
q = SimQuery("q", rng.integers(0, 32000, 8192), max_out=50)
pages = model.num_layers * (8192 // 16 + 8)
with PdPair(model, prefill_pages=pages, decode_pages=pages, cost=CostModel(num_layers=8),
            link=DeviceModel(bandwidth=1e9, latency=1e-4)) as pair:
    rec = pair.run([q])["q"]
print("same tokens as one engine:", rec.outputs == cache_free_outputs(model, [q])["q"])
for name, secs in rec.segments.items():
    print(f"  {name:9s} {secs * 1e3:8.2f} ms")
print(f"  {'total':9s} {rec.e2e * 1e3:8.2f} ms")

r = page_vs_chunk_push(8192)
print(f"\nmoving {r['bytes'] >> 20} MiB of KV on loopback: {r['page_messages']} page messages take "
      f"{r['page_seconds'] * 1e3:.0f} ms, {r['chunk_messages']} chunk messages take "
      f"{r['chunk_seconds'] * 1e3:.0f} ms")
