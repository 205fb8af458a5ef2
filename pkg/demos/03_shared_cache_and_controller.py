"""A shared cache server and the controller.

Two engines each keep a small local RAM tier and use one cache server as a
remote tier. Engine A answers a question about a document; engine B then
gets a question about the same document and loads the KV that A stored on
the server. Separately, a controller tracks which instance holds which
chunks, and moves and pins them on request.

    python demos/03_shared_cache_and_controller.py
"""

import numpy as np

from kvtier.controller import Manager, Worker
from kvtier.kv import KVChunk, ModelSpec
from kvtier.sim.cost import CostModel
from kvtier.sim.engine import SimEngine, SimQuery
from kvtier.storage import RAM, RamPoolBackend, Remote, StorageEngine
from kvtier.tokens import chunk_keys
from kvtier.transfer.remote import RemoteBackend
from kvtier.transfer.server import serve

model = ModelSpec(num_layers=8, bytes_per_token_per_layer=128, model_tag="demo-8x128")
slot = model.chunk_bytes(256)
rng = np.random.default_rng(2)

server_store = StorageEngine(model, [RamPoolBackend(128 << 20, slot)])
server = serve("127.0.0.1:0", server_store)
print("cache server at", server.endpoint)

engines = {}
for name in ("A", "B"):
    s = StorageEngine(model, [RamPoolBackend(16 << 20, slot), RemoteBackend("central", server.endpoint)],
                      default_tiers=[RAM, Remote("central")])
    engines[name] = SimEngine(model, model.num_layers * 800, store=s, cost=CostModel(num_layers=8), name=name)

doc = rng.integers(0, 32000, 6000)
for name in ("A", "B"):
    e = engines[name]
    q = SimQuery(name, np.concatenate([doc, rng.integers(0, 32000, 30)]), max_out=10)
    e.submit(q)
    e.run()
    rec = e.records[name]
    print(f"engine {name}: reused {rec.loaded_tokens} of {rec.prompt_tokens} tokens from {rec.loaded_from or '-'}, "
          f"TTFT {rec.ttft * 1e3:.2f} ms")

print("\ncontroller:")
manager = Manager()
stores = {n: StorageEngine(model, [RamPoolBackend(32 * slot, slot)]) for n in ("X", "Y")}
workers = {n: Worker(n, s, manager.endpoint) for n, s in stores.items()}
tokens = rng.integers(0, 32000, 1024)
for k in chunk_keys(tokens, 256, model.model_tag):
    payload = rng.integers(0, 256, (model.num_layers, 256 * 128), dtype=np.uint8)
    stores["X"].put(KVChunk(k, 256, 128, payload)).result()
for w in workers.values():
    w.flush()
print("  lookup:", manager.lookup(tokens))
print("  move X -> Y:", {k: v for k, v in manager.move("X", "Y", tokens).items() if k != "status"})
for w in workers.values():
    w.flush()
print("  lookup:", manager.lookup(tokens))
print("  pin on Y:", manager.pin(tokens, "Y", "ram"))

for w in workers.values():
    w.close()
manager.close()
for s in stores.values():
    s.close()
for e in engines.values():
    e.close()
    for b in e.connector.store.backends.values():
        if isinstance(b, RemoteBackend):
            b.close()
    e.connector.store.close()
server.close()
server_store.close()
