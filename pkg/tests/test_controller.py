import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import SMALL, make_chunks, ram_store
from hypothesis import given, settings
from hypothesis import strategies as st

from kvtier.controller import ControlClient, Manager, TokenPool, UnknownInstance, Worker, route
from kvtier.controller import cli as kvctl
from kvtier.storage import RAM
from kvtier.tokens import chunk_keys, longest_prefix_match


class Cluster:
    """A manager plus named instances, each a RAM store with a worker."""

    def __init__(self, names, model=SMALL, chunks=16):
        self.manager = Manager()
        self.stores = {n: ram_store(model, chunks=chunks) for n in names}
        self.workers = {n: Worker(n, s, self.manager.endpoint) for n, s in self.stores.items()}

    def put(self, name, chunks, pin=False):
        for c in chunks:
            self.stores[name].put(c, pin=pin).result()

    def flush(self):
        for w in self.workers.values():
            w.flush()

    def recompute(self, tokens):
        """Lookup answer rebuilt from what the stores actually hold."""
        out = {}
        for name, store in sorted(self.stores.items()):
            held = set(store.keys())
            hit = longest_prefix_match(tokens, held, store.chunk_size, store.model.model_tag)
            if hit:
                out[name] = hit
        return out

    def close(self):
        for w in self.workers.values():
            w.close()
        for s in self.stores.values():
            s.close()
        self.manager.close()


@pytest.fixture
def cluster():
    c = Cluster(["A", "B", "C"])
    yield c
    c.close()


def test_lookup_examples(model, rng, cluster):
    toks = rng.integers(0, 32000, 512)
    chunks = make_chunks(model, toks, rng)
    assert cluster.manager.lookup(toks) == {}
    cluster.put("A", chunks)
    cluster.put("B", chunks[:1])
    cluster.flush()
    assert cluster.manager.lookup(toks) == {"A": 512, "B": 256}
    cluster.stores["A"].clear([chunks[1].key], RAM)
    cluster.flush()
    assert cluster.manager.lookup(toks) == {"A": 256, "B": 256}


def test_lookup_with_no_instances():
    with Manager() as m:
        assert m.lookup([1, 2, 3]) == {}
        assert m.instances() == {}


def test_query_ip(cluster):
    m = cluster.manager
    assert m.query_ip(["A"]) == {"A": cluster.workers["A"].endpoint}
    assert m.query_ip([]) == {}
    with pytest.raises(UnknownInstance):
        m.query_ip(["Z"])
    assert sorted(m.instances()) == ["A", "B", "C"]


def test_move_is_byte_exact(model, rng, cluster):
    toks = rng.integers(0, 32000, 512)
    chunks = make_chunks(model, toks, rng)
    cluster.put("A", chunks)
    cluster.flush()
    out = cluster.manager.move("A", "B", toks)
    assert out["moved_tokens"] == 512 and out["moved_chunks"] == 2
    cluster.flush()
    for c in chunks:
        assert cluster.stores["B"].get(c.key).payload.tobytes() == c.payload.tobytes()
        assert c.key not in cluster.stores["A"]
    assert cluster.manager.lookup(toks) == {"B": 512}
    assert cluster.manager.move("C", "A", toks)["moved_tokens"] == 0


def test_move_partial_source_moves_prefix(model, rng, cluster):
    toks = rng.integers(0, 32000, 768)
    chunks = make_chunks(model, toks, rng)
    cluster.put("A", [chunks[0], chunks[2]])
    cluster.flush()
    assert cluster.manager.move("A", "C", toks)["moved_tokens"] == 256
    cluster.flush()
    assert cluster.manager.lookup(toks) == {"C": 256}
    assert chunks[2].key in cluster.stores["A"]


def test_pin_survives_eviction_pressure(model, rng):
    c = Cluster(["A"], chunks=4)
    try:
        system = rng.integers(0, 32000, 512)
        sys_chunks = make_chunks(model, system, rng)
        c.put("A", sys_chunks)
        c.flush()
        assert c.manager.pin(system, "A", "ram")["pinned"] == 2
        for _ in range(5):
            c.put("A", make_chunks(model, rng.integers(0, 32000, 512), rng))
        c.flush()
        for ch in sys_chunks:
            assert c.stores["A"].contains(ch.key) == {RAM}
        assert c.manager.lookup(system) == {"A": 512}
        assert c.manager.pool.entries("A")[sys_chunks[0].key.digest].pinned == {"ram"}
        assert c.manager.clear(system, "A", "ram")["refused"] == 2
    finally:
        c.close()


def test_clear_wrong_tier_and_compress_identity(model, rng, cluster):
    toks = rng.integers(0, 32000, 512)
    chunks = make_chunks(model, toks, rng)
    cluster.put("A", chunks)
    cluster.flush()
    assert cluster.manager.clear(toks, "A", "disk")["cleared"] == 0
    out = cluster.manager.compress(toks, "A", "ram", "identity")
    assert out["sizes"] == [c.nbytes for c in chunks]
    assert cluster.manager.pool.entries("A")[chunks[0].key.digest].codec == {"ram": "identity"}
    assert cluster.manager.compress(toks, "A", "ram", "nope")["results"] == ["unknown_codec"] * 2
    assert cluster.manager.clear(toks, "A", "ram")["cleared"] == 2
    cluster.flush()
    assert cluster.manager.lookup(toks) == {}
    with pytest.raises(UnknownInstance):
        cluster.manager.clear(toks, "Z", "ram")


def test_register_event_ordering():
    pool = TokenPool()
    pool.register_instance("A", "a:1")
    pool.register_instance("B", "b:1")
    toks = np.arange(256)
    (k,) = chunk_keys(toks, 256)
    pool.apply("A", "stored", k, "ram", 256)
    pool.apply("A", "stored", k, "ram", 256)  # duplicate is idempotent
    pool.apply("B", "stored", k, "ram", 256)
    pool.apply("A", "evicted", k, "ram")
    assert pool.lookup(toks) == {"B": 256}
    with pytest.raises(UnknownInstance):
        pool.apply("Z", "stored", k, "ram")


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_registry_faithful_after_quiescence(seed):
    r = np.random.default_rng(seed)
    docs = [r.integers(0, 32000, int(r.integers(1, 5)) * 256) for _ in range(6)]
    doc_chunks = [make_chunks(SMALL, d, r) for d in docs]
    c = Cluster(["A", "B", "C"], chunks=6)
    try:
        names = ["A", "B", "C"]
        for _ in range(30):
            op = r.random()
            i = int(r.integers(0, len(docs)))
            inst = names[int(r.integers(0, 3))]
            if op < 0.5:
                c.put(inst, doc_chunks[i][: int(r.integers(1, len(doc_chunks[i]) + 1))])
            elif op < 0.65:
                c.stores[inst].clear([doc_chunks[i][int(r.integers(0, len(doc_chunks[i])))].key], RAM)
            elif op < 0.8:
                c.flush()
                dst = names[int(r.integers(0, 3))]
                if dst != inst:
                    c.manager.move(inst, dst, docs[i])
            elif op < 0.9:
                c.flush()
                c.manager.pin(docs[i], inst, "ram", on=bool(r.random() < 0.5))
            else:
                c.flush()
                c.manager.compress(docs[i], inst, "ram", "identity")
        c.flush()
        for d in docs:
            assert c.manager.lookup(d) == c.recompute(d)
    finally:
        c.close()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_router_beats_any_single_instance(seed):
    r = np.random.default_rng(seed)
    insts = ["A", "B", "C"]
    docs = [r.integers(0, 50, int(r.integers(1, 6)) * 16) for _ in range(5)]
    preload = {i: [docs[int(j)][: int(r.integers(1, len(docs[int(j)]) + 1))] for j in r.integers(0, 5, 2)]
               for i in insts}
    trace = [np.concatenate([docs[int(r.integers(0, 5))], r.integers(0, 50, int(r.integers(1, 20)))])
             for _ in range(12)]

    def run(policy):
        pool = TokenPool()
        for i in insts:
            snap = [{"key": k.to_dict(), "token_count": 16, "tiers": ["ram"]}
                    for seq in preload[i] for k in chunk_keys(seq, 16)]
            pool.register_instance(i, i, chunk_size=16, snapshot=snap)
        total = 0
        for q in trace:
            hits = pool.lookup(q)
            target = route(hits, insts) if policy is None else policy
            total += hits.get(target, 0)
            for k in chunk_keys(q, 16):
                pool.apply(target, "stored", k, "ram", 16)
        return total

    routed = run(None)
    assert all(routed >= run(i) for i in insts)


def test_route_ties_go_to_lowest_id():
    assert route({}, ["B", "A", "C"]) == "A"
    assert route({"B": 10, "C": 10}, ["A", "B", "C"]) == "B"
    assert route({"C": 11, "B": 10}, ["A", "B", "C"]) == "C"


def test_kvctl_commands(model, rng, cluster, capsys):
    toks = rng.integers(0, 32000, 512)
    cluster.put("A", make_chunks(model, toks, rng))
    cluster.flush()
    base = ["--manager", cluster.manager.endpoint]
    t = ",".join(str(int(x)) for x in toks)

    def run(*args):
        assert kvctl.main(base + list(args)) == 0
        return json.loads(capsys.readouterr().out)

    assert run("lookup", "--tokens", t) == {"A": 512}
    assert sorted(run("instances")) == ["A", "B", "C"]
    assert run("instances", "B") == {"B": cluster.workers["B"].endpoint}
    assert run("pin", "--instance", "A", "--tier", "ram", "--tokens", t)["pinned"] == 2
    assert run("pin", "--instance", "A", "--tier", "ram", "--off", "--tokens", t)["pinned"] == 2
    assert run("compress", "--instance", "A", "--tier", "ram", "--method", "identity", "--tokens", t)["compressed"] == 2
    assert run("move", "--src", "A", "--dst", "C", "--tokens", t)["moved_tokens"] == 512
    cluster.flush()
    assert run("clear", "--instance", "C", "--tier", "ram", "--tokens", t)["cleared"] == 2
    assert kvctl.main(base + ["instances", "nope"]) == 1
    assert json.loads(capsys.readouterr().out)["error"] == "RemoteError"
    with ControlClient(cluster.manager.endpoint) as cc:
        cluster.flush()
        assert cc.lookup(toks) == {}


def test_kvctl_entry_point(cluster):
    out = subprocess.run([sys.executable, "-m", "kvtier.controller.cli", "--manager", cluster.manager.endpoint,
                          "instances"], capture_output=True, text=True, timeout=60)
    assert out.returncode == 0 and sorted(json.loads(out.stdout)) == ["A", "B", "C"]
