import numpy as np
import pytest
from conftest import SMALL, assert_no_leaks, ram_store
from hypothesis import given, settings
from hypothesis import strategies as st

from kvtier.connector import BLOCKING, LAYERWISE, ChunkMissing, InconsistentAlloc, KVConnector, SchedulerOutput
from kvtier.kv import KVChunk, PagedKVStore, synth_kv
from kvtier.sim.clock import VirtualClock
from kvtier.sim.engine import SimQuery, check_call_order
from kvtier.storage import RAM
from kvtier.tokens import chunk_keys


def true_kv(model, tokens, start, stop, layer):
    pos = np.arange(start, stop, dtype=np.uint64)
    return synth_kv(np.asarray(tokens[start:stop], dtype=np.uint64), pos, layer, model.bytes_per_token_per_layer)


def seed_store(store, model, tokens, upto_chunks):
    """Store the first ``upto_chunks`` chunks of ``tokens`` with their true KV."""
    n = len(tokens)
    for k in chunk_keys(tokens, 256, model.model_tag)[:upto_chunks]:
        s, e = k.chunk_index * 256, min(k.chunk_index * 256 + 256, n)
        payload = np.stack([true_kv(model, tokens, s, e, layer).reshape(-1) for layer in range(model.num_layers)])
        store.put(KVChunk(k, e - s, model.bytes_per_token_per_layer, payload)).result()


def setup(model, tokens, cached_chunks, mode=LAYERWISE, store=None, pages=None, **kw):
    store = store or ram_store(model, chunks=64)
    seed_store(store, model, tokens, cached_chunks)
    pages = pages or PagedKVStore(model, model.num_layers * 160)
    conn = KVConnector(store, pages, VirtualClock(), mode=mode, **kw)
    return store, pages, conn


def schedule(conn, pages, q):
    pt = conn.model.page_tokens
    matched = conn.get_num_new_matched_tokens(q)
    blocks = pages.alloc_blocks(q.query_id, -(-len(q.tokens) // pt))
    conn.update_state_after_alloc(q, blocks, -(-matched // pt))
    (meta,) = conn.build_connector_meta(SchedulerOutput([q.query_id]))
    return meta


def prefill(conn, pages, q, meta):
    """Drive the connector the way an engine does, computing true KV past the loaded prefix."""
    model = conn.model
    n = len(q.tokens)
    start = [meta.matched_tokens] * model.num_layers
    try:
        conn.start_load_kv(meta)
    except ChunkMissing as e:
        start = [min(s, e.safe_tokens) for s in start]
    for layer in range(model.num_layers):
        try:
            conn.wait_load_kv(meta, layer)
        except ChunkMissing as e:
            start[layer:] = [min(s, e.safe_tokens) for s in start[layer:]]
        conn.log("compute_start", q.query_id, layer)
        if start[layer] < n:
            pages.write_tokens(q.query_id, layer, start[layer], true_kv(model, q.tokens, start[layer], n, layer))
        conn.log("compute_done", q.query_id, layer)
        if meta.mode == LAYERWISE:
            if layer:
                conn.wait_store_kv(meta, layer - 1)
            conn.start_store_kv(meta, layer)
    if meta.mode == LAYERWISE:
        conn.wait_store_kv(meta, model.num_layers - 1)
    else:
        conn.start_store_kv(meta)
        conn.wait_store_kv(meta, model.num_layers - 1)
    return start


def assert_pages_true(model, pages, q):
    n = len(q.tokens)
    for layer in range(model.num_layers):
        assert np.array_equal(pages.read_tokens(q.query_id, layer, 0, n), true_kv(model, q.tokens, 0, n, layer))


def test_matched_tokens_examples(model, rng):
    toks = rng.integers(0, 32000, 10_000)
    _, _, conn = setup(model, toks, 39)
    assert conn.get_num_new_matched_tokens(SimQuery("q", toks)) == 9984
    exact = rng.integers(0, 32000, 512)
    _, _, conn2 = setup(model, exact, 2)
    assert conn2.get_num_new_matched_tokens(SimQuery("e", exact)) == 511
    _, _, conn3 = setup(model, exact, 0)
    assert conn3.get_num_new_matched_tokens(SimQuery("c", exact)) == 0


def test_inconsistent_alloc_rejected(model, rng):
    toks = rng.integers(0, 32000, 600)
    _, pages, conn = setup(model, toks, 2)
    q = SimQuery("q", toks)
    assert conn.get_num_new_matched_tokens(q) == 512
    blocks = pages.alloc_blocks("q", 38)
    with pytest.raises(InconsistentAlloc):
        conn.update_state_after_alloc(q, blocks, 31)
    with pytest.raises(InconsistentAlloc):
        conn.update_state_after_alloc(q, [b[:10] for b in blocks], 32)
    conn.update_state_after_alloc(q, blocks, 32)


def test_plans_for_partial_hit(model, rng):
    toks = rng.integers(0, 32000, 600)
    _, pages, conn = setup(model, toks, 2)
    meta = schedule(conn, pages, SimQuery("q", toks))
    assert [(d.start, d.stop) for d in meta.load_plan] == [(0, 256), (256, 512)]
    assert [(d.start, d.stop) for d in meta.store_plan] == [(512, 600)]
    assert all(len(d.page_ids) == model.num_layers for d in meta.load_plan + meta.store_plan)
    assert meta.store_plan[0].page_ids[0] == tuple(pages.page_table("q")[0][32:38])


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 1400), cached=st.integers(0, 6), seed=st.integers(0, 99))
def test_plans_disjoint_and_cover(n, cached, seed):
    toks = np.random.default_rng(seed).integers(0, 32000, n)
    _, pages, conn = setup(SMALL, toks, cached)
    meta = schedule(conn, pages, SimQuery("q", toks))
    load = [i for d in meta.load_plan for i in range(d.start, d.stop)]
    store = [i for d in meta.store_plan for i in range(d.start, d.stop)]
    assert load == list(range(meta.matched_tokens))
    assert not set(load) & set(store)
    stored_chunks = min(cached, -(-n // 256))
    assert store == list(range(stored_chunks * 256, n))


@pytest.mark.parametrize("cached", [0, 1, 2, 3])
def test_blocking_and_layerwise_reach_same_state(model, rng, cached):
    toks = rng.integers(0, 32000, 900)
    q = SimQuery("q", toks)
    results = {}
    for mode in (BLOCKING, LAYERWISE):
        store, pages, conn = setup(model, toks, cached, mode=mode)
        meta = schedule(conn, pages, q)
        assert meta.mode == mode
        prefill(conn, pages, q, meta)
        assert_pages_true(model, pages, q)
        keys = chunk_keys(toks, 256, model.model_tag)
        assert all(k in store for k in keys)
        results[mode] = [store.get(k).payload.tobytes() for k in keys]
        assert not check_call_order(conn.events, model.num_layers)
        assert_no_leaks(store)
        conn.close()
    assert results[BLOCKING] == results[LAYERWISE]


@pytest.mark.parametrize("mode", [BLOCKING, LAYERWISE])
def test_missing_chunk_gives_safe_prefix(model, rng, mode):
    toks = rng.integers(0, 32000, 900)
    store, pages, conn = setup(model, toks, 3, mode=mode)
    q = SimQuery("q", toks)
    meta = schedule(conn, pages, q)
    assert meta.matched_tokens == 768
    keys = chunk_keys(toks, 256, model.model_tag)
    assert store.clear([keys[1]], RAM) == 1
    start = prefill(conn, pages, q, meta)
    assert meta.loaded_tokens == 256 and min(start) == 256
    assert_pages_true(model, pages, q)


def test_layerwise_store_order_and_staging(model, rng):
    toks = rng.integers(0, 32000, 2048)
    store, pages, conn = setup(model, toks, 4, mode=LAYERWISE)
    q = SimQuery("q", toks)
    meta = schedule(conn, pages, q)
    prefill(conn, pages, q, meta)
    assert not check_call_order(conn.events, model.num_layers)
    ops = [(op, layer) for _, op, qid, layer, _ in conn.events if op in ("start_store_kv", "wait_store_kv")]
    for layer in range(1, model.num_layers):
        assert ops.index(("wait_store_kv", layer - 1)) < ops.index(("start_store_kv", layer))
    bpt = model.bytes_per_token_per_layer
    assert meta.peak_load_staging <= meta.matched_tokens * bpt
    assert meta.peak_store_staging <= (2048 - meta.matched_tokens) * bpt
    assert conn.staging.in_use == 0


def test_audit_flags_out_of_order_store():
    ev = [(0, "start_store_kv", "q", 0, {}), (0, "start_store_kv", "q", 1, {})]
    assert check_call_order(ev, 2)
    ev = [(0, "load_issue", "q", 0, {}), (0, "compute_start", "q", 0, {})]
    assert check_call_order(ev, 2)


def test_staging_shortfall_falls_back_to_blocking(model, rng):
    toks = rng.integers(0, 32000, 1024)
    store, pages, conn = setup(model, toks, 2, mode=LAYERWISE, staging_bytes=1024)
    q = SimQuery("q", toks)
    meta = schedule(conn, pages, q)
    prefill(conn, pages, q, meta)
    assert meta.mode == BLOCKING and conn.staging.fallbacks >= 1
    assert_pages_true(model, pages, q)
