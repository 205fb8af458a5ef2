"""Acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL`` line (outside pytest's
capture, so it shows in the log) before asserting.
"""

import time

import numpy as np
import pytest
from conftest import SMALL, assert_no_leaks, make_chunks
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from test_controller import Cluster
from wire_oracle import fuzz_frame, reference_parse

from kvtier.bench.scenarios import run_scenario
from kvtier.bench.workloads import WorkloadSpec
from kvtier.kv import ModelSpec
from kvtier.offloader import Granted, exhaustive_check, init
from kvtier.sim.cost import CostModel
from kvtier.sim.engine import SimEngine, SimQuery, cache_free_outputs, check_call_order
from kvtier.storage import DISK, RAM, DeviceModel, LocalDiskBackend, NotFound, RamPoolBackend, StorageEngine
from kvtier.storage.backends import TierFull
from kvtier.transfer.client import WireClient
from kvtier.transfer.pd import PdReceiver, pd_push
from kvtier.transfer.protocol import FrameParser, parse_stream
from kvtier.transfer.server import WireServer
from kvtier.transfer.throughput import KiB, MiB, page_vs_chunk_push, size_sweep


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# 1 -----------------------------------------------------------------------------

RANDOM_QUERIES = dict(kind="poisson_random", doc_tokens=3000, min_doc_tokens=300, question_tokens=64,
                      output_tokens=8, qps=20, duration=52, num_docs=12, seed=1)


@pytest.mark.parametrize("scenario", ["cpu_offload", "central_storage", "pd"])
def test_criterion_1_outputs_match_cache_free(capsys, scenario):
    t0 = time.perf_counter()
    r = run_scenario(scenario, WorkloadSpec(**RANDOM_QUERIES))
    dt = time.perf_counter() - t0
    n = r.aggregates["queries"]
    hits = sum(1 for row in r.rows if row["loaded_tokens"])
    ok = n >= 1000 and r.outputs_match is True and not r.mismatches and dt <= 300
    verdict(capsys, 1, ok, f"{scenario}: {n} queries, {len(r.mismatches)} mismatches, "
                           f"{hits} served from cache, {dt:.1f}s")


# 2 -----------------------------------------------------------------------------

def test_criterion_2_round_trip_byte_exact(capsys, tmp_path):
    m = SMALL
    rng = np.random.default_rng(2)
    slot = m.chunk_bytes(256)
    bad = []

    def check(path, got, want):
        if got.payload.tobytes() != want.payload.tobytes() or got.key != want.key \
                or got.token_count != want.token_count:
            bad.append(path)

    store = StorageEngine(m, [RamPoolBackend(256 * slot, slot), LocalDiskBackend(tmp_path / "d")])
    chunks = make_chunks(m, rng.integers(0, 32000, 256 * 40 + 77), rng)
    direct, batched, coded = chunks[:14], chunks[14:28], chunks[28:]
    for c in direct:
        store.put(c, [RAM, DISK]).result()
    store.batch_put([(c, [RAM] if i % 2 else [DISK]) for i, c in enumerate(batched)]).result()
    for c in coded:
        store.put(c, [RAM, DISK]).result()
        for tier in (RAM, DISK):
            store.compress_entry(c.key, tier, "identity")
    for c in chunks:
        for tier in store.contains(c.key):
            check(f"store:{tier}", store.get(c.key, prefer=[tier]), c)
            for layer in range(m.num_layers):
                if not np.array_equal(store.read_layer(c.key, layer, prefer=[tier]).data, c.payload[layer]):
                    bad.append(f"layer:{tier}")
    assert_no_leaks(store)
    store.close()

    cl = Cluster(["A", "B", "C"])
    try:
        toks = rng.integers(0, 32000, 256 * 6 + 10)
        moved = make_chunks(m, toks, rng)
        cl.put("A", moved)
        cl.flush()
        cl.manager.move("A", "C", toks)
        cl.flush()
        for c in moved:
            check("move", cl.stores["C"].get(c.key), c)
    finally:
        cl.close()

    recv = PdReceiver(m)
    pushed = make_chunks(m, rng.integers(0, 32000, 256 * 32 + 5), rng)
    with WireServer("127.0.0.1:0", recv.handlers(), recv.sinks()) as srv, WireClient(srv.endpoint) as c:
        recv.register("q", [p.token_count for p in pushed])
        for i, p in enumerate(pushed):
            pd_push(c, "q", i, p)
        for got, want in zip(recv.pd_await("q"), pushed):
            check("pd", got, want)
    total = len(chunks) + len(moved) + len(pushed)
    verdict(capsys, 2, not bad, f"{total} chunks over direct/batched/identity-codec/move/pd paths, "
                                f"{len(bad)} mismatches {sorted(set(bad))[:5]}")


# 3 -----------------------------------------------------------------------------

def test_criterion_3_chunk_vs_page_throughput(capsys):
    t0 = time.perf_counter()
    sweep = size_sweep((64 * KiB, 256 * KiB, MiB, 16 * MiB), total_bytes=1 << 30, repeats=2)
    dt = time.perf_counter() - t0
    gbps = [s.gbps for s in sweep]
    # one 16-token page of one layer of the default layout is 64 KiB
    assert ModelSpec().page_bytes == 64 * KiB
    ratio = gbps[-1] / gbps[0]
    monotone = all(b >= a for a, b in zip(gbps, gbps[1:]))
    ok = ratio >= 3 and monotone and dt <= 120
    verdict(capsys, 3, ok, f"GB/s at 64K/256K/1M/16M = {[round(g, 3) for g in gbps]}, "
                           f"16M/64K = {ratio:.2f}x, monotone={monotone}, {dt:.1f}s")


# 4 -----------------------------------------------------------------------------

def _warm_latencies(mode, ctx, suffixes, model, cost, device):
    store = StorageEngine(model, [RamPoolBackend(256 << 20, model.chunk_bytes(256), device)], realtime=True)
    pages = model.num_layers * 600
    warm = SimEngine(model, pages, store=store, mode=mode, clock="virtual", cost=cost)
    warm.submit(SimQuery("seed", ctx, max_out=1))
    warm.run()
    e = SimEngine(model, pages, store=store, mode=mode, clock="wall", cost=cost)
    lat, wrong = [], 0
    for i, suf in enumerate(suffixes):
        q = SimQuery(i, np.concatenate([ctx, suf]), max_out=1, arrival=e.clock.now())
        e.submit(q)
        e.run()
        rec = e.records[i]
        lat.append(rec.e2e)
        wrong += rec.outputs != cache_free_outputs(model, [q])[i] or rec.loaded_tokens != len(ctx)
    problems = check_call_order(e.connector.events, model.num_layers)
    e.close()
    warm.close()
    store.close()
    return lat, wrong, problems


def test_criterion_4_layerwise_pipelining(capsys):
    m = ModelSpec(num_layers=8, bytes_per_token_per_layer=128, page_tokens=16, model_tag="bench-8x128")
    rng = np.random.default_rng(0)
    ctx = rng.integers(0, 32000, 8192)
    suffixes = [rng.integers(0, 32000, 100) for _ in range(100)]
    device = DeviceModel(bandwidth=2.5e7)
    cost = CostModel(a=3.2e-3, b=0, num_layers=8)
    per_layer_load = device.seconds(len(ctx) * m.bytes_per_token_per_layer)
    per_layer_compute = cost.layer_cost(len(ctx), len(ctx) + 100)
    assert 0.8 < per_layer_compute / per_layer_load < 1.25
    t0 = time.perf_counter()
    out = {mode: _warm_latencies(mode, ctx, suffixes, m, cost, device) for mode in ("layerwise", "blocking")}
    dt = time.perf_counter() - t0
    lw, bl = (float(np.mean(out[k][0])) for k in ("layerwise", "blocking"))
    ratio = lw / bl
    wrong = out["layerwise"][1] + out["blocking"][1]
    problems = out["layerwise"][2] + out["blocking"][2]
    ok = ratio <= 0.75 and not wrong and not problems and dt <= 180
    verdict(capsys, 4, ok, f"warm e2e over 100 queries: layerwise {lw * 1e3:.1f} ms, blocking {bl * 1e3:.1f} ms, "
                           f"ratio {ratio:.3f}; wrong={wrong}, order problems={len(problems)}, {dt:.1f}s")


# 5 -----------------------------------------------------------------------------

def test_criterion_5_offloader(capsys):
    t0 = time.perf_counter()
    res = exhaustive_check(max_pool=6, max_window=4, max_ops=12)
    r = np.random.default_rng(5)
    ops = unsafe = 0
    while ops < 100_000:
        pool = int(r.integers(0, 40))
        w = init(range(pool), int(r.integers(0, 12)))
        for _ in range(500):
            ops += 1
            if r.random() < 0.5:
                w.advance(int(r.integers(1, 6)))
            else:
                got = w.on_alloc(int(r.integers(0, max(1, pool - w.consumed) + 1)))
                if isinstance(got, Granted):
                    unsafe += sum(w.free_pages.index(p) >= w.current for p in got.pages)
    dt = time.perf_counter() - t0
    ok = res.ok and unsafe == 0 and dt <= 120
    verdict(capsys, 5, ok, f"{res.states} states: {len(res.safety_violations)} safety violations, "
                           f"{len(res.unresolvable_stalls)} unresolvable stalls; {ops} random ops, "
                           f"{unsafe} unsafe grants; {dt:.1f}s")


# 6 -----------------------------------------------------------------------------

_leaks = {"runs": 0, "bad": 0}


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 100_000), ops=st.integers(5, 40))
def _leak_property(tmp_path_factory, seed, ops):
    r = np.random.default_rng(seed)
    m = SMALL
    slot = m.chunk_bytes(256)
    store = StorageEngine(m, [RamPoolBackend(6 * slot, slot), LocalDiskBackend(tmp_path_factory.mktemp("d"))],
                          demote_on_evict=bool(r.random() < 0.5))
    docs = [r.integers(0, 32000, int(r.integers(1, 4)) * 256 + int(r.integers(0, 200))) for _ in range(4)]
    chunks = [make_chunks(m, d, r) for d in docs]
    flat = [c for cs in chunks for c in cs]
    try:
        for _ in range(ops):
            c = flat[int(r.integers(len(flat)))]
            op = r.random()
            tiers = [[RAM], [DISK], [RAM, DISK]][int(r.integers(3))]
            try:
                if op < 0.3:
                    store.put(c, tiers, pin=bool(r.random() < 0.1)).result()
                elif op < 0.4:
                    store.batch_put([(x, tiers) for x in chunks[int(r.integers(4))]]).result()
                elif op < 0.55:
                    store.get(c.key)
                elif op < 0.65:
                    store.read_layer(c.key, int(r.integers(m.num_layers)))
                elif op < 0.72:
                    store.clear([c.key], tiers[0])
                elif op < 0.8:
                    store.pin(c.key, tiers[0], on=bool(r.random() < 0.5))
                elif op < 0.88:
                    store.compress_entry(c.key, tiers[0], "q8-scale" if r.random() < 0.5 else "identity")
                else:
                    e = SimEngine(m, m.num_layers * 64, store=store, cost=CostModel(num_layers=m.num_layers),
                                  max_concurrent=2)
                    for i, d in enumerate(docs[:2]):
                        e.submit(SimQuery(i, d, max_out=int(r.integers(0, 5))))
                    e.run()
                    e.close()
            except (NotFound, TierFull):  # expected outcomes of random operations
                pass
            assert_no_leaks(store)
    except AssertionError:
        _leaks["bad"] += 1
        raise
    finally:
        _leaks["runs"] += 1
        store.close()


def test_criterion_6_zero_leaks(capsys, tmp_path_factory):
    err = None
    try:
        _leak_property(tmp_path_factory)
    except AssertionError as e:
        err = e
    verdict(capsys, 6, err is None and _leaks["bad"] == 0,
            f"{_leaks['runs']} randomized store/engine runs, buffers and share counts back to zero after every op"
            + ("" if err is None else f"; first failure: {err}"))


# 7 -----------------------------------------------------------------------------

def test_criterion_7_controller_faithful(capsys):
    bad = []
    runs = 25
    for seed in range(runs):
        r = np.random.default_rng(seed)
        docs = [r.integers(0, 32000, int(r.integers(1, 5)) * 256) for _ in range(6)]
        doc_chunks = [make_chunks(SMALL, d, r) for d in docs]
        c = Cluster(["A", "B", "C"], chunks=6)
        names = ["A", "B", "C"]
        try:
            for _ in range(40):
                op, i, inst = r.random(), int(r.integers(len(docs))), names[int(r.integers(3))]
                if op < 0.5:
                    c.put(inst, doc_chunks[i][: int(r.integers(1, len(doc_chunks[i]) + 1))])
                elif op < 0.65:
                    c.stores[inst].clear([doc_chunks[i][int(r.integers(len(doc_chunks[i])))].key], RAM)
                elif op < 0.85:
                    c.flush()
                    dst = names[int(r.integers(3))]
                    if dst != inst:
                        before = {k.digest: c.stores[inst].get(k).payload.tobytes()
                                  for k in c.stores[inst].keys()}
                        c.manager.move(inst, dst, docs[i])
                        c.flush()
                        for ch in doc_chunks[i]:
                            if ch.key.digest in before and ch.key in c.stores[dst] \
                                    and c.stores[dst].get(ch.key).payload.tobytes() != before[ch.key.digest]:
                                bad.append(f"seed {seed}: move not byte-exact")
                else:
                    c.flush()
                    c.manager.pin(docs[i], inst, "ram", on=bool(r.random() < 0.5))
            c.flush()
            for d in docs:
                if c.manager.lookup(d) != c.recompute(d):
                    bad.append(f"seed {seed}: lookup {c.manager.lookup(d)} != {c.recompute(d)}")
        finally:
            c.close()

    rng = np.random.default_rng(77)
    c = Cluster(["A", "B", "C"], chunks=4)
    try:
        system = rng.integers(0, 32000, 512)
        sys_chunks = make_chunks(SMALL, system, rng)
        c.put("A", sys_chunks)
        c.flush()
        c.manager.pin(system, "A", "ram")
        for _ in range(6):
            c.put("A", make_chunks(SMALL, rng.integers(0, 32000, 512), rng))
        c.flush()
        if not all(RAM in c.stores["A"].contains(ch.key) for ch in sys_chunks):
            bad.append("pinned chunk evicted")
        if c.manager.lookup(system) != {"A": 512}:
            bad.append("pinned chunk missing from lookup")
    finally:
        c.close()
    verdict(capsys, 7, not bad, f"{runs} randomized 3-instance runs plus pin pressure: {len(bad)} problems {bad[:3]}")


# 8 -----------------------------------------------------------------------------

def test_criterion_8_pd_equivalence_and_breakdown(capsys):
    spec = WorkloadSpec(kind="multi_round_qa", doc_tokens=8192, question_tokens=50, output_tokens=40,
                        initial_users=6, rounds=2, think_time=0.5, seed=8)
    pd = run_scenario("pd", spec)
    mono = run_scenario("cpu_offload", spec)
    mono_out = {row["query_id"]: row for row in mono.rows}
    same = pd.outputs_match is True and mono.outputs_match is True \
        and pd.extra["first_token_mismatches"] == 0 \
        and all(row["output_tokens"] == mono_out[row["query_id"]]["output_tokens"] for row in pd.rows)
    worst = max(abs(sum(row["segments"].values()) - row["e2e"]) / row["e2e"] for row in pd.rows)
    parts_ok = all(set(row["segments"]) == {"prefill", "transfer", "decode"} for row in pd.rows)
    push = page_vs_chunk_push(8192)
    ok = same and parts_ok and worst < 0.01 and push["ratio"] <= 0.5 and push["pages_match"]
    verdict(capsys, 8, ok, f"pd == monolithic == reference: {same}; worst segment accounting error "
                           f"{worst:.2e}; chunk/page push time {push['ratio']:.3f} "
                           f"({push['chunk_messages']} vs {push['page_messages']} messages)")


# 9 -----------------------------------------------------------------------------

def test_criterion_9_reuse_benefit(capsys):
    r = run_scenario("cpu_offload", WorkloadSpec())
    cold = [row["ttft"] for row in r.rows if row["round"] == 1]
    warm = [row["ttft"] for row in r.rows if row["round"] >= 2]
    ratio = float(np.mean(warm)) / float(np.mean(cold))
    hit = r.aggregates["hit_ratio_round2plus"]
    ok = ratio < 0.5 and hit > 0.9 and r.outputs_match is True
    verdict(capsys, 9, ok, f"default multi-round QA ({len(r.rows)} queries): warm/cold TTFT {ratio:.3f}, "
                           f"round-2+ hit ratio {hit:.3f}, outputs match {r.outputs_match}")


# 10 ----------------------------------------------------------------------------

def test_criterion_10_wire_fuzz(capsys):
    r = np.random.default_rng(10)
    t0 = time.perf_counter()
    n = 1_000_000
    mismatched = nondeterministic = errors = 0
    for i in range(n):
        data = fuzz_frame(r)
        got, err, _ = parse_stream(data)
        offset = err.offset if err else None
        if offset is not None:
            errors += 1
        again = parse_stream(data)[1]
        if (again.offset if again else None) != offset:
            nondeterministic += 1
        if i % 10 == 0:  # full structural comparison against the independent parser on a tenth
            frames, ref = reference_parse(data)
            if ref != offset or [(int(g.op), g.request_id, g.meta, bytes(g.body)) for g in got] != frames:
                mismatched += 1
            p = FrameParser()
            cut = int(r.integers(0, len(data) + 1))
            p.feed(data[:cut])
            p.feed(data[cut:])
            if (p.error.offset if p.error else None) != offset:
                nondeterministic += 1
    dt = time.perf_counter() - t0
    ok = mismatched == 0 and nondeterministic == 0 and dt <= 120
    verdict(capsys, 10, ok, f"{n} fuzzed frames, {errors} rejected, 0 crashes, {mismatched} offset mismatches "
                            f"vs reference, {nondeterministic} nondeterministic, {dt:.1f}s")
