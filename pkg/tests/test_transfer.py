import socket
import struct

import numpy as np
import pytest
from conftest import SMALL, make_chunks
from hypothesis import given, settings
from hypothesis import strategies as st
from wire_oracle import fuzz_frame, reference_parse

from kvtier.kv import KVChunk, ModelSpec, PagedKVStore, synth_kv
from kvtier.storage import RamPoolBackend, Remote, StorageEngine
from kvtier.tokens import chunk_keys
from kvtier.transfer.client import WireClient, parse_endpoint, read_message
from kvtier.transfer.pd import PdReceiver, UnknownQuery, pd_push, plan_batches, send_chunks
from kvtier.transfer.protocol import HEADER, MAGIC, FrameParser, Message, Op, RemoteError, parse_stream
from kvtier.transfer.remote import RemoteBackend
from kvtier.transfer.server import WireServer, serve


@pytest.fixture
def server(model):
    slot = model.chunk_bytes(256)
    store = StorageEngine(model, [RamPoolBackend(256 * slot, slot)])
    srv = serve("127.0.0.1:0", store, max_payload=8 << 20)
    yield srv, store
    srv.close()
    store.close()


def test_cross_client_put_get(model, rng, server):
    srv, _ = server
    R = Remote("central")
    a = StorageEngine(model, [RemoteBackend("central", srv.endpoint)], default_tiers=[R])
    b = StorageEngine(model, [RemoteBackend("central", srv.endpoint)], default_tiers=[R])
    chunks = make_chunks(model, rng.integers(0, 32000, 700), rng)
    for c in chunks:
        assert a.put(c).result().status == {R: "ok"}
    for c in chunks:
        assert b.contains(c.key) == {R}
        assert b.get(c.key).payload.tobytes() == c.payload.tobytes()
        assert np.array_equal(b.read_layer(c.key, 2).data, c.payload[2])
    assert a.put(chunks[0]).result().status == {R: "exists"}
    a.close()
    b.close()


def test_bad_magic_closes_connection_server_survives(server):
    srv, _ = server
    with socket.create_connection(parse_endpoint(srv.endpoint)) as s:
        s.sendall(b"XXXX" + bytes(40))
        s.settimeout(5)
        try:
            assert s.recv(10) == b""
        except ConnectionResetError:
            pass
    with WireClient(srv.endpoint) as c:
        assert c.call(Op.EXISTS, {"digests": ["00" * 32]}).meta == {"hits": [False]}


def test_oversize_payload_gets_err_and_connection_survives(server):
    srv, _ = server
    with socket.create_connection(parse_endpoint(srv.endpoint)) as s:
        n = (8 << 20) + 1
        s.sendall(HEADER.pack(MAGIC, 1, int(Op.PUT), 77, n) + bytes(n))
        reply = read_message(s, 64 << 20)
        assert reply.op == Op.ERR and reply.request_id == 77 and reply.meta["code"] == "payload_too_large"
        s.sendall(Message(Op.EXISTS, 78, {"digests": []}).to_bytes())
        reply = read_message(s, 64 << 20)
        assert reply.op == Op.OK and reply.request_id == 78


def test_get_missing_is_err(server):
    srv, _ = server
    with WireClient(srv.endpoint) as c:
        with pytest.raises(RemoteError) as e:
            c.call(Op.GET, {"digest": "00" * 32})
        assert e.value.code == "not_found"
        with pytest.raises(RemoteError):
            c.call(Op.MOVE, {})  # no handler on a plain store server


def test_pipelined_requests_pair_by_id(model, rng, server):
    srv, _ = server
    chunks = make_chunks(model, rng.integers(0, 32000, 256 * 20), rng)
    with WireClient(srv.endpoint) as c:
        puts = [c.request(Op.PUT, {"chunks": [{"key": ch.key.to_dict(), "token_count": 256}]}, ch.payload)
                for ch in chunks]
        gets = [c.request(Op.GET, {"key": ch.key.to_dict()}) for ch in chunks]
        for f in puts:
            assert f.result(30).meta["status"] == ["ok"]
        ids = set()
        for ch, f in zip(chunks, gets):
            msg = f.result(30)
            ids.add(msg.request_id)
            assert bytes(msg.body) == ch.payload.tobytes()
        assert len(ids) == len(chunks)


def test_send_chunks_coalesces():
    m = ModelSpec(num_layers=8, bytes_per_token_per_layer=128, model_tag="t-8x128")  # 256-token chunk = 256 KiB
    srv_store = StorageEngine(m, [RamPoolBackend(80 * m.chunk_bytes(256), m.chunk_bytes(256))])
    srv = serve("127.0.0.1:0", srv_store)
    r = np.random.default_rng(3)
    toks = r.integers(0, 32000, 64 * 256)
    payload = r.integers(0, 256, (m.num_layers, 256 * m.bytes_per_token_per_layer), dtype=np.uint8)
    chunks = [KVChunk(k, 256, m.bytes_per_token_per_layer, payload) for k in chunk_keys(toks, 256, m.model_tag)]
    assert chunks[0].nbytes == 256 << 10
    with WireClient(srv.endpoint) as c:
        assert send_chunks(c, []) == [] and c.messages_sent == 0
        status = send_chunks(c, chunks)
        assert status == ["ok"] * 64 and c.messages_sent == 1
        assert send_chunks(c, chunks[:3]) == ["exists"] * 3
    assert len(srv_store.keys()) == 64
    srv.close()
    srv_store.close()


def test_plan_batches_arithmetic():
    assert plan_batches([256 << 10] * 64) == [list(range(64))]
    assert len(plan_batches([16 << 20] * 8)) == 3  # three fit under the 64 MiB cap
    with pytest.raises(ValueError):
        plan_batches([65 << 20])


def _prefiller_pages(model, tokens):
    pages = PagedKVStore(model, model.num_layers * (-(-len(tokens) // 16)))
    pages.alloc_blocks("p", -(-len(tokens) // 16))
    pos = np.arange(len(tokens), dtype=np.uint64)
    for layer in range(model.num_layers):
        pages.write_tokens("p", layer, 0, synth_kv(tokens.astype(np.uint64), pos, layer,
                                                   model.bytes_per_token_per_layer))
    return pages


def _pd_roundtrip(model, tokens):
    src = _prefiller_pages(model, tokens)
    keys = chunk_keys(tokens, 256, model.model_tag)
    counts = [min(256, len(tokens) - k.chunk_index * 256) for k in keys]
    recv = PdReceiver(model)
    dst = PagedKVStore(model, model.num_layers * (-(-len(tokens) // 16)))
    dst.alloc_blocks("d", -(-len(tokens) // 16))
    with WireServer("127.0.0.1:0", recv.handlers(), recv.sinks()) as srv, WireClient(srv.endpoint) as c:
        recv.register("q", counts)
        for i, (k, n) in enumerate(zip(keys, counts)):
            s = i * 256
            payload = np.stack([src.read_tokens("p", layer, s, s + n).reshape(-1)
                                for layer in range(model.num_layers)])
            assert pd_push(c, "q", i, KVChunk(k, n, model.bytes_per_token_per_layer, payload)).meta["status"] == "ok"
        got = recv.pd_await("q")
    assert [g.key for g in got] == keys
    for i, chunk in enumerate(got):
        for layer in range(model.num_layers):
            dst.write_tokens("d", layer, i * 256, chunk.payload[layer])
    for layer in range(model.num_layers):
        assert np.array_equal(dst.read_tokens("d", layer, 0, len(tokens)),
                              src.read_tokens("p", layer, 0, len(tokens)))
    return len(got)


def test_pd_8k_prompt_is_32_pushes(model, rng):
    assert _pd_roundtrip(model, rng.integers(0, 32000, 8192)) == 32


@settings(max_examples=15, deadline=None)
@given(chunks=st.integers(1, 64), tail=st.integers(0, 255), seed=st.integers(0, 99))
def test_pd_byte_exact_any_chunk_count(chunks, tail, seed):
    n = (chunks - 1) * 256 + tail if tail else chunks * 256
    n = max(n, 1)
    toks = np.random.default_rng(seed).integers(0, 32000, n)
    assert _pd_roundtrip(SMALL, toks) == -(-n // 256)


def test_pd_unknown_query_and_duplicate(model, rng):
    recv = PdReceiver(model)
    (chunk,) = make_chunks(model, rng.integers(0, 32000, 256), rng)
    with WireServer("127.0.0.1:0", recv.handlers(), recv.sinks()) as srv, WireClient(srv.endpoint) as c:
        with pytest.raises(UnknownQuery):
            pd_push(c, "nope", 0, chunk)
        with pytest.raises(UnknownQuery):
            recv.pd_await("nope", timeout=1)
        recv.register("q", [256])
        assert pd_push(c, "q", 0, chunk).meta["status"] == "ok"
        other = KVChunk(chunk.key, 256, model.bytes_per_token_per_layer, np.zeros_like(chunk.payload))
        assert pd_push(c, "q", 0, other).meta["status"] == "duplicate"
        (got,) = recv.pd_await("q")
        assert got.payload.tobytes() == chunk.payload.tobytes()
        assert recv.duplicates == 1
        with pytest.raises(RemoteError):
            pd_push(c, "q", 5, chunk)


def test_frame_roundtrip_and_split_feeding(rng):
    msgs = [Message(Op.PUT, i, {"i": i}, rng.integers(0, 256, i * 7, dtype=np.uint8).tobytes()) for i in range(20)]
    data = b"".join(m.to_bytes() for m in msgs)
    got, error, left = parse_stream(data)
    assert error is None and left == 0
    assert [(g.op, g.request_id, g.meta, bytes(g.body)) for g in got] == \
           [(m.op, m.request_id, m.meta, m.body) for m in msgs]
    p = FrameParser()
    out = []
    for i in range(0, len(data), 13):
        out += p.feed(data[i:i + 13])
    assert len(out) == 20


def test_header_error_offsets():
    good = Message(Op.OK, 1, {}).to_bytes()
    cases = {
        b"LMXP" + good[4:]: 2,
        good[:4] + struct.pack("<H", 9) + good[6:]: 4,
        good[:6] + bytes([99]) + good[7:]: 6,
        good[:15] + struct.pack("<I", 2) + good[19:]: 15,
        good + good[:15] + struct.pack("<I", (64 << 20) + 1): len(good) + 15,
    }
    for data, offset in cases.items():
        _, error, _ = parse_stream(data)
        assert error is not None and error.offset == offset


def test_fuzzed_frames_match_reference_parser():
    r = np.random.default_rng(99)
    for _ in range(3000):
        data = b"".join(fuzz_frame(r) for _ in range(int(r.integers(1, 4))))
        frames, offset = reference_parse(data)
        got, error, _ = parse_stream(data)
        assert [(int(g.op), g.request_id, g.meta, bytes(g.body)) for g in got] == frames
        assert (error.offset if error else None) == offset
        p = FrameParser()
        cut = int(r.integers(0, len(data) + 1))
        p.feed(data[:cut])
        p.feed(data[cut:])
        assert (p.error.offset if p.error else None) == offset
