import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvtier.kv import PagedKVStore
from kvtier.offloader import Granted, OffloadState, OffloadWindow, Stall, exhaustive_check, init


def test_init_examples():
    w = init(range(8), 8)
    assert w.cursors == (0, 0, 8) and w.state is OffloadState.INIT
    assert init(range(8), 3).cursors == (0, 0, 3)
    empty = init([], 4)
    assert empty.cursors == (0, 0, 0) and empty.state is OffloadState.STEADY


def test_advance_examples():
    w = init(range(8), 8)
    assert w.advance(3) == [0, 1, 2]
    assert w.cursors == (0, 3, 8) and w.state is OffloadState.IN_PROGRESS
    w.advance(5)
    assert w.cursors == (0, 8, 8) and w.state is OffloadState.STEADY
    assert w.advance(3) == [] and w.cursors == (0, 8, 8)
    with pytest.raises(ValueError):
        w.advance(0)


def test_on_alloc_grants_and_pushes_end():
    w = OffloadWindow(list(range(10)), 8, None, 0, 3, 8, 0)
    r = w.on_alloc(2)
    assert r == Granted((0, 1)) and w.end == 10 and w.consumed == 2
    w9 = OffloadWindow(list(range(9)), 8, None, 0, 3, 8, 0)
    w9.on_alloc(2)
    assert w9.end == 9  # clamped to the free list
    end = w.end
    assert w.on_alloc(0) == Granted(()) and w.end == end
    assert w.last_event is OffloadState.QUERY_ARRIVAL


def test_stall_when_too_few_duplicated():
    w = init(range(8), 4)
    w.advance(1)
    assert w.on_alloc(3) == Stall(2)
    assert w.consumed == 0
    w.advance(2)
    assert w.on_alloc(3) == Granted((0, 1, 2))


def test_exhaustive_small_state_check():
    res = exhaustive_check(max_pool=6, max_window=4, max_ops=12)
    assert res.ok, (res.safety_violations[:3], res.unresolvable_stalls[:3], res.bound_violations[:3])
    assert res.states > 1000


def _classify(w):
    if w.current == w.end:
        return OffloadState.STEADY
    return OffloadState.INIT if w.current == w.start else OffloadState.IN_PROGRESS


def test_randomized_scheduler_hundred_thousand_ops():
    r = np.random.default_rng(2024)
    ops = 0
    while ops < 100_000:
        pool = int(r.integers(0, 40))
        window = int(r.integers(0, 12))
        w = init(range(pool), window)
        pending = 0
        for _ in range(200):
            ops += 1
            if r.random() < 0.5:
                w.advance(int(r.integers(1, 6)))
            else:
                n = int(r.integers(0, max(1, pool - w.consumed) + 1))
                res = w.on_alloc(n)
                if isinstance(res, Granted):
                    assert all(w.free_pages.index(p) < w.current for p in res.pages)
                    pending = 0 if n >= pending else pending
                else:
                    assert res.needed == n - w.ready > 0
                    pending = max(pending, n)
            assert 0 <= w.start <= w.consumed <= w.current <= w.end <= len(w.free_pages)
            assert w.ready <= max(window, pending)
            assert w.state is _classify(w)


@settings(max_examples=100, deadline=None)
@given(pool=st.integers(1, 30), window=st.integers(0, 8), n=st.integers(1, 30), batch=st.integers(1, 5))
def test_stall_resolves_by_advancing(pool, window, n, batch):
    n = min(n, pool)
    w = init(range(pool), window)
    res = w.on_alloc(n)
    for _ in range(pool + 1):
        if isinstance(res, Granted):
            break
        w.advance(batch)
        res = w.on_alloc(n)
    assert isinstance(res, Granted) and len(res.pages) == n


def test_duplicated_bytes_equal_source(model, rng):
    pages = PagedKVStore(model, 12)
    ids = pages.alloc_pages("q", 12)
    for p in ids:
        pages.scatter_pages(rng.integers(0, 256, model.page_bytes, dtype=np.uint8), [p])
    snapshot = {p: bytes(pages.page_view(p)) for p in ids}
    ram = {}

    def duplicate(batch):
        for p in batch:
            ram[p] = bytes(pages.page_view(p))

    w = init(ids, 6, duplicate)
    w.advance(4)
    granted = w.on_alloc(3)
    assert isinstance(granted, Granted)
    for p in granted.pages:  # the engine overwrites granted pages; the RAM copy keeps the old bytes
        pages.scatter_pages(np.zeros(model.page_bytes, np.uint8), [p])
    assert set(ram) == set(ids[:4])
    assert all(ram[p] == snapshot[p] for p in ram)
    assert w.duplicated == ids[:4]
