"""Bounded duplication of free engine pages into the RAM tier.

Free pages are kept in an ordered list. Three cursors index into it:

* ``start`` is fixed at 0,
* ``current``: pages ``[0, current)`` have been copied to RAM,
* ``end``: pages ``[current, end)`` are scheduled for copying.

``consumed`` counts pages already handed to queries; they are always the
lowest indices, so ``[consumed, current)`` is the pool of pages that may be
granted right now. Duplication works like an undo log: once a page's bytes
are safe in RAM the engine may reuse the page and the old contents can still
be served from the copy.

Cursor positions are absolute list indices, so a window ``(start, current,
end)`` reads directly as the three pointers.
"""

from __future__ import annotations

import enum
import functools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

logger = logging.getLogger(__name__)


class OffloadState(enum.Enum):
    INIT = "Init"
    IN_PROGRESS = "InProgress"
    QUERY_ARRIVAL = "QueryArrival"
    STEADY = "Steady"


@dataclass(frozen=True)
class Granted:
    pages: tuple


@dataclass(frozen=True)
class Stall:
    needed: int


@dataclass
class OffloadWindow:
    """Cursor state over a list of free pages.

    Args:
        free_pages: page ids in duplication order.
        window_size: how far ``end`` may run ahead of the consumed pages.
        duplicate: ``fn(page_ids)`` copying pages to the RAM tier; it must
            return only once the copies are complete.
    """

    free_pages: list
    window_size: int
    duplicate: Callable[[list], None] | None = None
    start: int = 0
    current: int = 0
    end: int = 0
    consumed: int = 0
    last_event: OffloadState | None = None
    duplicated: list = field(default_factory=list)

    @property
    def state(self) -> OffloadState:
        if self.current == self.end:
            return OffloadState.STEADY
        if self.current == self.start:
            return OffloadState.INIT
        return OffloadState.IN_PROGRESS

    @property
    def cursors(self) -> tuple[int, int, int]:
        return self.start, self.current, self.end

    @property
    def ready(self) -> int:
        """Duplicated pages not yet granted."""
        return self.current - self.consumed

    def advance(self, batch: int) -> list:
        """Duplicate up to ``batch`` scheduled pages; returns their ids."""
        if batch < 1:
            raise ValueError("batch must be >= 1")
        n = min(batch, self.end - self.current)
        if n <= 0:
            return []
        pages = self.free_pages[self.current:self.current + n]
        if self.duplicate is not None:
            self.duplicate(list(pages))
        self.current += n
        self.duplicated.extend(pages)
        return list(pages)

    def on_alloc(self, n: int) -> Granted | Stall:
        """A query wants ``n`` pages.

        Grants the ``n`` lowest duplicated pages when enough are ready and
        pushes ``end`` forward so the window keeps ``window_size`` pages in
        flight. Otherwise returns the shortfall and extends ``end`` far enough
        that the request can be met once duplication catches up.
        """
        if n < 0:
            raise ValueError("n must be >= 0")
        self.last_event = OffloadState.QUERY_ARRIVAL
        if n == 0:
            return Granted(())
        total = len(self.free_pages)
        if self.ready >= n:
            pages = tuple(self.free_pages[self.consumed:self.consumed + n])
            self.consumed += n
            self.end = min(total, max(self.end, self.consumed + self.window_size))
            return Granted(pages)
        self.end = min(total, max(self.end, self.consumed + n))
        return Stall(n - self.ready)

    def release(self, pages: Iterable) -> None:
        """Return pages to the tail of the free list (they become duplication candidates)."""
        self.free_pages.extend(pages)


def init(free_pages, window_size: int, duplicate=None) -> OffloadWindow:
    if window_size < 0:
        raise ValueError("window_size must be >= 0")
    free_pages = list(free_pages)
    return OffloadWindow(free_pages, window_size, duplicate, 0, 0, min(window_size, len(free_pages)))


# -- exhaustive checking ------------------------------------------------------

@dataclass
class CheckResult:
    states: int = 0
    transitions: int = 0
    safety_violations: list = field(default_factory=list)
    unresolvable_stalls: list = field(default_factory=list)
    bound_violations: list = field(default_factory=list)
    classification_errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.safety_violations or self.unresolvable_stalls or self.bound_violations
                    or self.classification_errors)


def _classify(cur: int, end: int) -> OffloadState:
    if cur == end:
        return OffloadState.STEADY
    if cur == 0:
        return OffloadState.INIT
    return OffloadState.IN_PROGRESS


def _resolves(pool: int, window: int, cur: int, end: int, consumed: int, n: int) -> bool:
    """Does repeatedly advancing by 1 eventually let an ``n``-page request through?"""
    w = OffloadWindow(list(range(pool)), window, None, 0, cur, end, consumed)
    for _ in range(pool + 1):
        r = w.on_alloc(n)
        if isinstance(r, Granted):
            return True
        if not w.advance(1):
            return isinstance(w.on_alloc(n), Granted)
    return False


def exhaustive_check(max_pool: int = 6, max_window: int = 4, max_ops: int = 12,
                     batches: Iterable[int] | None = None) -> CheckResult:
    """Every sequence of ``advance``/``on_alloc`` up to ``max_ops`` operations.

    Sequences are explored by depth-first search over cursor states; states
    reached again with no more remaining depth are pruned, which covers the
    same set of interleavings. Allocation sizes range over ``0..pool``
    remaining pages and advance batches over ``1..max_pool``.
    """
    res = CheckResult()
    for pool in range(0, max_pool + 1):
        for window in range(0, max_window + 1):
            _check_one(pool, window, max_ops, res, tuple(batches) if batches else tuple(range(1, pool + 1)))
    return res


def _check_one(pool: int, window: int, max_ops: int, res: CheckResult, batches) -> None:
    seen: dict[tuple, int] = {}
    stack = [((0, min(window, pool), 0, 0), max_ops)]  # (current, end, consumed, pending), depth
    while stack:
        (cur, end, consumed, pending), depth = stack.pop()
        key = (cur, end, consumed, pending)
        if seen.get(key, -1) >= depth:
            continue
        seen[key] = depth
        res.states += 1
        if not (0 <= consumed <= cur <= end <= pool):
            res.bound_violations.append((pool, window, key))
            continue
        if cur - consumed > max(window, pending):
            res.bound_violations.append((pool, window, key))
        if _classify(cur, end) != OffloadWindow([0] * pool, window, None, 0, cur, end, consumed).state:
            res.classification_errors.append((pool, window, key))
        if depth == 0:
            continue
        for b in batches:
            w = OffloadWindow(list(range(pool)), window, None, 0, cur, end, consumed)
            w.advance(b)
            res.transitions += 1
            stack.append(((w.current, w.end, w.consumed, pending), depth - 1))
        for n in range(0, pool - consumed + 1):
            w = OffloadWindow(list(range(pool)), window, None, 0, cur, end, consumed)
            r = w.on_alloc(n)
            res.transitions += 1
            if isinstance(r, Granted):
                if any(p >= cur for p in r.pages):
                    res.safety_violations.append((pool, window, key, n))
                nxt = (w.current, w.end, w.consumed, 0 if n >= pending else pending)
            else:
                if not _resolves_cached(pool, window, w.current, w.end, w.consumed, n):
                    res.unresolvable_stalls.append((pool, window, key, n))
                nxt = (w.current, w.end, w.consumed, max(pending, n))
            stack.append((nxt, depth - 1))


_resolves_cached = functools.lru_cache(maxsize=None)(_resolves)
