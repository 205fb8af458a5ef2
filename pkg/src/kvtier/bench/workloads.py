"""Synthetic request schedules.

* ``multi_round_qa``: every user owns a long document and asks a sequence of
  short questions; round ``r+1``'s prompt is round ``r``'s prompt, its
  answer and a new question. Users start at once (``initial_users``) and
  more join as a Poisson process at ``qps`` users per second.
* ``poisson_random``: independent queries arriving at ``qps``, each a shared
  document (one of ``num_docs``) plus a random suffix.
* ``trace_replay``: rows of a CSV with ``arrival_time, prefix_id,
  prefix_len, suffix_len, output_len``.

Answers are computed with the reference generator, so later rounds embed
exactly the tokens the engine will produce.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..kv import ModelSpec
from ..sim.engine import SimQuery
from ..sim.model import reference_generate

logger = logging.getLogger(__name__)

KINDS = ("multi_round_qa", "poisson_random", "trace_replay")


@dataclass
class WorkloadSpec:
    """Workload knobs; every field has a default so a spec can be partial.

    Args:
        kind: one of ``multi_round_qa``, ``poisson_random``, ``trace_replay``.
        doc_tokens: document (shared prefix) length.
        question_tokens: question length per round.
        output_tokens: most output tokens per answer.
        initial_users: users present at time 0 (multi-round QA).
        qps: users joining per second (multi-round QA) or queries per second.
        duration: arrival window in seconds.
        rounds: questions per user.
        think_time: pause between an answer and the user's next question.
        num_docs: distinct documents for ``poisson_random``.
        min_doc_tokens: lower bound for random document lengths (0 = fixed).
        seed: RNG seed.
        vocab: vocabulary size.
        trace: CSV path for ``trace_replay``.
    """

    kind: str = "multi_round_qa"
    doc_tokens: int = 10_000
    question_tokens: int = 50
    output_tokens: int = 100
    initial_users: int = 40
    qps: float = 0.0
    duration: float = 60.0
    rounds: int = 3
    think_time: float = 2.0
    num_docs: int = 10
    min_doc_tokens: int = 0
    seed: int = 0
    vocab: int = 32000
    trace: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}; expected one of {KINDS}")
        if self.doc_tokens < 1 or self.question_tokens < 1 or self.output_tokens < 0:
            raise ValueError("token counts must be positive")
        if self.kind == "trace_replay" and not self.trace:
            raise ValueError("trace_replay needs a trace CSV")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> WorkloadSpec:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown workload fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class Schedule:
    queries: list[SimQuery]
    expected: dict = field(default_factory=dict)  # query_id -> reference outputs

    def __len__(self) -> int:
        return len(self.queries)


def _tokens(rng: np.random.Generator, n: int, vocab: int) -> np.ndarray:
    return rng.integers(0, vocab, n, dtype=np.int64)


def _doc_len(spec: WorkloadSpec, rng) -> int:
    if spec.min_doc_tokens and spec.min_doc_tokens < spec.doc_tokens:
        return int(rng.integers(spec.min_doc_tokens, spec.doc_tokens + 1))
    return spec.doc_tokens


def _answer_len(spec: WorkloadSpec, rng) -> int:
    if spec.output_tokens <= 1:
        return spec.output_tokens
    return int(rng.integers(max(1, spec.output_tokens // 2), spec.output_tokens + 1))


def multi_round_qa(spec: WorkloadSpec, model: ModelSpec) -> Schedule:
    rng = np.random.default_rng(spec.seed)
    starts = [0.0] * spec.initial_users
    if spec.qps > 0:
        t = 0.0
        while True:
            t += rng.exponential(1.0 / spec.qps)
            if t > spec.duration:
                break
            starts.append(t)
    queries, expected = [], {}
    for user, start in enumerate(starts):
        history = _tokens(rng, _doc_len(spec, rng), spec.vocab)
        prev = None
        for r in range(1, spec.rounds + 1):
            prompt = np.concatenate([history, _tokens(rng, spec.question_tokens, spec.vocab)])
            n_out = _answer_len(spec, rng)
            qid = f"u{user}-r{r}"
            q = SimQuery(qid, prompt, n_out, arrival=start, after=prev, think_time=spec.think_time if prev else 0.0,
                         session=f"u{user}", round=r)
            answer = reference_generate(prompt, n_out, model, spec.vocab)
            expected[qid] = answer
            queries.append(q)
            history = np.concatenate([prompt, np.asarray(answer, dtype=np.int64)])
            prev = qid
    return Schedule(queries, expected)


def poisson_random(spec: WorkloadSpec, model: ModelSpec) -> Schedule:
    rng = np.random.default_rng(spec.seed)
    docs = [_tokens(rng, _doc_len(spec, rng), spec.vocab) for _ in range(max(1, spec.num_docs))]
    if spec.qps <= 0:
        raise ValueError("poisson_random needs qps > 0")
    queries = []
    t = 0.0
    i = 0
    while True:
        t += rng.exponential(1.0 / spec.qps)
        if t > spec.duration:
            break
        doc = docs[int(rng.integers(len(docs)))]
        cut = int(rng.integers(1, len(doc) + 1))
        q_len = int(rng.integers(1, spec.question_tokens + 1))
        prompt = np.concatenate([doc[:cut], _tokens(rng, q_len, spec.vocab)])
        queries.append(SimQuery(f"q{i}", prompt, _answer_len(spec, rng), arrival=t))
        i += 1
    return Schedule(queries)


def trace_replay(spec: WorkloadSpec, model: ModelSpec) -> Schedule:
    """Rows ``arrival_time,prefix_id,prefix_len,suffix_len,output_len``; prefixes are derived from the id."""
    rng = np.random.default_rng(spec.seed)
    queries = []
    with open(spec.trace, newline="") as f:
        for i, row in enumerate(csv.DictReader(f)):
            try:
                arrival = float(row["arrival_time"])
                pid = int(row["prefix_id"])
                plen, slen, olen = int(row["prefix_len"]), int(row["suffix_len"]), int(row["output_len"])
            except (KeyError, ValueError) as e:
                raise ValueError(f"trace row {i + 1}: {e}") from None
            prefix = _tokens(np.random.default_rng([spec.seed, pid]), plen, spec.vocab)
            prompt = np.concatenate([prefix, _tokens(rng, slen, spec.vocab)])
            if not len(prompt):
                raise ValueError(f"trace row {i + 1}: empty prompt")
            queries.append(SimQuery(f"t{i}", prompt, olen, arrival=arrival, session=f"p{pid}"))
    queries.sort(key=lambda q: q.arrival)
    return Schedule(queries)


def generate_workload(spec: WorkloadSpec, model: ModelSpec) -> Schedule:
    """Deterministic schedule for ``spec``."""
    return {"multi_round_qa": multi_round_qa, "poisson_random": poisson_random,
            "trace_replay": trace_replay}[spec.kind](spec, model)


def fill_expected(schedule: Schedule, model: ModelSpec, vocab: int) -> None:
    """Compute reference outputs for queries that lack them."""
    for q in schedule.queries:
        if q.query_id not in schedule.expected:
            schedule.expected[q.query_id] = reference_generate(q.tokens, q.max_out, model, vocab)
