"""Bipartite proximity graph and locality-centric mini-batch sampling.

Queries link forward to their top-N sparse candidates; each candidate links
back to the queries that retrieved it.  Batches are grown from a random entry
query by following backward links of the sampled negatives, either depth-first
(random walk, newest queue entry first) or breadth-first (snowball, oldest
entry first).
"""

from __future__ import annotations

import bisect
import os
import warnings
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from .binio import Reader, Writer
from .core import make_rng
from .errors import ContractError, FormatError
from .pq import CodebookSet, exhaustive_adc_topk

BGG1_MAGIC = b"BGG1"


class Strategy(str, Enum):
    RANDOM_WALK = "randomwalk"
    SNOWBALL = "snowball"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, Strategy):
            return value
        key = str(value).lower().replace("_", "").replace("-", "")
        for s in cls:
            if s.value == key:
                return s
        raise ValueError(f"unknown strategy {value!r} (expected randomwalk or snowball)")


class TrainingTriple(NamedTuple):
    query_id: int
    positive_id: int
    negative_id: int


@dataclass(eq=False)
class BipartiteGraph:
    forward: list[np.ndarray]  # query -> ranked candidate answer ids
    backward: list[np.ndarray]  # answer -> ascending query ids
    positives: dict[int, frozenset[int]]
    n_answers: int
    N: int

    @property
    def n_queries(self) -> int:
        return len(self.forward)

    @classmethod
    def from_forward(cls, forward, positives, n_answers: int, N: int | None = None) -> "BipartiteGraph":
        fwd = [np.asarray(f, dtype=np.int64) for f in forward]
        for q, f in enumerate(fwd):
            if len(np.unique(f)) != len(f):
                raise ContractError(f"forward list of query {q} has duplicate ids")
            if f.size and (f.min() < 0 or f.max() >= n_answers):
                raise ContractError(f"forward list of query {q} has out-of-range ids")
        N = max((len(f) for f in fwd), default=0) if N is None else N
        if any(len(f) > N for f in fwd):
            raise ContractError(f"forward list longer than N={N}")
        back: list[list[int]] = [[] for _ in range(n_answers)]
        for q, f in enumerate(fwd):
            for a in f:
                back[a].append(q)
        backward = [np.asarray(b, dtype=np.int64) for b in back]
        return cls(fwd, backward, {int(q): frozenset(v) for q, v in positives.items()}, n_answers, N)

    def negatives_of(self, q: int) -> np.ndarray:
        """Forward list of ``q`` with its positives filtered out, order kept."""
        f = self.forward[q]
        pos = self.positives.get(q, frozenset())
        if not pos:
            return f
        return f[~np.isin(f, list(pos))]


def build_bipartite_graph(
    query_embs: np.ndarray,
    answer_codes: np.ndarray,
    books: CodebookSet,
    positives: dict[int, frozenset[int]],
    N: int = 200,
    chunk: int = 256,
) -> BipartiteGraph:
    """Forward lists are the exhaustive ADC top-N of each query embedding."""
    if N < 1:
        raise ContractError("N must be >= 1")
    n = len(answer_codes)
    if N > n:
        warnings.warn(f"N={N} exceeds corpus size {n}; clamped", stacklevel=2)
        N = n
    forward = list(exhaustive_adc_topk(query_embs, answer_codes, books, N, chunk))
    return BipartiteGraph.from_forward(forward, positives, n, N)


# --------------------------------------------------------------------------
# sampling


@dataclass(eq=False)
class SamplerState:
    """Mutable traversal state for one epoch.

    ``unvisited`` is kept sorted so that "uniform random member" is a plain
    index draw and fully reproducible.
    """

    unvisited: list[int]
    strategy: Strategy
    rng: np.random.Generator
    queue: deque = field(default_factory=deque)
    queue_cap: int | None = None
    skipped: int = 0
    visit_order: list[int] = field(default_factory=list)

    @classmethod
    def new(cls, n_queries: int, strategy, seed: int, epoch: int = 0, queue_cap: int | None = None):
        return cls(list(range(n_queries)), Strategy.parse(strategy), make_rng(seed, 3, epoch), queue_cap=queue_cap)

    def remove(self, q: int) -> None:
        i = bisect.bisect_left(self.unvisited, q)
        if i < len(self.unvisited) and self.unvisited[i] == q:
            self.unvisited.pop(i)

    def is_unvisited(self, q: int) -> bool:
        i = bisect.bisect_left(self.unvisited, q)
        return i < len(self.unvisited) and self.unvisited[i] == q

    def extend_queue(self, ids) -> None:
        self.queue.extend(int(i) for i in ids)
        if self.queue_cap is not None:
            while len(self.queue) > self.queue_cap:
                self.queue.popleft()


class EpochExhausted(Exception):
    """Raised by ``next_query`` when every query has been visited."""


def next_query(state: SamplerState) -> int:
    """Newest (random walk) or oldest (snowball) unvisited queue entry.

    Visited entries met on the way are dropped.  With nothing usable in the
    queue, a uniformly random unvisited query is returned.
    """
    if not state.unvisited:
        raise EpochExhausted()
    take = state.queue.pop if state.strategy is Strategy.RANDOM_WALK else state.queue.popleft
    while state.queue:
        q = take()
        if state.is_unvisited(q):
            return q
    return state.unvisited[int(state.rng.integers(len(state.unvisited)))]


def sample_batch(graph: BipartiteGraph, state: SamplerState, batch_size: int) -> list[TrainingTriple]:
    """Collect up to ``batch_size`` triples; short only at the end of an epoch."""
    batch: list[TrainingTriple] = []
    while len(batch) < batch_size and state.unvisited:
        q = next_query(state)
        state.remove(q)
        negs = graph.negatives_of(q)
        if negs.size == 0:
            state.skipped += 1
            continue
        pos = sorted(graph.positives[q])
        a_pos = pos[int(state.rng.integers(len(pos)))]
        a_neg = int(negs[int(state.rng.integers(len(negs)))])
        batch.append(TrainingTriple(q, a_pos, a_neg))
        state.visit_order.append(q)
        state.extend_queue(graph.backward[a_neg])
    return batch


def epoch_batches(graph: BipartiteGraph, strategy, batch_size: int, seed: int, epoch: int = 0, queue_cap_factor: int = 64):
    """All batches of one epoch, plus the final sampler state."""
    state = SamplerState.new(graph.n_queries, strategy, seed, epoch, queue_cap=queue_cap_factor * batch_size)
    batches = []
    while state.unvisited:
        b = sample_batch(graph, state, batch_size)
        if b:
            batches.append(b)
    if graph.n_queries and state.skipped > 0.01 * graph.n_queries:
        warnings.warn(
            f"{state.skipped} of {graph.n_queries} queries have only positives as candidates and were skipped",
            stacklevel=2,
        )
    return batches, state


def random_batches(graph: BipartiteGraph, batch_size: int, seed: int, epoch: int = 0) -> list[list[TrainingTriple]]:
    """Uniformly random batches with the same per-query triple rule (baseline)."""
    rng = make_rng(seed, 4, epoch)
    order = rng.permutation(graph.n_queries)
    out, cur = [], []
    for q in order:
        q = int(q)
        negs = graph.negatives_of(q)
        if negs.size == 0:
            continue
        pos = sorted(graph.positives[q])
        cur.append(TrainingTriple(q, pos[int(rng.integers(len(pos)))], int(negs[int(rng.integers(len(negs)))])))
        if len(cur) == batch_size:
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


def batch_answer_similarity(batch: list[TrainingTriple], answer_vecs: np.ndarray) -> float:
    """Mean pairwise inner product among the distinct answers of a batch."""
    ids = np.unique([t.positive_id for t in batch] + [t.negative_id for t in batch])
    if len(ids) < 2:
        return float("nan")
    v = np.asarray(answer_vecs[ids], dtype=np.float64)
    gram = v @ v.T
    n = len(ids)
    return float((gram.sum() - np.trace(gram)) / (n * (n - 1)))


# --------------------------------------------------------------------------
# serialization


def _csr(lists) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(lists) + 1, dtype=np.uint64)
    offsets[1:] = np.cumsum([len(x) for x in lists])
    ids = np.concatenate([np.asarray(x, dtype=np.uint32) for x in lists]) if lists else np.zeros(0, np.uint32)
    return offsets, ids.astype(np.uint32)


def save_graph(graph: BipartiteGraph, path: str | os.PathLike) -> None:
    w = Writer(BGG1_MAGIC)
    w.pack("III", graph.n_queries, graph.n_answers, graph.N)
    off, ids = _csr(graph.forward)
    w.array(off, "u8")
    w.array(ids, "u4")
    pos_lists = [sorted(graph.positives.get(q, ())) for q in range(graph.n_queries)]
    off, ids = _csr(pos_lists)
    w.array(off, "u8")
    w.array(ids, "u4")
    w.write(path)


def load_graph(path: str | os.PathLike) -> BipartiteGraph:
    r = Reader.open(path, BGG1_MAGIC)
    nq, na, N = r.unpack("III")

    def read_lists():
        off = r.array("u8", nq + 1).astype(np.int64)
        if off[0] != 0 or np.any(np.diff(off) < 0):
            raise FormatError(f"{path}: corrupt offsets near offset {r.pos}")
        ids = r.array("u4", int(off[-1])).astype(np.int64)
        return [ids[off[i] : off[i + 1]] for i in range(nq)]

    forward = read_lists()
    pos = read_lists()
    r.finish()
    positives = {q: frozenset(int(a) for a in p) for q, p in enumerate(pos) if len(p)}
    try:
        return BipartiteGraph.from_forward(forward, positives, na, N)
    except ContractError as exc:
        raise FormatError(f"{path}: {exc}") from None
