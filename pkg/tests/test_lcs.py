import warnings
from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bigran.errors import ContractError, FormatError
from bigran.lcs import (
    BipartiteGraph,
    EpochExhausted,
    SamplerState,
    Strategy,
    TrainingTriple,
    batch_answer_similarity,
    build_bipartite_graph,
    epoch_batches,
    load_graph,
    next_query,
    random_batches,
    sample_batch,
    save_graph,
)
from bigran.pq import adc_scores, build_adc_table, encode_batch
from lcs_trace import EXPECTED, SEED, trace_graph


@pytest.mark.parametrize("strategy", ["snowball", "randomwalk"])
def test_trace_matches_hand_simulation(strategy):
    state = SamplerState.new(3, strategy, SEED)
    batch = sample_batch(trace_graph(), state, 3)
    assert [tuple(t) for t in batch] == EXPECTED[strategy]


def test_next_query_queue_order():
    for strategy, want in [("randomwalk", 12), ("snowball", 10)]:
        state = SamplerState.new(20, strategy, 0)
        state.queue = deque([10, 11, 12])
        assert next_query(state) == want


def test_next_query_skips_visited_then_random():
    state = SamplerState.new(5, "snowball", 0)
    for q in (0, 1):
        state.remove(q)
    state.queue = deque([0, 1])
    q = next_query(state)
    assert q in (2, 3, 4) and not state.queue
    again = SamplerState.new(5, "snowball", 0)
    for q2 in (0, 1):
        again.remove(q2)
    assert next_query(again) == q  # seeded


def test_next_query_exhausted():
    state = SamplerState.new(1, "snowball", 0)
    state.remove(0)
    with pytest.raises(EpochExhausted):
        next_query(state)


def test_single_query_batch():
    g = BipartiteGraph.from_forward([[0, 1]], {0: frozenset([0])}, 2)
    assert [tuple(t) for t in sample_batch(g, SamplerState.new(1, "snowball", 0), 4)] == [(0, 0, 1)]


def test_trivial_graph_and_transpose(small_data, small_books):
    codes = encode_batch(small_data.answers.vectors[:1], small_books)
    g = build_bipartite_graph(small_data.queries.vectors[:1], codes, small_books, {0: frozenset([0])}, 1)
    assert g.forward[0].tolist() == [0] and g.backward[0].tolist() == [0]


def test_forward_lists_equal_bruteforce(small_data, small_books):
    codes = encode_batch(small_data.answers.vectors, small_books)
    q = small_data.queries.vectors[:50]
    g = build_bipartite_graph(q, codes, small_books, small_data.subset_queries(range(50)).positives, 25)
    for i in range(50):
        s = adc_scores(build_adc_table(q[i], small_books), codes)
        expect = sorted(range(len(s)), key=lambda a: (-s[a], a))[:25]
        assert set(g.forward[i]) == set(expect)
    for a, qs in enumerate(g.backward):
        for qq in qs:
            assert a in g.forward[qq]
    assert sum(len(b) for b in g.backward) == sum(len(f) for f in g.forward)


def test_graph_clamps_N(small_books):
    codes = np.zeros((3, 4), dtype=np.uint8)
    with pytest.warns(UserWarning):
        g = build_bipartite_graph(np.ones((1, 16)), codes, small_books, {0: frozenset([0])}, 10)
    assert g.N == 3
    with pytest.raises(ContractError):
        build_bipartite_graph(np.ones((1, 16)), codes, small_books, {0: frozenset([0])}, 0)


def test_graph_invariants_rejected():
    with pytest.raises(ContractError):
        BipartiteGraph.from_forward([[1, 1]], {0: frozenset([1])}, 3)
    with pytest.raises(ContractError):
        BipartiteGraph.from_forward([[5]], {0: frozenset([1])}, 3)


def random_graph(rng, nq=40, na=30, N=6):
    fwd = [rng.choice(na, size=rng.integers(2, N + 1), replace=False) for _ in range(nq)]
    pos = {q: frozenset([int(f[0])]) for q, f in enumerate(fwd)}
    return BipartiteGraph.from_forward(fwd, pos, na, N)


@given(st.integers(0, 10_000), st.sampled_from(["snowball", "randomwalk"]), st.integers(2, 9))
def test_epoch_coverage_and_negatives(seed, strategy, bs):
    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        batches, state = epoch_batches(g, strategy, bs, seed)
    seen = [t.query_id for b in batches for t in b]
    assert len(seen) == len(set(seen))
    assert set(seen) | set(range(g.n_queries)) == set(range(g.n_queries))
    assert len(seen) + state.skipped == g.n_queries
    assert all(len(b) == bs for b in batches[:-1])
    for b in batches:
        for t in b:
            assert t.negative_id in g.forward[t.query_id]
            assert t.negative_id not in g.positives[t.query_id]
            assert t.positive_id in g.positives[t.query_id]


def test_skipped_queries_warn():
    fwd = [[0], [1], [2, 0]]
    pos = {0: frozenset([0]), 1: frozenset([1]), 2: frozenset([2])}
    g = BipartiteGraph.from_forward(fwd, pos, 3)
    with pytest.warns(UserWarning, match="skipped"):
        batches, state = epoch_batches(g, "snowball", 2, 0)
    assert state.skipped == 2


def test_strategies_differ_when_queue_fans_out():
    g = random_graph(np.random.default_rng(3), nq=60, na=20, N=8)
    a, _ = epoch_batches(g, Strategy.SNOWBALL, 8, 0)
    b, _ = epoch_batches(g, Strategy.RANDOM_WALK, 8, 0)
    assert [t.query_id for x in a for t in x] != [t.query_id for x in b for t in x]


def test_queue_cap_drops_oldest():
    state = SamplerState.new(10, "snowball", 0, queue_cap=3)
    state.extend_queue([1, 2, 3, 4, 5])
    assert list(state.queue) == [3, 4, 5]


def test_random_batches_cover_queries():
    g = random_graph(np.random.default_rng(1))
    batches = random_batches(g, 7, 0)
    ids = [t.query_id for b in batches for t in b]
    assert len(ids) == len(set(ids))


def test_batch_similarity():
    v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert batch_answer_similarity([TrainingTriple(0, 0, 1)], v) == 1.0
    assert batch_answer_similarity([TrainingTriple(0, 0, 2)], v) == 0.0


def test_graph_file_roundtrip(tmp_path):
    g = random_graph(np.random.default_rng(2))
    save_graph(g, tmp_path / "g.bgg")
    back = load_graph(tmp_path / "g.bgg")
    assert back.N == g.N and back.positives == g.positives
    assert all(np.array_equal(a, b) for a, b in zip(back.forward, g.forward))
    assert all(np.array_equal(a, b) for a, b in zip(back.backward, g.backward))
    raw = bytearray((tmp_path / "g.bgg").read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "bad.bgg").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_graph(tmp_path / "bad.bgg")
