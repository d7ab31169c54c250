import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bigran.errors import ConfigError, ContractError
from bigran.evaluation import (
    QuantizerRun,
    RecallReport,
    SweepReport,
    brute_force_topk,
    brute_force_topk_heap,
    compare_quantizers,
    recall_at_k,
    recall_report,
    sweep_bits,
    sweep_candidates,
    write_quantizer_table,
    write_sweep,
)
from bigran.pq import encode_batch
from bigran.serving import SearchResult, rank


def test_brute_force_examples():
    eye = np.eye(10)
    assert brute_force_topk(eye[7], eye, 1).tolist() == [7]
    full = brute_force_topk(np.ones(10), eye, 10)
    assert full.tolist() == list(range(10))
    with pytest.warns(UserWarning):
        assert len(brute_force_topk(np.ones(10), eye, 20)) == 10


def test_oracles_agree_on_1000_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, d, k = rng.integers(1, 30), rng.integers(1, 5), rng.integers(1, 30)
        x = rng.integers(-2, 3, (n, d)).astype(float)  # integer grid: many ties
        q = rng.integers(-2, 3, d).astype(float)
        k = min(k, n)
        assert brute_force_topk(q, x, k).tolist() == brute_force_topk_heap(q, x, k).tolist()


def test_recall_at_k_examples():
    assert recall_at_k([1, 2, 3], {1, 2}, 3) == 1.0
    assert recall_at_k([4, 5], {1}, 2) == 0.0
    assert recall_at_k([1, 9, 8], {1, 2}, 3) == 0.5
    with pytest.raises(ContractError):
        recall_at_k([1], set(), 1)


@given(st.lists(st.integers(0, 20), unique=True, min_size=1, max_size=15), st.sets(st.integers(0, 20), min_size=1))
def test_recall_monotone_in_k(retrieved, relevant):
    vals = [recall_at_k(retrieved, relevant, k) for k in range(1, len(retrieved) + 1)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0 <= v <= 1 for v in vals)


def test_recall_report_invariants():
    ranked = np.array([[0, 1, 2], [2, 1, 0]])
    rep = recall_report(ranked, {0: frozenset([1]), 1: frozenset([0])}, [1, 2, 3])
    assert rep.recalls == {1: 0.0, 2: 0.5, 3: 1.0}
    with pytest.raises(ContractError):
        RecallReport({1: 0.5, 2: 0.4}, 1)


def test_compare_quantizers(small_data, small_books):
    A = small_data.answers.vectors
    codes = encode_batch(A, small_books)
    Q = small_data.queries.vectors
    runs = [QuantizerRun("a", Q, codes, small_books), QuantizerRun("b", Q, codes, small_books)]
    tab = compare_quantizers(runs, small_data.positives, [10, 100, len(A)], dense=(Q, A))
    assert tab.rows["a"] == tab.rows["b"]
    assert tab.recall("upper_bound", len(A)) == 1.0
    assert tab.recall("a", len(A)) == 1.0
    with pytest.raises(ContractError):
        compare_quantizers([QuantizerRun("x", Q, None, small_books)], small_data.positives, [10])


class _ToyPipeline:
    def __init__(self, data):
        self.test_queries = data.queries
        self.test_positives = data.positives
        self.A = data.answers.vectors.astype(np.float64)
        self.corpus_size = len(self.A)

    def search(self, features, N, K, ef_search=None, exhaustive=False):
        s = self.A @ features
        cand = np.argsort(-(self.A[:, :4] @ features[:4]), kind="stable")[:N]  # crude phase 1
        return rank(cand, s[cand], K)


def test_sweep_candidates(small_data):
    pipe = _ToyPipeline(small_data)
    rep = sweep_candidates(pipe, [100, 10, 1000], K=10, exhaustive=True)
    assert rep.points == [10, 100, 1000]
    assert rep.nondecreasing_steps() == 2
    assert all(np.isfinite(t) and t > 0 for t in rep.latency_median_ms)
    dense = np.mean([
        recall_at_k(brute_force_topk(small_data.queries[q], small_data.answers, 10), small_data.positives[q], 10)
        for q in range(small_data.queries.count)
    ])
    assert rep.recall[-1] == pytest.approx(dense)
    with pytest.warns(UserWarning):
        sweep_candidates(pipe, [5000], K=10, exhaustive=True)
    with pytest.raises(ContractError):
        sweep_candidates(pipe, [5], K=10)


def test_sweep_report_axis_strict():
    with pytest.raises(ContractError):
        SweepReport("N", [10, 10], [0.1, 0.2], 10)


def test_sweep_bits(small_data):
    A, Q = small_data.answers.vectors, small_data.queries.vectors
    with pytest.warns(UserWarning):
        rep = sweep_bits(A, Q, small_data.positives, [2, 4, 4, 3], K=20, method="pq")
    assert rep.points == [2, 4]
    assert [r["bits"] for r in rep.records()] == [16, 32]
    assert any("M=3" in n for n in rep.notes)
    assert rep.recall[-1] >= rep.recall[0]
    with pytest.raises(ConfigError):
        sweep_bits(A, Q, small_data.positives, [2], P=16)


def test_report_files(tmp_path, small_data, small_books):
    codes = encode_batch(small_data.answers.vectors, small_books)
    tab = compare_quantizers([QuantizerRun("pq", small_data.queries.vectors, codes, small_books)], small_data.positives, [10, 50])
    write_quantizer_table(tab, tmp_path, plot=True)
    lines = (tmp_path / "quantizers.tsv").read_text().splitlines()
    assert lines[0] == "method\tN\trecall" and len(lines) == 3
    rec = [json.loads(x) for x in (tmp_path / "quantizers.jsonl").read_text().splitlines()]
    assert list(rec[0]) == ["method", "N", "recall"]
    assert (tmp_path / "quantizers.dat").read_text().startswith("# method N recall")
    rep = SweepReport("M", [4, 8], [0.1, 0.2], 100, resident_bytes=[10, 20])
    write_sweep(rep, tmp_path)
    assert (tmp_path / "sweep_bits.tsv").read_text().splitlines()[0] == "M\tbits\trecall\tresident_bytes"
    rep = SweepReport("N", [10, 20], [0.1, 0.2], 10, [1.0, 2.0], [1.5, 2.5])
    write_sweep(rep, tmp_path)
    assert (tmp_path / "sweep_candidates.tsv").read_text().splitlines()[1] == "10\t0.100000\t1.000000\t1.500000"


def test_search_result_shape():
    r = SearchResult(np.array([3, 1]), np.array([2.0, 2.0]))
    assert len(r.ids) == 2
