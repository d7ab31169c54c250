import numpy as np
import pytest

from bigran.errors import ContractError, FormatError
from bigran.hnsw import HnswParams, build_hnsw, load_hnsw, sample_levels, save_hnsw
from bigran.pq import CodebookSet, adc_scores, build_adc_table, encode_batch, train_pq


@pytest.fixture(scope="module")
def corpus():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2000, 16)) + rng.standard_normal((8, 16))[rng.integers(0, 8, 2000)] * 2
    books = train_pq(x, 4, 32, iters=8)
    codes = encode_batch(x, books)
    index = build_hnsw(codes, books, HnswParams(max_degree=8, ef_construction=64))
    return x, books, codes, index


def exact(q, books, codes, k):
    s = adc_scores(build_adc_table(q, books), codes)
    order = np.lexsort((np.arange(len(s)), -s))[:k]
    return order, s[order]


def test_layer0_fully_reachable(corpus):
    _, _, _, index = corpus
    assert index.reachable().all()


def test_degree_bound_and_no_self_loops(corpus):
    _, _, _, index = corpus
    assert index.deg.max() <= 2 * index.params.max_degree
    for layer in range(index.nbrs.shape[0]):
        for v in np.flatnonzero(index.levels >= layer)[:200]:
            nb = index.neighbors(layer, v)
            assert v not in nb and len(set(nb)) == len(nb)
            assert np.all(index.levels[nb] >= layer)


def test_search_recall_and_order(corpus):
    x, books, codes, index = corpus
    rng = np.random.default_rng(1)
    queries = x[:50] + 0.3 * rng.standard_normal((50, 16))
    rec = []
    for q in queries:
        ids, scores = index.search(q, 10, 64)
        assert np.all(np.diff(scores) <= 0)
        np.testing.assert_allclose(scores, adc_scores(build_adc_table(q, books), codes[ids]))
        # tie-aware: duplicate codes make the exact top-10 set ambiguous
        tenth = exact(q, books, codes, 10)[1][-1]
        rec.append(np.mean(scores >= tenth - 1e-9))
    assert np.mean(rec) >= 0.85


def test_saturation_is_exact(corpus):
    _, books, codes, index = corpus
    q = np.random.default_rng(2).standard_normal(16)
    ids, scores = index.search(q, index.count, index.count)
    want_ids, want_scores = exact(q, books, codes, index.count)
    np.testing.assert_array_equal(ids, want_ids)
    np.testing.assert_allclose(scores, want_scores)


def test_search_contract(corpus):
    _, _, _, index = corpus
    with pytest.raises(ContractError):
        index.search(np.zeros(16), 10, 5)
    with pytest.raises(ContractError):
        index.search(np.zeros(15), 10, 10)


def test_tiny_corpora():
    books = CodebookSet(np.random.default_rng(0).standard_normal((2, 4, 2)))
    for n in (1, 2, 3):
        codes = np.random.default_rng(n).integers(0, 4, (n, 2)).astype(np.uint8)
        index = build_hnsw(codes, books)
        ids, _ = index.search(np.ones(4), n, n)
        assert sorted(ids) == list(range(n))
    with pytest.raises(ContractError):
        build_hnsw(np.zeros((0, 2), dtype=np.uint8), books)


def test_levels_geometric_and_seeded():
    a = sample_levels(100_000, 1 / np.log(32), 0)
    assert np.array_equal(a, sample_levels(100_000, 1 / np.log(32), 0))
    # P(level >= 1) = 1/32
    assert abs((a >= 1).mean() - 1 / 32) < 0.003


def test_build_deterministic(corpus):
    _, books, codes, index = corpus
    again = build_hnsw(codes, books, index.params)
    assert np.array_equal(again.nbrs, index.nbrs) and np.array_equal(again.deg, index.deg)


def test_file_roundtrip_and_codebook_check(tmp_path, corpus):
    _, books, codes, index = corpus
    save_hnsw(index, tmp_path / "i.bgh")
    back = load_hnsw(tmp_path / "i.bgh", books)
    assert np.array_equal(back.nbrs, index.nbrs) and back.entry_point == index.entry_point
    assert np.array_equal(back.codes, codes)
    q = np.ones(16)
    np.testing.assert_array_equal(back.search(q, 10, 50)[0], index.search(q, 10, 50)[0])
    other = CodebookSet(books.codewords + 1)
    with pytest.raises(FormatError, match="codebook hash"):
        load_hnsw(tmp_path / "i.bgh", other)
    raw = (tmp_path / "i.bgh").read_bytes()
    (tmp_path / "t.bgh").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_hnsw(tmp_path / "t.bgh", books)
