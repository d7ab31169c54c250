import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bigran.core import (
    SyntheticSpec,
    VectorSet,
    gen_synthetic,
    inner_product,
    load_positives,
    load_vectors,
    make_rng,
    normalize,
    save_positives,
    save_vectors,
    top_k,
)
from bigran.errors import ConfigError, ContractError, FormatError

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def test_inner_product_examples():
    assert inner_product([1, 2], [3, 4]) == 11
    assert inner_product(np.zeros(5), np.arange(5)) == 0
    assert inner_product([1, 0, 0], [1, 0, 0]) == 1


def test_inner_product_dim_mismatch():
    with pytest.raises(ContractError):
        inner_product([1, 2], [1, 2, 3])


@given(
    arrays(np.float64, 8, elements=st.floats(-10, 10)),
    arrays(np.float64, 8, elements=st.floats(-10, 10)),
    arrays(np.float64, 8, elements=st.floats(-10, 10)),
    st.floats(-10, 10),
)
def test_inner_product_bilinear_symmetric(x, y, z, a):
    assert inner_product(x, y) == pytest.approx(inner_product(y, x))
    lhs = inner_product(x, a * y + z)
    rhs = a * inner_product(x, y) + inner_product(x, z)
    scale = np.abs(x) @ (np.abs(a * y) + np.abs(z)) + 1e-12
    assert abs(lhs - rhs) <= 1e-5 * scale


def test_normalize_leaves_zero_rows():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    np.testing.assert_allclose(normalize(x), [[0.6, 0.8], [0.0, 0.0]])


def test_vectorset_rejects_nonfinite_and_is_immutable():
    with pytest.raises(ContractError):
        VectorSet(np.array([[1.0, np.nan]]))
    vs = VectorSet(np.ones((2, 3)))
    with pytest.raises(ValueError):
        vs.vectors[0, 0] = 5


def test_bgv1_sizes(tmp_path):
    p = tmp_path / "e.bgv"
    save_vectors(VectorSet.empty(5), p)
    # magic 4 + dim 4 + count 8 + crc 4
    assert p.stat().st_size == 20
    save_vectors(VectorSet(np.ones((1, 2))), p)
    assert p.stat().st_size == 20 + 8
    vs = load_vectors(p)
    assert vs.count == 1 and vs.dim == 2


def test_bgv1_empty_with_dim(tmp_path):
    p = tmp_path / "e.bgv"
    save_vectors(VectorSet.empty(2), p)
    vs = load_vectors(p)
    assert vs.count == 0 and vs.dim == 2


@given(st.integers(0, 6), st.integers(1, 6), st.data())
def test_bgv1_roundtrip_bit_exact(tmp_path_factory, n, d, data):
    v = data.draw(arrays(np.float32, (n, d), elements=finite))
    p = tmp_path_factory.mktemp("v") / "x.bgv"
    vs = VectorSet(v, d)
    save_vectors(vs, p)
    back = load_vectors(p)
    assert back == vs
    save_vectors(back, p.with_suffix(".2"))
    assert p.read_bytes() == p.with_suffix(".2").read_bytes()


def test_bgv1_roundtrip_many(tmp_path):
    rng = np.random.default_rng(1)
    p = tmp_path / "x.bgv"
    for _ in range(1000):
        n, d = rng.integers(0, 5), rng.integers(1, 5)
        vs = VectorSet(rng.standard_normal((n, d)).astype(np.float32), int(d))
        save_vectors(vs, p)
        assert load_vectors(p) == vs


def test_bgv1_errors(tmp_path):
    p = tmp_path / "x.bgv"
    save_vectors(VectorSet(np.ones((3, 2))), p)
    raw = p.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="offset"):
        load_vectors(tmp_path / "trunc")
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_vectors(tmp_path / "magic")
    bad = bytearray(raw)
    bad[16:20] = np.array([np.inf], dtype="<f4").tobytes()
    (tmp_path / "inf").write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="offset 16"):
        load_vectors(tmp_path / "inf")
    flip = bytearray(raw)
    flip[20] ^= 1
    (tmp_path / "crc").write_bytes(bytes(flip))
    with pytest.raises(FormatError, match="crc"):
        load_vectors(tmp_path / "crc")


def test_gen_synthetic_deterministic():
    spec = SyntheticSpec(dim=8, n_answers=200, n_queries=50, n_clusters=4)
    a, b = gen_synthetic(spec, 5), gen_synthetic(spec, 5)
    assert a.answers == b.answers and a.queries == b.queries and a.positives == b.positives
    c = gen_synthetic(spec, 6)
    assert not (a.answers == c.answers)


def test_gen_synthetic_zero_noise_and_single_cluster():
    ds = gen_synthetic(SyntheticSpec(dim=8, n_answers=100, n_queries=40, n_clusters=1, noise_sigma=0.0), 0)
    assert np.all(ds.cluster_labels == 0)
    for q in range(40):
        np.testing.assert_array_equal(ds.queries[q], ds.answers[ds.positive_ids[q]])


def test_zero_noise_top1_normalized_retrieves_positive():
    ds = gen_synthetic(SyntheticSpec(dim=16, n_answers=500, n_queries=100, noise_sigma=0.0), 2)
    a = normalize(ds.answers.vectors)
    q = normalize(ds.queries.vectors)
    top1 = (q @ a.T).argmax(1)
    assert np.array_equal(top1, ds.positive_ids)


@pytest.mark.parametrize(
    "kw",
    [dict(dim=1), dict(n_clusters=0), dict(n_clusters=20, n_answers=10), dict(noise_sigma=-1.0), dict(n_queries=0)],
)
def test_gen_synthetic_validation(kw):
    with pytest.raises(ConfigError):
        gen_synthetic(SyntheticSpec(**kw), 0)


def test_make_rng_streams_are_independent():
    a = make_rng(1, 3).standard_normal(4)
    assert np.array_equal(a, make_rng(1, 3).standard_normal(4))
    assert not np.array_equal(a, make_rng(1, 4).standard_normal(4))
    with pytest.raises(ConfigError):
        make_rng(-1)


@given(arrays(np.float64, st.integers(1, 40), elements=st.integers(-3, 3).map(float)), st.integers(1, 50))
def test_top_k_matches_sort_with_id_tiebreak(s, k):
    expect = sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
    assert top_k(s, k).tolist() == expect


def test_positives_roundtrip(tmp_path):
    pos = {0: frozenset([3, 1]), 1: frozenset([2])}
    save_positives(pos, tmp_path / "p.tsv")
    assert (tmp_path / "p.tsv").read_text() == "0\t1\n0\t3\n1\t2\n"
    assert load_positives(tmp_path / "p.tsv") == pos
    (tmp_path / "bad.tsv").write_text("0 1\n")
    with pytest.raises(FormatError):
        load_positives(tmp_path / "bad.tsv")
