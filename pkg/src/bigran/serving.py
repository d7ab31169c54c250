"""Two-phase serving: sparse candidate search, then dense post-verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import top_k
from .errors import ContractError
from .hnsw import HnswIndex
from .nn import TowerEncoder
from .pq import adc_scores, build_adc_table
from .store import DenseStore, fetch_dense

DEFAULT_N = 1000


@dataclass(frozen=True)
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if len(self.ids) != len(self.scores):
            raise ContractError("SearchResult ids/scores length mismatch")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ContractError("SearchResult ids must be distinct")
        if np.any(np.diff(self.scores) > 0):
            raise ContractError("SearchResult scores must be non-increasing")


def rank(ids: np.ndarray, scores: np.ndarray, K: int) -> SearchResult:
    """Top ``K`` of ``(ids, scores)`` by score descending, ties by lower id."""
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((ids, -scores))[:K]
    return SearchResult(ids[order], scores[order])


def post_verify(query_dense, candidates, store: DenseStore, K: int) -> SearchResult:
    cand = np.asarray(candidates, dtype=np.int64)
    if K > len(cand):
        raise ContractError(f"K={K} exceeds the {len(cand)} candidates")
    vecs = fetch_dense(store, cand).astype(np.float64)
    q = np.asarray(query_dense, dtype=np.float64)
    if q.shape != (store.dim,):
        raise ContractError(f"query has shape {q.shape}, store dim is {store.dim}")
    return rank(cand, vecs @ q, K)


@dataclass(eq=False)
class QueryEncoders:
    """``unified`` holds one encoder for both phases; otherwise ``g`` drives
    candidate search and ``g_prime`` post-verification."""

    g: TowerEncoder
    g_prime: TowerEncoder | None = None

    @classmethod
    def unified(cls, g2: TowerEncoder) -> "QueryEncoders":
        return cls(g2, None)

    @property
    def mode(self) -> str:
        return "unified" if self.g_prime is None else "dual"

    def encode(self, features) -> tuple[np.ndarray, np.ndarray]:
        zc = self.g(features)
        return zc, (zc if self.g_prime is None else self.g_prime(features))


def candidates(index: HnswIndex, query_emb, N: int, ef_search: int | None = None, exhaustive: bool = False) -> np.ndarray:
    """Phase 1: HNSW top-``N`` (or exhaustive ADC when ``exhaustive``)."""
    if exhaustive:
        return top_k(adc_scores(build_adc_table(query_emb, index.books), index.codes), N)
    return index.search(query_emb, N, N if ef_search is None else ef_search)[0]


def search(
    index: HnswIndex,
    store: DenseStore,
    query_features,
    encoders: QueryEncoders,
    N: int = DEFAULT_N,
    K: int = 10,
    ef_search: int | None = None,
    exhaustive: bool = False,
) -> SearchResult:
    if K > N:
        raise ContractError(f"K={K} must not exceed N={N}")
    N = min(N, index.count)
    K = min(K, N)
    ef = max(N, ef_search or 0)
    zc, zv = encoders.encode(np.asarray(query_features)[None])
    cand = candidates(index, zc[0], N, ef, exhaustive)
    return post_verify(zv[0], cand, store, K)


def sparse_only(index: HnswIndex, query_emb, K: int, ef_search: int | None = None, exhaustive: bool = False) -> SearchResult:
    """Candidate search alone, truncated to ``K`` (no post-verification)."""
    ids = candidates(index, query_emb, K, max(K, ef_search or K), exhaustive)
    scores = adc_scores(build_adc_table(query_emb, index.books), index.codes[ids])
    return rank(ids, scores, K)


def stats(index: HnswIndex, store: DenseStore | None = None) -> dict:
    """Resident memory accounting for the in-memory side, plus the disk store."""
    code_bytes = int(index.codes.size * index.codes.itemsize)
    books_bytes = int(index.books.nbytes())
    adj = index.adjacency_bytes()
    out = {
        "count": index.count,
        "M": index.books.M,
        "P": index.books.P,
        "bits_per_item": int(index.books.M * np.log2(index.books.P)),
        "code_bytes": code_bytes,
        "codebook_bytes": books_bytes,
        "adjacency_bytes": adj,
        "resident_bytes": code_bytes + books_bytes + adj,
        "layers": int(index.nbrs.shape[0]),
        "edges": int(index.deg.sum()),
    }
    if store is not None:
        out["dense_store_bytes"] = store.nbytes
    return out
