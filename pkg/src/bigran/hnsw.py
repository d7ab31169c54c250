"""HNSW graph over product-quantized items.

Construction scores two stored items by the inner product of their
reconstructions; queries are scored asymmetrically through an ADC table.
"Closer" always means a larger inner product.  The inner loops are compiled
with numba; everything else is plain numpy.
"""

from __future__ import annotations

import heapq
import math
import os
from dataclasses import dataclass

import numba
import numpy as np

from .binio import Reader, Writer
from .core import make_rng
from .errors import ContractError, FormatError
from .pq import CodebookSet, build_adc_table, codebooks_hash, codes_to_writer, read_codes, reconstruct_batch

BGH1_MAGIC = b"BGH1"
MAX_LEVEL = 15


@dataclass(frozen=True)
class HnswParams:
    max_degree: int = 32
    ef_construction: int = 200
    m_L: float = 1.0 / math.log(32)
    seed: int = 0

    def validate(self) -> None:
        if self.max_degree < 2:
            raise ContractError("max_degree must be >= 2")
        if self.ef_construction < 1:
            raise ContractError("ef_construction must be >= 1")
        if not self.m_L > 0:
            raise ContractError("m_L must be > 0")


# --------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _dot(a, b):
    s = 0.0
    for d in range(a.shape[0]):
        s += a[d] * b[d]
    return s


@numba.njit(cache=True)
def _adc(table, codes, j):
    s = 0.0
    for m in range(codes.shape[1]):
        s += table[m, codes[j, m]]
    return s


@numba.njit(cache=True)
def _score(q, table, use_table, rec, codes, j):
    if use_table:
        return _adc(table, codes, j)
    return _dot(q, rec[j])


@numba.njit(cache=True)
def _search_layer(q, table, use_table, rec, codes, nbrs, deg, layer, eps, ef, visited, stamp):
    """Beam search on one layer; returns the (score, id) result heap."""
    cand = [(0.0, np.int64(0)) for _ in range(0)]  # max-heap via negated scores
    res = [(0.0, np.int64(0)) for _ in range(0)]  # min-heap: worst result on top
    for e in eps:
        visited[e] = stamp
        s = _score(q, table, use_table, rec, codes, e)
        heapq.heappush(cand, (-s, np.int64(e)))
        heapq.heappush(res, (s, np.int64(e)))
        if len(res) > ef:
            heapq.heappop(res)
    while len(cand) > 0:
        negs, c = heapq.heappop(cand)
        if -negs < res[0][0]:
            break
        for k in range(deg[layer, c]):
            e = np.int64(nbrs[layer, c, k])
            if visited[e] == stamp:
                continue
            visited[e] = stamp
            s = _score(q, table, use_table, rec, codes, e)
            if len(res) < ef or s > res[0][0]:
                heapq.heappush(cand, (-s, e))
                heapq.heappush(res, (s, e))
                if len(res) > ef:
                    heapq.heappop(res)
    return res


@numba.njit(cache=True)
def _sorted(res):
    """Heap contents as arrays, score descending, ties by ascending id."""
    n = len(res)
    ids = np.empty(n, np.int64)
    for i in range(n):
        ids[i] = res[i][1]
    ids = np.sort(ids)
    lookup = dict()
    for i in range(n):
        lookup[res[i][1]] = res[i][0]
    scores = np.empty(n)
    for i in range(n):
        scores[i] = lookup[ids[i]]
    order = np.argsort(-scores, kind="mergesort")
    return ids[order], scores[order]


@numba.njit(cache=True)
def _select(rec, ids, scores, m):
    """Heuristic neighbor selection over candidates sorted by score."""
    out = np.empty(m, np.int64)
    n = 0
    for i in range(ids.shape[0]):
        e = ids[i]
        good = True
        for r in range(n):
            if _dot(rec[e], rec[out[r]]) > scores[i]:
                good = False
                break
        if good:
            out[n] = e
            n += 1
            if n == m:
                break
    return out[:n]


@numba.njit(cache=True)
def _greedy(q, table, use_table, rec, codes, nbrs, deg, layer, ep, ep_s):
    changed = True
    while changed:
        changed = False
        for k in range(deg[layer, ep]):
            e = np.int64(nbrs[layer, ep, k])
            s = _score(q, table, use_table, rec, codes, e)
            if s > ep_s or (s == ep_s and e < ep):
                ep, ep_s, changed = e, s, True
    return ep, ep_s


@numba.njit(cache=True)
def _build(rec, levels, max_degree, ef_c, nbrs, deg):
    n = rec.shape[0]
    visited = np.zeros(n, np.int64)
    stamp = 0
    table = np.zeros((1, 1))
    codes = np.zeros((1, 1), np.uint8)
    entry = 0
    top = levels[0]
    for i in range(1, n):
        q = rec[i]
        lvl = levels[i]
        ep = np.int64(entry)
        ep_s = _dot(q, rec[ep])
        for layer in range(top, lvl, -1):
            ep, ep_s = _greedy(q, table, False, rec, codes, nbrs, deg, layer, ep, ep_s)
        eps = np.array([ep])
        for layer in range(min(lvl, top), -1, -1):
            stamp += 1
            res = _search_layer(q, table, False, rec, codes, nbrs, deg, layer, eps, ef_c, visited, stamp)
            ids, scores = _sorted(res)
            cap = 2 * max_degree if layer == 0 else max_degree
            sel = _select(rec, ids, scores, max_degree)
            for e in sel:
                nbrs[layer, i, deg[layer, i]] = e
                deg[layer, i] += 1
            for e in sel:
                if deg[layer, e] < cap:
                    nbrs[layer, e, deg[layer, e]] = i
                    deg[layer, e] += 1
                    continue
                cids = np.empty(cap + 1, np.int64)
                for k in range(cap):
                    cids[k] = nbrs[layer, e, k]
                cids[cap] = i
                cids = np.sort(cids)
                cs = np.empty(cap + 1)
                for k in range(cap + 1):
                    cs[k] = _dot(rec[e], rec[cids[k]])
                order = np.argsort(-cs, kind="mergesort")
                keep = _select(rec, cids[order], cs[order], cap)
                for k in range(keep.shape[0]):
                    nbrs[layer, e, k] = keep[k]
                deg[layer, e] = keep.shape[0]
            eps = ids
        if lvl > top:
            entry = i
            top = lvl
    return entry


@numba.njit(cache=True)
def _mark_from(nbrs, deg, start, reach):
    stack = [np.int64(start)]
    reach[start] = True
    while len(stack) > 0:
        c = stack.pop()
        for k in range(deg[0, c]):
            e = np.int64(nbrs[0, c, k])
            if not reach[e]:
                reach[e] = True
                stack.append(e)


@numba.njit(cache=True)
def _query(table, codes, nbrs, deg, entry, top, ef):
    q = np.zeros(1)
    rec = np.zeros((1, 1))
    ep = np.int64(entry)
    ep_s = _adc(table, codes, ep)
    for layer in range(top, 0, -1):
        ep, ep_s = _greedy(q, table, True, rec, codes, nbrs, deg, layer, ep, ep_s)
    visited = np.zeros(codes.shape[0], np.int64)
    res = _search_layer(q, table, True, rec, codes, nbrs, deg, 0, np.array([ep]), ef, visited, 1)
    return _sorted(res)


# --------------------------------------------------------------------------
# index


@dataclass(eq=False)
class HnswIndex:
    """Layered adjacency (padded arrays) plus the codes it indexes.

    ``nbrs[L, v, :deg[L, v]]`` are the out-neighbors of ``v`` on layer ``L``.
    """

    nbrs: np.ndarray
    deg: np.ndarray
    levels: np.ndarray
    entry_point: int
    params: HnswParams
    codes: np.ndarray
    books: CodebookSet

    @property
    def count(self) -> int:
        return len(self.codes)

    @property
    def top_level(self) -> int:
        return int(self.levels[self.entry_point])

    def neighbors(self, layer: int, v: int) -> np.ndarray:
        return self.nbrs[layer, v, : self.deg[layer, v]].astype(np.int64)

    def reachable(self) -> np.ndarray:
        reach = np.zeros(self.count, dtype=np.bool_)
        _mark_from(self.nbrs, self.deg, self.entry_point, reach)
        return reach

    def adjacency_bytes(self) -> int:
        """Bytes of the CSR adjacency as serialized (offsets + neighbor ids)."""
        n_layers = self.nbrs.shape[0]
        return int(n_layers * (self.count + 1) * 8 + self.deg.sum() * 4)

    def search(self, query_emb, N: int, ef_search: int) -> tuple[np.ndarray, np.ndarray]:
        """Top-``N`` ids and ADC scores, descending (ties by ascending id)."""
        if ef_search < N:
            raise ContractError(f"ef_search ({ef_search}) must be >= N ({N})")
        if N < 1:
            raise ContractError("N must be >= 1")
        table = build_adc_table(query_emb, self.books)
        ids, scores = _query(table, self.codes, self.nbrs, self.deg, self.entry_point, self.top_level, ef_search)
        return ids[:N], scores[:N]


def sample_levels(n: int, m_L: float, seed: int) -> np.ndarray:
    u = make_rng(seed, 20).random(n)
    lv = np.floor(-np.log1p(-u) * m_L)
    return np.minimum(lv, MAX_LEVEL).astype(np.int64)


def build_hnsw(codes: np.ndarray, books: CodebookSet, params: HnswParams | None = None) -> HnswIndex:
    params = params or HnswParams()
    params.validate()
    codes = np.ascontiguousarray(np.atleast_2d(codes))
    n = len(codes)
    if n == 0:
        raise ContractError("build_hnsw: empty corpus")
    if codes.shape[1] != books.M:
        raise ContractError(f"codes have {codes.shape[1]} subspaces, codebooks {books.M}")
    rec = np.ascontiguousarray(reconstruct_batch(codes, books, rotated=True))
    levels = sample_levels(n, params.m_L, params.seed)
    n_layers = int(levels.max()) + 1
    nbrs = np.zeros((n_layers, n, 2 * params.max_degree), dtype=np.int32)
    deg = np.zeros((n_layers, n), dtype=np.int32)
    entry = int(_build(rec, levels, params.max_degree, params.ef_construction, nbrs, deg))
    index = HnswIndex(nbrs, deg, levels, entry, params, codes, books)
    _repair(index, rec)
    # zero stale slots past each degree so the arrays are canonical
    nbrs[np.arange(nbrs.shape[2])[None, None, :] >= deg[:, :, None]] = 0
    return index


def _repair(index: HnswIndex, rec: np.ndarray) -> None:
    """Link every node unreachable at layer 0 from its most similar reachable node with spare capacity."""
    reach = index.reachable()
    cap = 2 * index.params.max_degree
    for u in np.flatnonzero(~reach):
        if reach[u]:
            continue
        ok = np.flatnonzero(reach & (index.deg[0] < cap))
        if ok.size == 0:
            raise ContractError("HNSW repair: no reachable node has spare capacity")
        s = rec[ok] @ rec[u]
        src = ok[int(np.argmax(s))]
        index.nbrs[0, src, index.deg[0, src]] = u
        index.deg[0, src] += 1
        _mark_from(index.nbrs, index.deg, int(u), reach)


# --------------------------------------------------------------------------
# serialization


def save_hnsw(index: HnswIndex, path: str | os.PathLike) -> None:
    p = index.params
    n_layers = index.nbrs.shape[0]
    w = Writer(BGH1_MAGIC)
    w.pack("IIdQQII", p.max_degree, p.ef_construction, p.m_L, p.seed, index.count, n_layers, index.entry_point)
    w.array(index.levels, "u1")
    for layer in range(n_layers):
        d = index.deg[layer].astype(np.uint64)
        off = np.zeros(index.count + 1, dtype=np.uint64)
        off[1:] = np.cumsum(d)
        w.array(off, "u8")
        mask = np.arange(index.nbrs.shape[2])[None, :] < index.deg[layer][:, None]
        w.array(index.nbrs[layer][mask], "u4")
    block = codes_to_writer(index.codes, index.books.P).getvalue()
    w.pack("Q", len(block))
    w.raw(block)
    w.raw(codebooks_hash(index.books).encode("ascii"))
    w.write(path)


def load_hnsw(path: str | os.PathLike, books: CodebookSet) -> HnswIndex:
    """Load an index; ``books`` must hash to the reference stored in the file."""
    r = Reader.open(path, BGH1_MAGIC)
    max_degree, ef_c, m_L, seed, n, n_layers, entry = r.unpack("IIdQQII")
    if n == 0 or n_layers == 0 or n_layers > MAX_LEVEL + 1 or entry >= n or max_degree < 2:
        raise FormatError(f"{path}: invalid index header (offset 4)")
    levels = r.array("u1", n).astype(np.int64)
    cap = 2 * max_degree
    nbrs = np.zeros((n_layers, n, cap), dtype=np.int32)
    deg = np.zeros((n_layers, n), dtype=np.int32)
    for layer in range(n_layers):
        off = r.array("u8", n + 1).astype(np.int64)
        d = np.diff(off)
        if off[0] != 0 or np.any(d < 0) or np.any(d > cap):
            raise FormatError(f"{path}: corrupt adjacency offsets for layer {layer} near offset {r.pos}")
        ids = r.array("u4", int(off[-1]))
        if ids.size and ids.max() >= n:
            raise FormatError(f"{path}: neighbor id out of range in layer {layer}")
        deg[layer] = d
        mask = np.arange(cap)[None, :] < d[:, None]
        nbrs[layer][mask] = ids
    blen = r.unpack("Q")
    sub = Reader(r.raw(blen), b"BGC1", what=f"{path} (code block)")
    codes, P = read_codes(sub)
    sub.finish()
    ref = r.raw(16).decode("ascii", errors="replace")
    r.finish()
    if codes.shape[0] != n:
        raise FormatError(f"{path}: code block holds {codes.shape[0]} items, index {n}")
    if ref != codebooks_hash(books):
        raise FormatError(f"{path}: codebook hash {ref} does not match the supplied codebooks")
    if P != books.P or codes.shape[1] != books.M:
        raise FormatError(f"{path}: code shape does not match codebooks")
    params = HnswParams(max_degree, ef_c, m_L, seed)
    return HnswIndex(nbrs, deg, levels, int(entry), params, np.ascontiguousarray(codes), books)
