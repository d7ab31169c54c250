"""Exact-search oracles, recall metrics and the three studies.

* ``compare_quantizers``: candidate-search recall of several quantizers
  scored by exhaustive ADC, plus the continuous (unquantized) upper bound.
* ``sweep_candidates``: end-to-end recall and latency as the candidate
  count ``N`` grows.
* ``sweep_bits``: recall and resident bytes as the number of codebooks grows
  at ``P = 256``.

Report writers emit TSV, JSON lines and optional gnuplot data files; column
orders are listed in ``docs/reports.md``.
"""

from __future__ import annotations

import heapq
import json
import os
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import VectorSet, top_k
from .errors import ConfigError, ContractError
from .pq import CodebookSet, encode_batch, exhaustive_adc_topk, train_opq, train_pq

# --------------------------------------------------------------------------
# oracles and metrics


def _corpus(corpus) -> np.ndarray:
    return corpus.vectors if isinstance(corpus, VectorSet) else np.asarray(corpus)


def _clamp(K: int, n: int) -> int:
    if K > n:
        warnings.warn(f"K={K} exceeds corpus size {n}; clamped", stacklevel=3)
        return n
    return K


def brute_force_topk(query, corpus, K: int) -> np.ndarray:
    """Exact top-``K`` ids by inner product, ties by ascending id (full sort)."""
    x = _corpus(corpus).astype(np.float64)
    K = _clamp(K, len(x))
    scores = x @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((np.arange(len(x)), -scores))
    return order[:K].astype(np.int64)


def brute_force_topk_heap(query, corpus, K: int) -> np.ndarray:
    """Independent heap-based oracle with the same tie rule."""
    x = _corpus(corpus).astype(np.float64)
    K = _clamp(K, len(x))
    q = np.asarray(query, dtype=np.float64)
    heap: list[tuple[float, int]] = []  # min-heap on (score, -id)
    for i in range(len(x)):
        item = (float(x[i] @ q), -i)
        if len(heap) < K:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)
    return np.array([-i for _, i in sorted(heap, reverse=True)], dtype=np.int64)


def recall_at_k(retrieved, relevant, K: int) -> float:
    relevant = set(int(a) for a in relevant)
    if not relevant:
        raise ContractError("recall_at_k: empty relevant set")
    top = [int(a) for a in list(retrieved)[:K]]
    return len(relevant.intersection(top)) / len(relevant)


@dataclass
class RecallReport:
    recalls: dict[int, float]
    n_queries: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = sorted(self.recalls)
        vals = [self.recalls[k] for k in ks]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ContractError("recall values must lie in [0, 1]")
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise ContractError("recall must be non-decreasing in K")


def recall_report(ranked: np.ndarray, positives: dict[int, frozenset[int]], Ks, config: dict | None = None) -> RecallReport:
    """Mean Recall@K over queries from ``(nq, >= max K)`` ranked id lists."""
    Ks = sorted(set(int(k) for k in Ks))
    out = {}
    for k in Ks:
        out[k] = float(np.mean([recall_at_k(ranked[q], positives[q], k) for q in range(len(ranked))]))
    return RecallReport(out, len(ranked), dict(config or {}))


def dense_ranking(q_emb: np.ndarray, a_emb: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    q = np.atleast_2d(np.asarray(q_emb, dtype=np.float64))
    a = np.asarray(a_emb, dtype=np.float64)
    k = min(k, len(a))
    out = np.empty((len(q), k), dtype=np.int64)
    for s in range(0, len(q), chunk):
        out[s : s + chunk] = top_k(q[s : s + chunk] @ a.T, k)
    return out


# --------------------------------------------------------------------------
# quantizer comparison


@dataclass(eq=False)
class QuantizerRun:
    """A quantizer's query embeddings and encoded corpus."""

    name: str
    query_emb: np.ndarray
    codes: np.ndarray
    books: CodebookSet


@dataclass
class QuantizerTable:
    Ns: list[int]
    rows: dict[str, dict[int, float]]  # method -> N -> recall
    n_queries: int

    def recall(self, method: str, N: int) -> float:
        return self.rows[method][N]

    def records(self) -> list[dict]:
        return [{"method": m, "N": n, "recall": r[n]} for m, r in self.rows.items() for n in self.Ns]


def compare_quantizers(
    runs: list[QuantizerRun],
    positives: dict[int, frozenset[int]],
    Ns,
    dense: tuple[np.ndarray, np.ndarray] | None = None,
) -> QuantizerTable:
    """Recall@N of exhaustive ADC candidate search for each run.

    ``dense`` adds an ``upper_bound`` row from exhaustive search over the
    given ``(query_emb, answer_emb)`` pair.
    """
    Ns = sorted(set(int(n) for n in Ns))
    if not Ns:
        raise ConfigError("compare_quantizers: no N values")
    rows: dict[str, dict[int, float]] = {}
    nq = None
    for run in runs:
        if run is None or run.codes is None or run.books is None or run.query_emb is None:
            raise ContractError("compare_quantizers: missing artifact")
        if run.name in rows:
            raise ConfigError(f"duplicate method name {run.name!r}")
        ranked = exhaustive_adc_topk(run.query_emb, run.codes, run.books, max(Ns))
        rows[run.name] = recall_report(ranked, positives, Ns).recalls
        nq = len(ranked)
    if dense is not None:
        ranked = dense_ranking(dense[0], dense[1], max(Ns))
        rows["upper_bound"] = recall_report(ranked, positives, Ns).recalls
        nq = len(ranked)
    return QuantizerTable(Ns, rows, nq or 0)


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepReport:
    axis: str
    points: list[int]
    recall: list[float]
    K: int
    latency_median_ms: list[float] | None = None
    latency_p95_ms: list[float] | None = None
    resident_bytes: list[int] | None = None
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.points, self.points[1:])):
            raise ContractError("sweep axis must be strictly increasing")

    def nondecreasing_steps(self) -> int:
        return sum(b >= a for a, b in zip(self.recall, self.recall[1:]))

    def records(self) -> list[dict]:
        out = []
        for i, p in enumerate(self.points):
            row = {self.axis: p, f"recall@{self.K}": self.recall[i]}
            if self.axis == "M":
                row["bits"] = 8 * p
            if self.latency_median_ms is not None:
                row["latency_median_ms"] = self.latency_median_ms[i]
                row["latency_p95_ms"] = self.latency_p95_ms[i]
            if self.resident_bytes is not None:
                row["resident_bytes"] = self.resident_bytes[i]
            out.append(row)
        return out


def sweep_candidates(pipeline, Ns, K: int, exhaustive: bool = False, ef_search: int | None = None) -> SweepReport:
    """End-to-end recall@K and per-query latency for each candidate size.

    ``pipeline`` must provide ``search(features, N, K, ef_search, exhaustive)``
    returning a ``SearchResult``, plus ``test_queries`` (VectorSet),
    ``test_positives`` and ``corpus_size``.
    """
    Ns = sorted(set(int(n) for n in Ns))
    n = pipeline.corpus_size
    if any(N > n for N in Ns):
        warnings.warn(f"candidate sizes above corpus size {n} clamped", stacklevel=2)
        Ns = sorted(set(min(N, n) for N in Ns))
    if any(N < K for N in Ns):
        raise ContractError(f"every N must be >= K={K}")
    X = pipeline.test_queries.vectors
    recalls, med, p95 = [], [], []
    for N in Ns:
        ef = max(N, ef_search or 0)
        times, hits = [], []
        for q in range(len(X)):
            t0 = time.perf_counter()
            res = pipeline.search(X[q], N=N, K=K, ef_search=ef, exhaustive=exhaustive)
            times.append((time.perf_counter() - t0) * 1e3)
            hits.append(recall_at_k(res.ids, pipeline.test_positives[q], K))
        recalls.append(float(np.mean(hits)))
        med.append(float(np.median(times)))
        p95.append(float(np.percentile(times, 95)))
    rep = SweepReport("N", Ns, recalls, K, med, p95)
    if rep.nondecreasing_steps() < len(Ns) - 1:
        msg = "recall decreased as N grew"
        if exhaustive:
            raise ContractError(msg + " under exhaustive candidate search")
        warnings.warn(msg + " (HNSW beam noise)", stacklevel=2)
        rep.notes.append(msg)
    return rep


def sweep_bits(
    answer_emb: np.ndarray,
    query_emb: np.ndarray,
    positives: dict[int, frozenset[int]],
    Ms,
    K: int = 100,
    P: int = 256,
    method: str = "opq",
    seed: int = 0,
    opq_alternations: int = 5,
) -> SweepReport:
    """Recall@K and resident bytes per codebook count at fixed ``P``."""
    if P != 256:
        raise ConfigError("sweep_bits fixes P=256 so bits per item = 8*M")
    if method not in ("pq", "opq"):
        raise ConfigError(f"unknown method {method!r} (expected pq or opq)")
    Ms_in = [int(m) for m in Ms]
    Ms = sorted(set(Ms_in))
    if len(Ms) != len(Ms_in):
        warnings.warn("duplicate M entries removed", stacklevel=2)
    d = answer_emb.shape[1]
    notes = []
    kept = []
    for m in Ms:
        if d % m:
            notes.append(f"M={m} skipped: dimension {d} not divisible")
            warnings.warn(notes[-1], stacklevel=2)
        else:
            kept.append(m)
    recalls, sizes = [], []
    for m in kept:
        if method == "pq":
            books = train_pq(answer_emb, m, P, seed=seed)
        else:
            books = train_opq(answer_emb, m, P, opq_alternations, seed=seed)
        codes = encode_batch(answer_emb, books, rule="l2")
        ranked = exhaustive_adc_topk(query_emb, codes, books, K)
        recalls.append(recall_report(ranked, positives, [K]).recalls[K])
        sizes.append(int(codes.size * codes.itemsize + books.nbytes()))
    return SweepReport("M", kept, recalls, K, resident_bytes=sizes, notes=notes)


# --------------------------------------------------------------------------
# report files


def write_records(records: list[dict], columns: list[str], out_dir, stem: str, plot: bool = False) -> None:
    """``stem.tsv`` with a header row, ``stem.jsonl``, and optionally ``stem.dat``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def fmt(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    lines = ["\t".join(columns)] + ["\t".join(fmt(r[c]) for c in columns) for r in records]
    (out / f"{stem}.tsv").write_text("\n".join(lines) + "\n")
    with open(out / f"{stem}.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps({c: r[c] for c in columns}, sort_keys=False) + "\n")
    if plot:
        dat = ["# " + " ".join(columns)] + [" ".join(fmt(r[c]) for c in columns) for r in records]
        (out / f"{stem}.dat").write_text("\n".join(dat) + "\n")


QUANTIZER_COLUMNS = ["method", "N", "recall"]
CANDIDATE_COLUMNS = ["N", "recall", "latency_median_ms", "latency_p95_ms"]
BITS_COLUMNS = ["M", "bits", "recall", "resident_bytes"]


def write_quantizer_table(table: QuantizerTable, out_dir, plot: bool = False) -> None:
    write_records(table.records(), QUANTIZER_COLUMNS, out_dir, "quantizers", plot)


def write_sweep(rep: SweepReport, out_dir, plot: bool = False) -> None:
    rows = []
    for r in rep.records():
        r = dict(r)
        r["recall"] = r.pop(f"recall@{rep.K}")
        rows.append(r)
    if rep.axis == "N":
        write_records(rows, CANDIDATE_COLUMNS, out_dir, "sweep_candidates", plot)
    else:
        write_records(rows, BITS_COLUMNS, out_dir, "sweep_bits", plot)


def save_json(obj, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(type(o))
