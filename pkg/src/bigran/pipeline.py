"""End-to-end orchestration: training stages, artifact files, serving and metrics.

The library functions here are what the CLI, the experiment scripts and the
acceptance suite share, so a number printed by one is reproducible by the
others from the same ``PipelineConfig``.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import content_hash, file_hash
from .config import PipelineConfig
from .core import SyntheticDataset, VectorSet, check_positives, gen_synthetic, load_positives, load_vectors, save_positives, save_vectors
from .errors import BigranError, ContractError, FormatError
from .hnsw import HnswIndex, build_hnsw, load_hnsw, save_hnsw
from .lcs import BipartiteGraph, build_bipartite_graph, load_graph, save_graph
from .nn import TowerEncoder, load_encoder, save_encoder
from .pq import CodebookSet, encode_batch, load_codebooks, save_codebooks, save_codes, train_opq, train_pq
from .evaluation import recall_at_k
from .serving import QueryEncoders, SearchResult, candidates, post_verify, search
from .store import DenseStore, open_dense_store, write_dense_store
from .training import (
    SparseEncoder,
    TrainLog,
    lexical_negatives,
    train_dense,
    train_stage1,
    train_stage2,
    unify_query,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class StageError(BigranError):
    """A training stage failed; wraps the original error with the stage name."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage} failed: {exc}")
        self.exit_code = getattr(exc, "exit_code", 1)


# --------------------------------------------------------------------------
# data


def make_dataset(cfg: PipelineConfig) -> SyntheticDataset:
    return gen_synthetic(cfg.synthetic_spec(), cfg.data_seed)


def split(data: SyntheticDataset, cfg: PipelineConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    return data.split(cfg.train_count(data.queries.count))


def save_dataset(data: SyntheticDataset, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_vectors(data.answers, out / "answers.bgv")
    save_vectors(data.queries, out / "queries.bgv")
    save_positives(data.positives, out / "positives.tsv")
    return {n: file_hash(out / n) for n in ("answers.bgv", "queries.bgv", "positives.tsv")}


def load_dataset(data_dir) -> SyntheticDataset:
    d = Path(data_dir)
    answers = load_vectors(d / "answers.bgv")
    queries = load_vectors(d / "queries.bgv")
    positives = load_positives(d / "positives.tsv")
    check_positives(positives, queries.count, answers.count)
    return SyntheticDataset(answers, queries, positives, np.zeros(answers.count, dtype=np.int64))


# --------------------------------------------------------------------------
# training


@dataclass(eq=False)
class TrainedModel:
    warm_g: TowerEncoder
    warm_f: TowerEncoder
    pq: CodebookSet
    opq: CodebookSet
    g: TowerEncoder
    f_s: SparseEncoder
    graph: BipartiteGraph | None = None
    g_prime: TowerEncoder | None = None
    f_d: TowerEncoder | None = None
    g_unified: TowerEncoder | None = None
    log: TrainLog | None = None

    def encoders(self, mode: str) -> QueryEncoders:
        if mode == "unified":
            if self.g_unified is None:
                raise ContractError("unified mode needs a unified query encoder")
            return QueryEncoders.unified(self.g_unified)
        if self.g_prime is None:
            raise ContractError("dual mode needs g' (run stage 2)")
        return QueryEncoders(self.g, self.g_prime)

    @property
    def dense_tower(self) -> TowerEncoder:
        """Answer tower for the dense store: f_d, or the stage-1 tower before stage 2."""
        return self.f_d if self.f_d is not None else self.f_s.tower


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except BigranError as exc:
        raise StageError(name, exc) from exc
    except (ValueError, ArithmeticError) as exc:
        raise StageError(name, exc) from exc


def train_baselines(train: SyntheticDataset, aux: np.ndarray, cfg: PipelineConfig):
    """Dense two-tower warm-up, then unsupervised PQ and OPQ on its answer embeddings."""
    g0, f0 = _stage("warm-up", train_dense, train, aux, cfg.warmup())
    emb = f0(train.answers.vectors)
    pq = _stage("pq", train_pq, emb, cfg.M, cfg.P, cfg.kmeans_iters, cfg.seed)
    opq = _stage("opq", train_opq, emb, cfg.M, cfg.P, cfg.opq_alternations, cfg.seed, cfg.kmeans_iters)
    return g0, f0, pq, opq


def train_all(train: SyntheticDataset, cfg: PipelineConfig, stages: int = 3, unify: bool | None = None) -> TrainedModel:
    """Warm-up/baselines, stage 1, graph + stage 2, and optionally unification."""
    unify = cfg.unify if unify is None else unify
    tlog = TrainLog()
    aux = lexical_negatives(train)
    g0, f0, pq, opq = train_baselines(train, aux, cfg)
    s1 = _stage(
        "stage 1", train_stage1, train, aux, cfg.stage1(), g=g0, tower=f0, books=opq,
        ann_negatives_depth=cfg.s1_ann_depth, sphere_scale=cfg.sphere_scale or None, log_=tlog,
    )
    model = TrainedModel(g0, f0, pq, opq, s1.g, s1.f_s, log=tlog)
    if stages < 2:
        return model
    model.graph = _stage("graph", build_graph, train, model, cfg)
    s2 = _stage("stage 2", train_stage2, train, model.graph, cfg.strategy, cfg.stage2(), s1.g, s1.f_s.tower, log_=tlog)
    model.g_prime, model.f_d = s2.g_prime, s2.f_d
    if stages >= 3 and unify:
        u = _stage(
            "unification", unify_query, s2.g_prime, s1.f_s, s2.f_d, train, model.graph, aux, cfg.stage3(),
            queue_capacity=cfg.queue_capacity, sparse_weight=cfg.sparse_weight, dense_weight=cfg.dense_weight,
            strategy=cfg.strategy, log_=tlog,
        )
        model.g_unified = u.g_unified
    return model


def build_graph(train: SyntheticDataset, model: TrainedModel, cfg: PipelineConfig) -> BipartiteGraph:
    codes = model.f_s.encode(train.answers.vectors)
    return build_bipartite_graph(model.g(train.queries.vectors), codes, model.f_s.books, train.positives, cfg.graph_N)


# --------------------------------------------------------------------------
# artifacts and the hash chain


MODEL_FILES = {
    "warm_g": "baselines/warm_g.bge",
    "warm_f": "baselines/warm_f.bge",
    "pq": "baselines/pq.bgb",
    "opq": "baselines/opq.bgb",
    "g": "g.bge",
    "f_s_tower": "f_s.bge",
    "f_s_books": "f_s.bgb",
    "graph": "graph.bgg",
    "g_prime": "g_prime.bge",
    "f_d": "f_d.bge",
    "g_unified": "g_unified.bge",
}


def write_manifest(out_dir, artifacts: dict[str, str], inputs: dict[str, str]) -> None:
    """Content hashes of this step's outputs and of the inputs it consumed."""
    doc = {"artifacts": dict(sorted(artifacts.items())), "inputs": dict(sorted(inputs.items()))}
    (Path(out_dir) / MANIFEST).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(out_dir) -> dict:
    p = Path(out_dir) / MANIFEST
    if not p.exists():
        raise FormatError(f"{p}: missing manifest")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{p}: {exc}") from None


def verify_manifest(out_dir) -> dict:
    """Check every recorded artifact still hashes to its recorded value."""
    man = read_manifest(out_dir)
    for rel, h in man["artifacts"].items():
        p = Path(out_dir) / rel
        if not p.exists():
            raise FormatError(f"{p}: listed in manifest but missing")
        if file_hash(p) != h:
            raise ContractError(f"{p}: content hash {file_hash(p)} does not match manifest {h}")
    return man


def dataset_hashes(data_dir) -> dict[str, str]:
    return {f"data/{n}": file_hash(Path(data_dir) / n) for n in ("answers.bgv", "queries.bgv", "positives.tsv")}


def save_model(model: TrainedModel, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    (out / "baselines").mkdir(parents=True, exist_ok=True)
    written = {}

    def put(key, save, obj):
        if obj is None:
            return
        save(obj, out / MODEL_FILES[key])
        written[MODEL_FILES[key]] = file_hash(out / MODEL_FILES[key])

    put("warm_g", save_encoder, model.warm_g)
    put("warm_f", save_encoder, model.warm_f)
    put("pq", save_codebooks, model.pq)
    put("opq", save_codebooks, model.opq)
    put("g", save_encoder, model.g)
    put("f_s_tower", save_encoder, model.f_s.tower)
    put("f_s_books", save_codebooks, model.f_s.books)
    put("graph", save_graph, model.graph)
    put("g_prime", save_encoder, model.g_prime)
    put("f_d", save_encoder, model.f_d)
    put("g_unified", save_encoder, model.g_unified)
    if model.log is not None:
        write_train_log(model.log, out / "train_log.tsv")
        written["train_log.tsv"] = file_hash(out / "train_log.tsv")
    return written


def load_model(model_dir) -> TrainedModel:
    d = Path(model_dir)

    def get(key, loader):
        p = d / MODEL_FILES[key]
        return loader(p) if p.exists() else None

    g, tower, books = get("g", load_encoder), get("f_s_tower", load_encoder), get("f_s_books", load_codebooks)
    if g is None or tower is None or books is None:
        raise FormatError(f"{d}: stage-1 artifacts (g.bge, f_s.bge, f_s.bgb) missing")
    return TrainedModel(
        warm_g=get("warm_g", load_encoder),
        warm_f=get("warm_f", load_encoder),
        pq=get("pq", load_codebooks),
        opq=get("opq", load_codebooks),
        g=g,
        f_s=SparseEncoder(tower, books),
        graph=get("graph", load_graph),
        g_prime=get("g_prime", load_encoder),
        f_d=get("f_d", load_encoder),
        g_unified=get("g_unified", load_encoder),
    )


TRAIN_LOG_COLUMNS = ["stage", "epoch", "step", "loss", "val_loss", "visit_hash"]


def write_train_log(tlog: TrainLog, path) -> None:
    lines = ["\t".join(TRAIN_LOG_COLUMNS)]
    for row in tlog.rows:
        vh = "-"
        if row["stage"] == "stage2" and row["epoch"] >= 0 and row["epoch"] < len(tlog.visit_orders):
            vh = content_hash(np.asarray(tlog.visit_orders[row["epoch"]], dtype="<i8").tobytes())
        lines.append("\t".join([row["stage"], str(row["epoch"]), str(row["step"]), repr(float(row["loss"])), repr(float(row["val_loss"])), vh]))
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# serving


def build_serving(model: TrainedModel, answers: VectorSet, cfg: PipelineConfig, out_dir=None):
    """Encode the corpus, build the HNSW index and the dense store.

    Without ``out_dir`` the dense store goes to a private temporary file.
    """
    codes = model.f_s.encode(answers.vectors)
    index = build_hnsw(codes, model.f_s.books, cfg.hnsw())
    dense = VectorSet(model.dense_tower(answers.vectors).astype(np.float32))
    if out_dir is None:
        fd, path = tempfile.mkstemp(suffix=".bgd")
        os.close(fd)
    else:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "dense.bgd"
        save_codes(codes, model.f_s.books.P, out / "codes.bgc")
        save_codebooks(model.f_s.books, out / "books.bgb")
        save_hnsw(index, out / "index.bgh")
    store = write_dense_store(dense, path)
    return index, store


def load_serving(index_dir, store_path=None) -> tuple[HnswIndex, DenseStore]:
    """Index and codebooks from ``index_dir``; the dense store from ``store_path`` or ``index_dir``."""
    d = Path(index_dir)
    books = load_codebooks(d / "books.bgb")
    return load_hnsw(d / "index.bgh", books), open_dense_store(store_path or d / "dense.bgd")


@dataclass(eq=False)
class ServingPipeline:
    index: HnswIndex
    store: DenseStore
    encoders: QueryEncoders
    test_queries: VectorSet
    test_positives: dict[int, frozenset[int]]

    @property
    def corpus_size(self) -> int:
        return self.index.count

    def search(self, features, N: int, K: int, ef_search: int | None = None, exhaustive: bool = False) -> SearchResult:
        return search(self.index, self.store, features, self.encoders, N, K, ef_search, exhaustive)


def end_to_end_recall(
    index: HnswIndex,
    store: DenseStore,
    encoders: QueryEncoders,
    queries: VectorSet,
    positives,
    N: int,
    K: int,
    ef_search: int,
    exhaustive: bool = False,
) -> dict[str, float]:
    """Sparse-only and post-verified Recall@K from one shared candidate list per query.

    Sparse-only takes the first ``K`` candidates by ADC score; post-verified
    re-ranks all ``N`` candidates with the dense store.
    """
    N = min(N, index.count)
    zc, zv = encoders.encode(queries.vectors)
    sparse, post = [], []
    for q in range(queries.count):
        cand = candidates(index, zc[q], N, max(N, ef_search), exhaustive)
        sparse.append(recall_at_k(cand, positives[q], K))
        post.append(recall_at_k(post_verify(zv[q], cand, store, K).ids, positives[q], K))
    return {"sparse_only": float(np.mean(sparse)), "post_verified": float(np.mean(post))}


def codes_for(model: TrainedModel, answers: VectorSet, which: str) -> tuple[np.ndarray, CodebookSet]:
    """Corpus codes for a baseline ("pq"/"opq", nearest-centroid on warm-up embeddings) or "contrastive"."""
    if which == "contrastive":
        return model.f_s.encode(answers.vectors), model.f_s.books
    books = {"pq": model.pq, "opq": model.opq}[which]
    return encode_batch(model.warm_f(answers.vectors), books, rule="l2"), books
