"""The three training stages over two-tower encoders.

Stage 1 learns the query tower ``g`` together with the sparse answer encoder
(answer tower + codebooks, trained through the straight-through estimator)
with in-batch and auxiliary ("lexical") negatives.  Stage 2 learns ``g'`` and
the dense answer tower on locality-centric batches drawn from the bipartite
graph.  Unification fine-tunes a copy of ``g'`` against both frozen answer
encoders with a FIFO queue of extra negatives.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import SyntheticDataset, make_rng
from .errors import ConfigError, ContractError, NumericalError
from .lcs import BipartiteGraph, Strategy, TrainingTriple, epoch_batches
from .losses import info_nce_batch, st_backward
from .nn import TowerEncoder, make_optimizer
from .pq import (
    CodebookSet,
    encode_batch,
    exhaustive_adc_topk,
    project_sphere,
    reconstruct_batch,
    sphere_lift,
    train_opq,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageConfig:
    batch_size: int = 128
    learning_rate: float = 0.01
    epochs: int = 10
    steps: int | None = None  # overrides epochs when set
    temperature: float = 1.0
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.01
    codebook_lr_scale: float = 1.0
    commitment: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass(eq=False)
class SparseEncoder:
    """Answer tower followed by codeword selection; output is the reconstruction."""

    tower: TowerEncoder
    books: CodebookSet

    def __post_init__(self):
        if self.tower.out_dim != self.books.dim:
            raise ContractError(f"tower out_dim {self.tower.out_dim} != codebook dim {self.books.dim}")

    def encode(self, features, chunk: int = 8192) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features))
        parts = [encode_batch(self.tower(x[i : i + chunk]), self.books) for i in range(0, len(x), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.books.M), dtype=np.uint8)

    def embed(self, features) -> np.ndarray:
        return reconstruct_batch(self.encode(features), self.books)

    def param_hash(self) -> str:
        h = hashlib.sha256(self.tower.param_hash().encode())
        h.update(self.books.codewords.tobytes())
        if self.books.rotation is not None:
            h.update(self.books.rotation.tobytes())
        return h.hexdigest()


@dataclass
class TrainLog:
    """Per-epoch (or per-step) records for the training-log TSV."""

    rows: list[dict] = field(default_factory=list)
    visit_orders: list[list[int]] = field(default_factory=list)
    collisions: int = 0

    def add(self, **row) -> None:
        self.rows.append(row)
        log.debug("%s", row)


# --------------------------------------------------------------------------
# negatives


def lexical_negatives(data: SyntheticDataset, chunk: int = 512) -> np.ndarray:
    """Nearest non-positive answer in raw feature space (Euclidean), per query."""
    a = data.answers.vectors.astype(np.float64)
    aa = (a * a).sum(1)
    q = data.queries.vectors.astype(np.float64)
    out = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        # argmin ||q - a||^2 == argmax 2<q, a> - ||a||^2
        scores = 2.0 * (q[s : s + chunk] @ a.T) - aa
        for r in range(scores.shape[0]):
            for pid in data.positives[s + r]:
                scores[r, pid] = -np.inf
        out[s : s + chunk] = scores.argmax(1)
    return out


def ann_negatives(q_emb: np.ndarray, codes: np.ndarray, books: CodebookSet, positives, depth: int, rng, chunk: int = 256) -> np.ndarray:
    """One random non-positive answer per query from its sparse ADC top-``depth``."""
    out = np.empty(len(q_emb), dtype=np.int64)
    tops = exhaustive_adc_topk(q_emb, codes, books, depth + max(len(p) for p in positives.values()), chunk)
    for r, row in enumerate(tops):
        pos = positives[r]
        cand = [int(a) for a in row if a not in pos][:depth]
        out[r] = cand[int(rng.integers(len(cand)))]
    return out


def negative_mask(query_pos: list[frozenset[int]], cand_ids: np.ndarray, pos_col: np.ndarray) -> tuple[np.ndarray, int]:
    """Mask out candidates that are positives of the row's query (except its own column).

    Returns the mask and the number of excluded (query, candidate) pairs.
    """
    B = len(query_pos)
    mask = np.ones((B, len(cand_ids)), dtype=bool)
    for b, pos in enumerate(query_pos):
        hit = np.isin(cand_ids, list(pos))
        hit[pos_col[b]] = False
        mask[b] &= ~hit
    return mask, int((~mask).sum())


def _check_loss(loss: float, stage: str, step: int) -> None:
    if not np.isfinite(loss):
        raise NumericalError(f"{stage}: loss became {loss} at step {step}; lower the learning rate")


def _schedule(n: int, cfg: StageConfig, stream: int):
    """Yield ``(epoch, batch_index_array)`` respecting epochs/steps."""
    rng = make_rng(cfg.seed, stream)
    step = 0
    epoch = 0
    while True:
        perm = rng.permutation(n)
        for s in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            if cfg.steps is not None and step >= cfg.steps:
                return
            yield epoch, perm[s : s + cfg.batch_size]
            step += 1
        epoch += 1
        if cfg.steps is None and epoch >= cfg.epochs:
            return


# --------------------------------------------------------------------------
# dense warm-up (continuous two-tower; source of the unsupervised PQ/OPQ baselines)


def train_dense(data: SyntheticDataset, aux: np.ndarray, cfg: StageConfig, g: TowerEncoder | None = None, f: TowerEncoder | None = None, log_: TrainLog | None = None):
    """Two-tower InfoNCE without quantization, same negatives as stage 1."""
    cfg.validate()
    d = data.queries.dim
    g = (g or TowerEncoder.create(d, d)).copy()
    f = (f or TowerEncoder.create(data.answers.dim, d)).copy()
    if cfg.batch_size > data.queries.count:
        raise ContractError("batch_size exceeds the number of training queries")
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    pos_ids = data.positive_ids
    X, A = data.queries.vectors, data.answers.vectors
    step = 0
    for epoch, idx in _schedule(data.queries.count, cfg, 10):
        cand = np.concatenate([pos_ids[idx], aux[idx]])
        cols = np.arange(len(idx))
        mask, _ = negative_mask([data.positives[int(q)] for q in idx], cand, cols)
        zq, cq = g.forward_train(X[idx])
        za, ca = f.forward_train(A[cand])
        loss, dq, da = info_nce_batch(zq, za, cols, mask, cfg.temperature)
        _check_loss(loss, "dense warm-up", step)
        opt.step(g.params() + f.params(), g.backward(cq, dq) + f.backward(ca, da))
        if log_ is not None:
            log_.add(stage="warmup", epoch=epoch, step=step, loss=loss)
        step += 1
    return g.rounded(), f.rounded()


# --------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Result:
    g: TowerEncoder
    f_s: SparseEncoder
    log: TrainLog


def _stage1_batch(data, idx, pos_ids, aux, extra):
    cand = [pos_ids[idx], aux[idx]]
    if extra is not None:
        cand.append(extra[idx])
    cand = np.concatenate(cand)
    cols = np.arange(len(idx))
    mask, coll = negative_mask([data.positives[int(q)] for q in idx], cand, cols)
    return cand, cols, mask, coll


def stage1_loss(g: TowerEncoder, f_s: SparseEncoder, data: SyntheticDataset, aux: np.ndarray, idx: np.ndarray, tau: float = 1.0) -> float:
    cand, cols, mask, _ = _stage1_batch(data, idx, data.positive_ids, aux, None)
    zq = g(data.queries.vectors[idx])
    fs = reconstruct_batch(encode_batch(f_s.tower(data.answers.vectors[cand]), f_s.books), f_s.books)
    return info_nce_batch(zq, fs, cols, mask, tau)[0]


def train_stage1(
    data: SyntheticDataset,
    aux_negatives: np.ndarray,
    cfg: StageConfig,
    g: TowerEncoder | None = None,
    tower: TowerEncoder | None = None,
    books: CodebookSet | None = None,
    M: int = 8,
    P: int = 256,
    opq_alternations: int = 10,
    ann_negatives_depth: int = 0,
    sphere_scale: float | None = 10.0,
    log_: TrainLog | None = None,
) -> Stage1Result:
    """Contrastive quantization: InfoNCE through the quantizer.

    Codebooks are initialized by OPQ on the answer tower's outputs unless
    ``books`` is given; the rotation stays fixed afterwards.  Negatives for
    each query are the other in-batch positives plus every in-batch auxiliary
    negative (``2|B| - 1``), minus collisions with its own positives.  With
    ``ann_negatives_depth > 0`` a sparse-ANN-mined negative per instance is
    added, refreshed every epoch.

    With ``sphere_scale`` set, the initial codebooks are lifted onto per-
    subspace spheres (see ``sphere_lift``), the lift offset is folded into
    the answer tower's output bias, and codewords are projected back onto
    their spheres after every step.  This keeps inner-product selection
    close to nearest-centroid selection throughout training.
    """
    cfg.validate()
    tlog = log_ if log_ is not None else TrainLog()
    n = data.queries.count
    if cfg.batch_size > n:
        raise ContractError(f"batch_size {cfg.batch_size} exceeds {n} training queries")
    d = data.queries.dim
    g = (g or TowerEncoder.create(d, d)).copy()
    tower = (tower or TowerEncoder.create(data.answers.dim, d)).copy()
    aux = np.asarray(aux_negatives, dtype=np.int64)
    if aux.shape != (n,):
        raise ContractError("aux_negatives must give one answer id per training query")
    A = data.answers.vectors
    X = data.queries.vectors
    if books is None:
        books = train_opq(tower(A), M, P, opq_alternations, seed=cfg.seed)
    radii = None
    if sphere_scale:
        books, offset, radii = sphere_lift(books, tower(A), sphere_scale)
        tower.biases[-1] += offset
    cw = books.codewords.astype(np.float64)
    rot = books.rotation
    pos_ids = data.positive_ids

    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    val_idx = make_rng(cfg.seed, 11).permutation(n)[: cfg.batch_size]
    cur = lambda: SparseEncoder(tower, CodebookSet(cw, rot))  # noqa: E731
    val0 = stage1_loss(g, cur(), data, aux, val_idx, cfg.temperature)
    tlog.add(stage="stage1", epoch=-1, step=0, loss=val0, val_loss=val0)

    extra = None
    ann_rng = make_rng(cfg.seed, 12)
    step = 0
    last_epoch = -1
    losses: list[float] = []
    for epoch, idx in _schedule(n, cfg, 13):
        if epoch != last_epoch:
            if last_epoch >= 0:
                _stage1_epoch_end(tlog, g, cur(), data, aux, val_idx, cfg, last_epoch, step, losses)
                losses = []
            if ann_negatives_depth > 0:
                fs = cur()
                extra = ann_negatives(g(X), fs.encode(A), fs.books, data.positives, ann_negatives_depth, ann_rng)
            last_epoch = epoch
        cand, cols, mask, coll = _stage1_batch(data, idx, pos_ids, aux, extra)
        tlog.collisions += coll
        bk = CodebookSet(cw, rot)
        zq, cq = g.forward_train(X[idx])
        za, ca = tower.forward_train(A[cand])
        codes = encode_batch(za, bk)
        fs = reconstruct_batch(codes, bk)
        loss, dq, dfs = info_nce_batch(zq, fs, cols, mask, cfg.temperature)
        dz, dcw = st_backward(dfs, codes, bk)
        if cfg.commitment:
            # pull z towards its (fixed) reconstruction and codewords towards z
            diff = za - fs
            loss += cfg.commitment * float((diff**2).sum()) / len(idx)
            dz = dz + 2 * cfg.commitment * diff / len(idx)
            _, dcw_c = st_backward(-2 * cfg.commitment * diff / len(idx), codes, bk)
            dcw = dcw + dcw_c
        _check_loss(loss, "stage 1", step)
        losses.append(loss)
        params = g.params() + tower.params() + [cw]
        grads = g.backward(cq, dq) + tower.backward(ca, dz) + [dcw * cfg.codebook_lr_scale]
        opt.step(params, grads)
        if radii is not None:
            cw[...] = project_sphere(cw, radii)
        step += 1
    if last_epoch >= 0:
        _stage1_epoch_end(tlog, g, cur(), data, aux, val_idx, cfg, last_epoch, step, losses)
    g = g.rounded()
    f_s = SparseEncoder(tower.rounded(), CodebookSet(cw, rot))
    return Stage1Result(g, f_s, tlog)


def _stage1_epoch_end(tlog, g, f_s, data, aux, val_idx, cfg, epoch, step, losses):
    val = stage1_loss(g, f_s, data, aux, val_idx, cfg.temperature)
    _check_loss(val, "stage 1 (validation)", step)
    tlog.add(stage="stage1", epoch=epoch, step=step, loss=float(np.mean(losses)) if losses else float("nan"), val_loss=val)


# --------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Result:
    g_prime: TowerEncoder
    f_d: TowerEncoder
    log: TrainLog


def triples_batch(batch: list[TrainingTriple], positives):
    q = np.array([t.query_id for t in batch], dtype=np.int64)
    cand = np.array([t.positive_id for t in batch] + [t.negative_id for t in batch], dtype=np.int64)
    cols = np.arange(len(batch))
    mask, coll = negative_mask([positives[int(x)] for x in q], cand, cols)
    return q, cand, cols, mask, coll


def dense_loss(gq: TowerEncoder, fd: TowerEncoder, data: SyntheticDataset, batch, tau: float = 1.0) -> float:
    q, cand, cols, mask, _ = triples_batch(batch, data.positives)
    return info_nce_batch(gq(data.queries.vectors[q]), fd(data.answers.vectors[cand]), cols, mask, tau)[0]


def train_stage2(
    data: SyntheticDataset,
    graph: BipartiteGraph,
    strategy,
    cfg: StageConfig,
    g_prime: TowerEncoder,
    f_d: TowerEncoder,
    log_: TrainLog | None = None,
) -> Stage2Result:
    """Dense InfoNCE over locality-centric batches.

    Every batch's negatives for a query are the other positives plus all
    sampled (graph-local) negatives in the batch.  Only full batches are used
    for updates; a short end-of-epoch batch is logged but skipped when it has
    fewer than two instances.
    """
    cfg.validate()
    strategy = Strategy.parse(strategy)
    tlog = log_ if log_ is not None else TrainLog()
    if cfg.batch_size > data.queries.count:
        raise ContractError(f"batch_size {cfg.batch_size} exceeds {data.queries.count} training queries")
    if graph.n_queries != data.queries.count:
        raise ContractError("graph and dataset disagree on the number of queries")
    gq, fd = g_prime.copy(), f_d.copy()
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    X, A = data.queries.vectors, data.answers.vectors
    probe, _ = epoch_batches(graph, strategy, cfg.batch_size, cfg.seed + 1_000_003, 0)
    probe_batch = probe[0]
    tlog.add(stage="stage2", epoch=-1, step=0, loss=dense_loss(gq, fd, data, probe_batch, cfg.temperature),
             val_loss=dense_loss(gq, fd, data, probe_batch, cfg.temperature))
    step = 0
    epoch = 0
    done = False
    while not done:
        batches, state = epoch_batches(graph, strategy, cfg.batch_size, cfg.seed, epoch)
        tlog.visit_orders.append(list(state.visit_order))
        losses = []
        for batch in batches:
            if cfg.steps is not None and step >= cfg.steps:
                done = True
                break
            if len(batch) < 2:
                continue
            q, cand, cols, mask, coll = triples_batch(batch, data.positives)
            tlog.collisions += coll
            zq, cq = gq.forward_train(X[q])
            za, ca = fd.forward_train(A[cand])
            loss, dq, da = info_nce_batch(zq, za, cols, mask, cfg.temperature)
            _check_loss(loss, "stage 2", step)
            losses.append(loss)
            opt.step(gq.params() + fd.params(), gq.backward(cq, dq) + fd.backward(ca, da))
            step += 1
        val = dense_loss(gq, fd, data, probe_batch, cfg.temperature)
        _check_loss(val, "stage 2 (validation)", step)
        tlog.add(stage="stage2", epoch=epoch, step=step, loss=float(np.mean(losses)) if losses else float("nan"), val_loss=val)
        epoch += 1
        if cfg.steps is None and epoch >= cfg.epochs:
            done = True
        if not batches:
            done = True
    return Stage2Result(gq.rounded(), fd.rounded(), tlog)


# --------------------------------------------------------------------------
# query unification


class NegativeQueue:
    """FIFO ring buffer of (answer id, sparse embedding, dense embedding)."""

    def __init__(self, capacity: int, dim_sparse: int, dim_dense: int):
        if capacity < 1:
            raise ConfigError("queue capacity must be positive")
        self.capacity = capacity
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.sparse = np.zeros((capacity, dim_sparse))
        self.dense = np.zeros((capacity, dim_dense))
        self._head = 0
        self.size = 0

    def push(self, ids: np.ndarray, sparse: np.ndarray, dense: np.ndarray) -> None:
        for i in range(len(ids)):
            self.ids[self._head] = ids[i]
            self.sparse[self._head] = sparse[i]
            self.dense[self._head] = dense[i]
            self._head = (self._head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def contents(self):
        """Oldest-first view of the stored entries."""
        if self.size < self.capacity:
            sl = np.arange(self.size)
        else:
            sl = (np.arange(self.capacity) + self._head) % self.capacity
        return self.ids[sl], self.sparse[sl], self.dense[sl]


@dataclass
class UnifyResult:
    g_unified: TowerEncoder
    log: TrainLog


def unify_query(
    g_prime: TowerEncoder,
    f_s: SparseEncoder,
    f_d: TowerEncoder,
    data: SyntheticDataset,
    graph: BipartiteGraph,
    aux_negatives: np.ndarray,
    cfg: StageConfig,
    queue_capacity: int = 2048,
    sparse_weight: float = 1.0,
    dense_weight: float = 1.0,
    strategy="snowball",
    log_: TrainLog | None = None,
) -> UnifyResult:
    """Fine-tune ``g'' <- g'`` on the summed sparse-side and dense-side InfoNCE.

    Answer encoders are frozen, so their embeddings are computed once; the
    queue's contents are appended to both candidate sets.  The sparse side
    uses in-batch positives plus auxiliary negatives, the dense side in-batch
    positives plus the locality-centric negatives.
    """
    cfg.validate()
    if queue_capacity < cfg.batch_size:
        raise ConfigError(f"queue capacity {queue_capacity} < batch size {cfg.batch_size}")
    tlog = log_ if log_ is not None else TrainLog()
    gu = g_prime.copy()
    A, X = data.answers.vectors, data.queries.vectors
    fs_all = f_s.embed(A)
    fd_all = f_d(A)
    aux = np.asarray(aux_negatives, dtype=np.int64)
    queue = NegativeQueue(queue_capacity, fs_all.shape[1], fd_all.shape[1])
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    strategy = Strategy.parse(strategy)

    def combined(gq, batch, with_queue):
        q, dcand, cols, dmask, _ = triples_batch(batch, data.positives)
        scand = np.concatenate([dcand[: len(batch)], aux[q]])
        smask, _ = negative_mask([data.positives[int(x)] for x in q], scand, cols)
        s_vecs, d_vecs = fs_all[scand], fd_all[dcand]
        if with_queue and queue.size:
            qids, qs, qd = queue.contents()
            qmask = ~np.stack([np.isin(qids, list(data.positives[int(x)])) for x in q])
            s_vecs = np.vstack([s_vecs, qs])
            d_vecs = np.vstack([d_vecs, qd])
            smask = np.hstack([smask, qmask])
            dmask = np.hstack([dmask, qmask])
        zq, cq = gq.forward_train(X[q])
        ls, dqs, _ = info_nce_batch(zq, s_vecs, cols, smask, cfg.temperature)
        ld, dqd, _ = info_nce_batch(zq, d_vecs, cols, dmask, cfg.temperature)
        loss = sparse_weight * ls + dense_weight * ld
        return loss, cq, sparse_weight * dqs + dense_weight * dqd, q, dcand, scand

    probe, _ = epoch_batches(graph, strategy, cfg.batch_size, cfg.seed + 2_000_003, 0)
    probe_batch = probe[0]
    tlog.add(stage="unify", epoch=-1, step=0, loss=combined(gu, probe_batch, False)[0], val_loss=combined(gu, probe_batch, False)[0])

    step = 0
    epoch = 0
    budget = cfg.steps
    while budget is None or step < budget:
        if budget is None and epoch >= cfg.epochs:
            break
        batches, _ = epoch_batches(graph, strategy, cfg.batch_size, cfg.seed + 17, epoch)
        if not batches:
            break
        losses = []
        for batch in batches:
            if budget is not None and step >= budget:
                break
            if len(batch) < 2:
                continue
            loss, cq, dq, q, dcand, scand = combined(gu, batch, True)
            _check_loss(loss, "unification", step)
            losses.append(loss)
            opt.step(gu.params(), gu.backward(cq, dq))
            pos = dcand[: len(batch)]
            queue.push(pos, fs_all[pos], fd_all[pos])
            step += 1
        val = combined(gu, probe_batch, False)[0]
        tlog.add(stage="unify", epoch=epoch, step=step, loss=float(np.mean(losses)) if losses else float("nan"), val_loss=val)
        epoch += 1
    return UnifyResult(gu.rounded() if step else g_prime.copy(), tlog)
