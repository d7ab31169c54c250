"""Vector containers, inner-product arithmetic, BGV1 I/O and synthetic data.

Similarity is the raw inner product everywhere in the package.  ``normalize``
exists for diagnostics but nothing calls it implicitly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, Writer
from .errors import ConfigError, ContractError, FormatError

BGV1_MAGIC = b"BGV1"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream path.

    Distinct ``stream`` tuples give statistically independent generators, so
    each consumer of randomness gets its own stream instead of sharing one.
    """
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def inner_product(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"inner_product: dimension mismatch {x.shape} vs {y.shape}")
    return float(np.dot(x, y))


def normalize(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


@dataclass(frozen=True, eq=False)
class VectorSet:
    """Immutable row-major block of float32 vectors; ids are row numbers."""

    vectors: np.ndarray
    dim: int = field(default=-1)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        dim = self.dim
        if v.ndim == 1 and v.size == 0:
            if dim <= 0:
                raise ContractError("empty VectorSet needs an explicit dim")
            v = v.reshape(0, dim)
        if v.ndim != 2:
            raise ContractError(f"VectorSet needs a 2-d array, got shape {v.shape}")
        if dim < 0:
            dim = v.shape[1]
        if dim <= 0 or v.shape[1] != dim:
            raise ContractError(f"VectorSet rows have dim {v.shape[1]}, declared {dim}")
        if v.size and not np.all(np.isfinite(v)):
            raise ContractError("VectorSet entries must be finite")
        v = np.ascontiguousarray(v)
        if v is self.vectors:
            v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "dim", int(dim))

    @classmethod
    def empty(cls, dim: int) -> "VectorSet":
        return cls(np.zeros((0, dim), dtype=np.float32), dim)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i):
        return self.vectors[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VectorSet):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(
            self.vectors.view(np.uint32), other.vectors.view(np.uint32)
        )


def save_vectors(vs: VectorSet, path: str | os.PathLike) -> None:
    w = Writer(BGV1_MAGIC)
    w.pack("IQ", vs.dim, vs.count)
    w.begin_checksum()
    w.array(vs.vectors, "f4")
    w.write(path)


def load_vectors(path: str | os.PathLike) -> VectorSet:
    r = Reader.open(path, BGV1_MAGIC)
    dim, count = r.unpack("IQ")
    if dim == 0:
        raise FormatError(f"{path}: dim must be positive (offset 4)")
    r.begin_checksum()
    data = r.array("f4", dim * count, finite=True)
    r.finish()
    return VectorSet(data.reshape(count, dim), dim)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-cluster corpus.

    Answers are ``center + cluster_std * N(0, I)`` in a latent space, then
    scaled by a geometric variance profile and mixed by a random orthogonal
    matrix (so coordinates are correlated).  Each query copies one answer and
    adds isotropic ``noise_sigma`` noise in the observed space.
    """

    dim: int = 64
    n_answers: int = 10_000
    n_queries: int = 1_000
    n_clusters: int = 16
    noise_sigma: float = 1.0
    cluster_std: float = 1.0
    center_scale: float = 2.0
    spectrum_decay: float = 0.1
    mix: bool = True

    def validate(self) -> None:
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if self.n_answers < 1 or self.n_queries < 1:
            raise ConfigError("n_answers and n_queries must be positive")
        if not 1 <= self.n_clusters <= self.n_answers:
            raise ConfigError(f"n_clusters must be in [1, n_answers], got {self.n_clusters}")
        for name in ("noise_sigma", "cluster_std", "center_scale"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.spectrum_decay <= 1:
            raise ConfigError("spectrum_decay must be in (0, 1]")


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    answers: VectorSet
    queries: VectorSet
    positives: dict[int, frozenset[int]]
    cluster_labels: np.ndarray
    spec: SyntheticSpec | None = None
    seed: int | None = None

    @property
    def positive_ids(self) -> np.ndarray:
        """First (and, for generated data, only) positive of each query."""
        return np.array([min(self.positives[q]) for q in range(self.queries.count)], dtype=np.int64)

    def subset_queries(self, ids) -> "SyntheticDataset":
        ids = np.asarray(ids, dtype=np.int64)
        return SyntheticDataset(
            answers=self.answers,
            queries=VectorSet(self.queries.vectors[ids], self.queries.dim),
            positives={i: self.positives[int(q)] for i, q in enumerate(ids)},
            cluster_labels=self.cluster_labels,
            spec=self.spec,
            seed=self.seed,
        )

    def split(self, n_train: int) -> tuple["SyntheticDataset", "SyntheticDataset"]:
        """First ``n_train`` queries for training, the rest held out."""
        n = self.queries.count
        if not 0 < n_train < n:
            raise ContractError(f"n_train must be in (0, {n}), got {n_train}")
        return self.subset_queries(np.arange(n_train)), self.subset_queries(np.arange(n_train, n))


def gen_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticDataset:
    spec.validate()
    d = spec.dim
    rng = make_rng(seed, 0)
    centers = rng.standard_normal((spec.n_clusters, d)) * spec.center_scale
    labels = rng.integers(0, spec.n_clusters, size=spec.n_answers)
    if spec.n_clusters <= spec.n_answers:
        labels[: spec.n_clusters] = np.arange(spec.n_clusters)
    latent = centers[labels] + rng.standard_normal((spec.n_answers, d)) * spec.cluster_std
    scale = spec.spectrum_decay ** (np.arange(d) / (d - 1) / 2)
    mixing = np.eye(d)
    if spec.mix:
        # QR of a Gaussian matrix with sign fix -> Haar-distributed rotation
        qm, rm = np.linalg.qr(rng.standard_normal((d, d)))
        mixing = qm * np.sign(np.diag(rm))
    answers = ((latent * scale) @ mixing).astype(np.float32)

    replace = spec.n_queries > spec.n_answers
    pos = rng.choice(spec.n_answers, size=spec.n_queries, replace=replace)
    noise = rng.standard_normal((spec.n_queries, d)) * spec.noise_sigma
    queries = (answers[pos].astype(np.float64) + noise).astype(np.float32)
    positives = {q: frozenset([int(a)]) for q, a in enumerate(pos)}
    return SyntheticDataset(
        answers=VectorSet(answers),
        queries=VectorSet(queries),
        positives=positives,
        cluster_labels=labels.astype(np.int64),
        spec=spec,
        seed=seed,
    )


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending; ties go to the lower index.

    Works on a 1-d array, or row-wise on a 2-d array.
    """
    s = np.asarray(scores)
    if s.ndim == 2:
        if s.shape[0] == 0:
            return np.zeros((0, min(k, s.shape[1])), dtype=np.int64)
        return np.stack([top_k(row, k) for row in s])
    n = s.shape[0]
    k = min(k, n)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if k < n:
        thr = s[np.argpartition(-s, k - 1)[:k]].min()
        cand = np.flatnonzero(s >= thr)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -s[cand]))
    return cand[order][:k].astype(np.int64)


def save_positives(positives: dict[int, frozenset[int]], path: str | os.PathLike) -> None:
    """Tab-separated ``query_id<TAB>answer_id`` lines, sorted."""
    with open(path, "w") as fh:
        for q in sorted(positives):
            for a in sorted(positives[q]):
                fh.write(f"{q}\t{a}\n")


def load_positives(path: str | os.PathLike) -> dict[int, frozenset[int]]:
    acc: dict[int, set[int]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                q, a = (int(x) for x in line.split("\t"))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected 'query_id<TAB>answer_id'") from None
            acc.setdefault(q, set()).add(a)
    return {q: frozenset(v) for q, v in acc.items()}


def check_positives(positives: dict[int, frozenset[int]], n_queries: int, n_answers: int) -> None:
    for q in range(n_queries):
        ids = positives.get(q)
        if not ids:
            raise ContractError(f"query {q} has no positive")
        bad = [a for a in ids if not 0 <= a < n_answers]
        if bad:
            raise ContractError(f"query {q}: positive id {bad[0]} out of range")

