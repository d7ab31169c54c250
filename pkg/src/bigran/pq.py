"""Product quantization: codebooks, PQ/OPQ training, encoding and ADC.

Codeword selection follows the inner-product argmax rule (lowest index wins
ties).  The unsupervised trainers below still cluster with Euclidean k-means,
and ``encode(..., rule="l2")`` gives classic nearest-centroid PQ codes for the
unsupervised baselines.

Rotation convention: vectors are rows, the rotated vector is ``x @ R`` and a
reconstruction is mapped back with ``@ R.T``.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .binio import Reader, Writer, content_hash
from .core import VectorSet, make_rng, top_k
from .errors import ConfigError, ContractError, FormatError

BGB1_MAGIC = b"BGB1"
BGC1_MAGIC = b"BGC1"


def code_dtype(P: int) -> np.dtype:
    return np.dtype(np.uint8) if P <= 256 else np.dtype(np.uint16)


@dataclass(frozen=True, eq=False)
class CodebookSet:
    """``M`` codebooks of ``P`` codewords each, plus an optional rotation."""

    codewords: np.ndarray  # (M, P, subdim)
    rotation: np.ndarray | None = None  # (D, D), orthogonal

    def __post_init__(self):
        cw = np.array(self.codewords, dtype=np.float32)
        if cw.ndim != 3 or 0 in cw.shape:
            raise ContractError(f"codewords must be (M, P, subdim), got {cw.shape}")
        if cw.shape[1] > 65536:
            raise ContractError("P must be <= 65536")
        if not np.all(np.isfinite(cw)):
            raise ContractError("codewords must be finite")
        cw.setflags(write=False)
        object.__setattr__(self, "codewords", cw)
        if self.rotation is not None:
            r = np.array(self.rotation, dtype=np.float32)
            d = cw.shape[0] * cw.shape[2]
            if r.shape != (d, d):
                raise ContractError(f"rotation must be {d}x{d}, got {r.shape}")
            r64 = r.astype(np.float64)
            if np.max(np.abs(r64.T @ r64 - np.eye(d))) > 1e-4:
                raise ContractError("rotation is not orthogonal within 1e-4")
            r.setflags(write=False)
            object.__setattr__(self, "rotation", r)

    @property
    def M(self) -> int:
        return self.codewords.shape[0]

    @property
    def P(self) -> int:
        return self.codewords.shape[1]

    @property
    def subdim(self) -> int:
        return self.codewords.shape[2]

    @property
    def dim(self) -> int:
        return self.M * self.subdim

    def rotate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ContractError(f"expected dimension {self.dim}, got {x.shape[-1]}")
        return x if self.rotation is None else x @ self.rotation.astype(np.float64)

    def unrotate(self, x: np.ndarray) -> np.ndarray:
        return x if self.rotation is None else x @ self.rotation.astype(np.float64).T

    def with_codewords(self, codewords: np.ndarray) -> "CodebookSet":
        return CodebookSet(codewords, self.rotation)

    def nbytes(self) -> int:
        return self.codewords.nbytes + (0 if self.rotation is None else self.rotation.nbytes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CodebookSet):
            return NotImplemented
        if (self.rotation is None) != (other.rotation is None):
            return False
        same_rot = self.rotation is None or np.array_equal(self.rotation, other.rotation)
        return same_rot and np.array_equal(self.codewords, other.codewords)


# --------------------------------------------------------------------------
# k-means


def _sq_dists(x: np.ndarray, c: np.ndarray, xx: np.ndarray | None = None) -> np.ndarray:
    if xx is None:
        xx = (x * x).sum(1)
    d = (c * c).sum(1)[None, :] - 2.0 * (x @ c.T)
    d += xx[:, None]
    return np.maximum(d, 0.0, out=d)


def _assign(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # argmin_j ||x - c_j||^2 == argmax_j <x, c_j> - ||c_j||^2 / 2
    m = x @ c.T
    m -= 0.5 * (c * c).sum(1)
    return m.argmax(1)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx[0]][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a centre: duplicates allowed
            idx.append(int(rng.integers(n)))
            continue
        i = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
        i = min(i, n - 1)
        idx.append(i)
        np.minimum(closest, _sq_dists(x, x[i][None])[:, 0], out=closest)
    return x[idx].copy()


def kmeans(
    x: np.ndarray,
    k: int,
    iters: int = 25,
    rng: np.random.Generator | None = None,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Lloyd's k-means with k-means++ seeding.

    Returns the centroids and the SSE trace; ``trace[t]`` is the SSE of the
    assignment made at the start of iteration ``t`` (the last entry is the
    SSE of the returned centroids).  Empty clusters are re-seeded to the point
    farthest from its centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ContractError("kmeans: empty input")
    if k > x.shape[0]:
        warnings.warn(f"kmeans: k={k} exceeds {x.shape[0]} points; centroids will be duplicated", stacklevel=2)
    rng = rng if rng is not None else make_rng(0)
    c = _kmeanspp(x, k, rng) if init is None else np.array(init, dtype=np.float64)
    trace = []
    for _ in range(iters):
        assign = _assign(x, c)
        trace.append(float(((x - c[assign]) ** 2).sum()))
        counts = np.bincount(assign, minlength=k)
        sums = np.stack([np.bincount(assign, weights=x[:, j], minlength=k) for j in range(x.shape[1])], axis=1)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            resid = ((x - c[assign]) ** 2).sum(1)
            for j, p in zip(empty, np.argsort(-resid, kind="stable")):
                if resid[p] <= 0:
                    break
                c[j] = x[p]
    assign = _assign(x, c)
    trace.append(float(((x - c[assign]) ** 2).sum()))
    return c, trace


def subspace_slice(vectors, subspace: int, M: int) -> np.ndarray:
    x = vectors.vectors if isinstance(vectors, VectorSet) else np.asarray(vectors)
    d = x.shape[1]
    if d % M:
        raise ConfigError(f"dimension {d} is not divisible by M={M}")
    if not 0 <= subspace < M:
        raise ContractError(f"subspace {subspace} out of range [0, {M})")
    s = d // M
    return np.asarray(x[:, subspace * s : (subspace + 1) * s], dtype=np.float64)


def kmeans_subspace(vectors, subspace: int, M: int, P: int, iters: int = 25, seed: int = 0) -> np.ndarray:
    """k-means codewords (``P x subdim``) for one subspace slice."""
    x = subspace_slice(vectors, subspace, M)
    c, _ = kmeans(x, P, iters, make_rng(seed, 1, subspace))
    return c


def train_pq(vectors, M: int, P: int = 256, iters: int = 25, seed: int = 0) -> CodebookSet:
    x = vectors.vectors if isinstance(vectors, VectorSet) else np.asarray(vectors)
    if len(x) == 0:
        raise ContractError("train_pq: empty input")
    if x.shape[1] % M:
        raise ConfigError(f"dimension {x.shape[1]} is not divisible by M={M}")
    books = np.stack([kmeans_subspace(x, i, M, P, iters, seed) for i in range(M)])
    return CodebookSet(books)


def reconstruction_sse(x: np.ndarray, books: CodebookSet) -> float:
    """Squared error of nearest-centroid PQ reconstruction (training objective)."""
    x = np.asarray(x, dtype=np.float64)
    codes = encode_batch(x, books, rule="l2")
    return float(((x - reconstruct_batch(codes, books)) ** 2).sum())


def train_opq(
    vectors,
    M: int,
    P: int = 256,
    alternations: int = 10,
    seed: int = 0,
    iters: int = 25,
    inner_iters: int = 4,
    trace: list[float] | None = None,
) -> CodebookSet:
    """Optimized PQ by alternating k-means and orthogonal Procrustes.

    Starts from plain PQ with the identity rotation; every alternation first
    solves for the rotation that best maps the inputs onto their current
    reconstructions, then refines codebooks with warm-started Lloyd steps.
    Neither step can increase the reconstruction SSE.  If ``trace`` is given,
    the SSE after initialization and after each alternation is appended.
    """
    x = np.asarray(vectors.vectors if isinstance(vectors, VectorSet) else vectors, dtype=np.float64)
    n, d = x.shape
    if d % M:
        raise ConfigError(f"dimension {d} is not divisible by M={M}")
    s = d // M
    pq = train_pq(x, M, P, iters, seed)
    cw = pq.codewords.astype(np.float64)
    rot = np.eye(d)
    if trace is not None:
        trace.append(_opq_sse(x, cw, rot))
    for _ in range(alternations):
        xr = x @ rot
        codes = _nearest_codes(xr, cw)
        y = _concat(codes, cw)
        u, _, vt = np.linalg.svd(x.T @ y)
        rot = u @ vt
        xr = x @ rot
        for i in range(M):
            cw[i], _ = kmeans(xr[:, i * s : (i + 1) * s], P, inner_iters, init=cw[i])
        if trace is not None:
            trace.append(_opq_sse(x, cw, rot))
    if alternations == 0:
        return CodebookSet(cw, np.eye(d))
    return CodebookSet(cw, rot)


def _nearest_codes(xr: np.ndarray, cw: np.ndarray) -> np.ndarray:
    M, P, s = cw.shape
    out = np.empty((len(xr), M), dtype=np.int64)
    for i in range(M):
        out[:, i] = _assign(xr[:, i * s : (i + 1) * s], cw[i])
    return out


def _concat(codes: np.ndarray, cw: np.ndarray) -> np.ndarray:
    M = cw.shape[0]
    return np.concatenate([cw[i][codes[:, i]] for i in range(M)], axis=1)


def _opq_sse(x, cw, rot) -> float:
    xr = x @ rot
    return float(((xr - _concat(_nearest_codes(xr, cw), cw)) ** 2).sum())


# --------------------------------------------------------------------------
# inference side


def sphere_lift(books: CodebookSet, vectors, scale: float = 10.0) -> tuple[CodebookSet, np.ndarray, np.ndarray]:
    """Make inner-product selection agree with nearest-centroid selection.

    With every codeword of a subspace on one sphere, ``argmax <z, c>`` equals
    ``argmin ||z - c||``.  Each subspace is shifted by ``scale`` standard
    deviations along its lowest-variance direction, which flattens the sphere
    near the data, and the shifted centroids are pushed radially onto it.
    The shift is a constant added to every embedding, so it moves all scores
    of a query by the same amount and leaves rankings unchanged.

    Returns:
        ``(lifted_books, offset, radii)``: ``offset`` is the input-frame
        vector to add to the embeddings, ``radii`` the ``(M,)`` sphere radii.
    """
    x = books.rotate(np.asarray(vectors, dtype=np.float64))
    cw = books.codewords.astype(np.float64)
    M, s = books.M, books.subdim
    shift = np.zeros(books.dim)
    radii = np.zeros(M)
    lifted = np.empty_like(cw)
    for i in range(M):
        seg = x[:, i * s : (i + 1) * s]
        mu = seg.mean(0)
        w, v = np.linalg.eigh(np.atleast_2d(np.cov(seg.T)))
        o = v[:, 0] * scale * np.sqrt(max(w[-1], 1e-12))
        shift[i * s : (i + 1) * s] = o
        radii[i] = np.linalg.norm(mu + o)
        lifted[i] = project_sphere(cw[i] + o, radii[i])
    return books.with_codewords(lifted), books.unrotate(shift[None])[0], radii


def project_sphere(cw: np.ndarray, radius) -> np.ndarray:
    """Rescale rows of ``cw`` (``(..., P, s)``) to norm ``radius`` (scalar or ``(M,)``)."""
    r = np.asarray(radius, dtype=np.float64)
    if r.ndim:
        r = r[:, None, None]
    n = np.linalg.norm(cw, axis=-1, keepdims=True)
    return cw * (r / np.maximum(n, 1e-300))


def _check_code(code: np.ndarray, books: CodebookSet) -> np.ndarray:
    code = np.asarray(code)
    if code.shape[-1] != books.M:
        raise ContractError(f"code length {code.shape[-1]} != M={books.M}")
    if code.size and (code.min() < 0 or code.max() >= books.P):
        raise ContractError(f"code index out of range [0, {books.P})")
    return code.astype(np.int64)


def encode_batch(z, books: CodebookSet, rule: str = "ip") -> np.ndarray:
    """Codes for the rows of ``z``.

    ``rule="ip"`` picks ``argmax_j <z_i, C_ij>``; ``rule="l2"`` picks the
    nearest codeword (classic PQ).  Ties go to the lowest index either way.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    zr = books.rotate(z)
    cw = books.codewords.astype(np.float64)
    s = books.subdim
    out = np.empty((len(zr), books.M), dtype=code_dtype(books.P))
    for i in range(books.M):
        seg = zr[:, i * s : (i + 1) * s]
        if rule == "ip":
            out[:, i] = (seg @ cw[i].T).argmax(1)
        elif rule == "l2":
            out[:, i] = _assign(seg, cw[i])
        else:
            raise ConfigError(f"unknown encode rule {rule!r}")
    return out


def encode(z, books: CodebookSet) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != books.dim:
        raise ContractError(f"encode: expected a vector of dimension {books.dim}, got shape {z.shape}")
    return encode_batch(z[None], books)[0]


def reconstruct_batch(codes, books: CodebookSet, rotated: bool = False) -> np.ndarray:
    codes = _check_code(np.atleast_2d(codes), books)
    y = _concat(codes, books.codewords.astype(np.float64))
    return y if rotated else books.unrotate(y)


def reconstruct(code, books: CodebookSet) -> np.ndarray:
    return reconstruct_batch(np.asarray(code)[None], books)[0]


def build_adc_table(query, books: CodebookSet) -> np.ndarray:
    """``table[i, j] = <query_i, C_ij>`` with the query rotated first."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != books.dim:
        raise ContractError(f"build_adc_table: expected dimension {books.dim}, got shape {q.shape}")
    return build_adc_tables(q[None], books)[0]


def build_adc_tables(queries, books: CodebookSet) -> np.ndarray:
    qr = books.rotate(np.atleast_2d(queries)).reshape(-1, books.M, books.subdim)
    return np.einsum("qms,mps->qmp", qr, books.codewords.astype(np.float64))


def adc_score(table: np.ndarray, code) -> float:
    table = np.asarray(table)
    code = np.asarray(code)
    if table.ndim != 2 or code.shape != (table.shape[0],):
        raise ContractError(f"adc_score: table {table.shape} incompatible with code {code.shape}")
    if code.min() < 0 or code.max() >= table.shape[1]:
        raise ContractError(f"adc_score: code index out of range [0, {table.shape[1]})")
    return float(table[np.arange(table.shape[0]), code.astype(np.int64)].sum())


def adc_scores(table: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """ADC scores of one table against many codes (``(n, M)`` -> ``(n,)``)."""
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros(len(codes), dtype=np.float64)
    for i in range(table.shape[0]):
        out += table[i, codes[:, i]]
    return out


def adc_scores_many(tables: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """``(nq, M, P)`` tables against ``(n, M)`` codes -> ``(nq, n)`` scores."""
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros((tables.shape[0], len(codes)), dtype=np.float64)
    for i in range(tables.shape[1]):
        out += tables[:, i, :][:, codes[:, i]]
    return out


def exhaustive_adc_topk(queries, codes: np.ndarray, books: CodebookSet, k: int, chunk: int = 512) -> np.ndarray:
    """Top-``k`` ids per query by ADC score, exhaustively.

    Scores are computed as ``<q, reconstruct(code)>`` with one matrix
    product per chunk, which equals the table lookup sum up to rounding and
    is much faster than gathering when every item is scored.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    rec = reconstruct_batch(codes, books)
    k = min(k, len(rec))
    out = np.empty((len(q), k), dtype=np.int64)
    for s in range(0, len(q), chunk):
        out[s : s + chunk] = top_k(q[s : s + chunk] @ rec.T, k)
    return out


def code_bytes(codes: np.ndarray, P: int) -> bytes:
    """Serialized payload of codes: one byte per index at P <= 256."""
    return np.ascontiguousarray(codes, dtype=code_dtype(P).newbyteorder("<")).tobytes()


# --------------------------------------------------------------------------
# file formats


def codebooks_to_writer(books: CodebookSet) -> Writer:
    w = Writer(BGB1_MAGIC)
    w.pack("IIIB", books.M, books.P, books.subdim, int(books.rotation is not None))
    w.array(books.codewords, "f4")
    if books.rotation is not None:
        w.array(books.rotation, "f4")
    return w


def codebooks_hash(books: CodebookSet) -> str:
    """Content hash of the serialized codebooks (what a BGB1 file holds)."""
    return content_hash(codebooks_to_writer(books).getvalue())


def save_codebooks(books: CodebookSet, path: str | os.PathLike) -> None:
    codebooks_to_writer(books).write(path)


def load_codebooks(path: str | os.PathLike) -> CodebookSet:
    r = Reader.open(path, BGB1_MAGIC)
    M, P, s, has_rot = r.unpack("IIIB")
    if min(M, P, s) == 0 or has_rot not in (0, 1):
        raise FormatError(f"{path}: invalid header (offset 4)")
    cw = r.array("f4", M * P * s, finite=True).reshape(M, P, s)
    rot = None
    if has_rot:
        d = M * s
        rot = r.array("f4", d * d, finite=True).reshape(d, d)
    r.finish()
    try:
        return CodebookSet(cw, rot)
    except ContractError as exc:
        raise FormatError(f"{path}: {exc}") from None


def codes_to_writer(codes: np.ndarray, P: int) -> Writer:
    codes = np.atleast_2d(codes)
    w = Writer(BGC1_MAGIC)
    w.pack("IIQ", codes.shape[1], P, codes.shape[0])
    w.raw(code_bytes(codes, P))
    return w


def save_codes(codes: np.ndarray, P: int, path: str | os.PathLike) -> None:
    codes_to_writer(codes, P).write(path)


def read_codes(r: Reader) -> tuple[np.ndarray, int]:
    M, P, count = r.unpack("IIQ")
    if M == 0 or P == 0:
        raise FormatError(f"{r.what}: invalid code header at offset {r.pos - 16}")
    codes = r.array(code_dtype(P).str, M * count).reshape(count, M)
    if codes.size and codes.max() >= P:
        raise FormatError(f"{r.what}: code index >= P={P}")
    return codes, P


def load_codes(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    r = Reader.open(path, BGC1_MAGIC)
    codes, P = read_codes(r)
    r.finish()
    return codes, P
