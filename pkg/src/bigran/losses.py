"""InfoNCE with analytic gradients, and the straight-through quantizer backward."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericalError
from .pq import CodebookSet


def info_nce(query_emb, pos_emb, neg_embs, tau: float = 1.0):
    """Single-instance InfoNCE over one positive and a list of negatives.

    Returns ``(loss, grad_q, grad_pos, grad_negs)`` where ``grad_negs`` has the
    shape of the stacked negatives.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    p = np.asarray(pos_emb, dtype=np.float64)
    negs = np.asarray(neg_embs, dtype=np.float64)
    if negs.size == 0:
        raise ContractError("info_nce: need at least one negative")
    negs = negs.reshape(-1, q.shape[-1]) if negs.ndim == 1 else negs
    if q.ndim != 1 or p.shape != q.shape or negs.shape[1] != q.shape[0]:
        raise ContractError(f"info_nce: dimension mismatch q{q.shape} pos{p.shape} negs{negs.shape}")
    if tau <= 0:
        raise ContractError("info_nce: tau must be positive")
    cands = np.vstack([p[None], negs])
    logits = cands @ q / tau
    bad = np.flatnonzero(~np.isfinite(logits))
    if bad.size:
        which = "positive" if bad[0] == 0 else f"negative {bad[0] - 1}"
        raise NumericalError(f"info_nce: non-finite logit for (query, {which})")
    shifted = logits - logits.max()
    lse = np.log(np.exp(shifted).sum())
    loss = float(lse - shifted[0])
    prob = np.exp(shifted - lse)
    d = prob.copy()
    d[0] -= 1.0
    grad_q = d @ cands / tau
    grad_c = np.outer(d, q) / tau
    return loss, grad_q, grad_c[0], grad_c[1:]


def info_nce_batch(q_emb: np.ndarray, cand_emb: np.ndarray, pos_col: np.ndarray, mask: np.ndarray | None = None, tau: float = 1.0):
    """Mean InfoNCE over a batch sharing one candidate matrix.

    Args:
        q_emb: ``(B, D)`` query embeddings.
        cand_emb: ``(K, D)`` candidate answer embeddings.
        pos_col: ``(B,)`` column of each query's positive in ``cand_emb``.
        mask: ``(B, K)`` bool, False for columns excluded from a query's
            softmax (false negatives).  The positive column must be True.

    Returns:
        ``(loss, grad_q, grad_cand)``.
    """
    B = q_emb.shape[0]
    logits = (q_emb @ cand_emb.T) / tau
    if not np.all(np.isfinite(logits)):
        b, k = np.argwhere(~np.isfinite(logits))[0]
        raise NumericalError(f"info_nce_batch: non-finite logit for query {b}, candidate {k}")
    rows = np.arange(B)
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    mx = logits.max(1, keepdims=True)
    e = np.exp(logits - mx)
    z = e.sum(1, keepdims=True)
    lse = np.log(z)[:, 0] + mx[:, 0]
    loss = float(np.mean(lse - logits[rows, pos_col]))
    d = e / z
    d[rows, pos_col] -= 1.0
    d /= B * tau
    return loss, d @ cand_emb, d.T @ q_emb


def grad_through_quantizer(upstream, z, code, books: CodebookSet):
    """Straight-through backward for one encoded vector.

    ``upstream`` is dL/d(reconstruction) in input space.  The selection is
    treated as the identity for ``z``; the selected codewords receive the
    (rotated) upstream segment and every other codeword gets zero.
    """
    u = np.asarray(upstream, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    code = np.asarray(code)
    if u.shape != (books.dim,) or z.shape != (books.dim,) or code.shape != (books.M,):
        raise ContractError("grad_through_quantizer: shape mismatch")
    gz, gc = st_backward(u[None], code[None], books)
    return gz[0], gc


def st_backward(upstream: np.ndarray, codes: np.ndarray, books: CodebookSet):
    """Batched straight-through backward: ``(n, D)`` upstream, ``(n, M)`` codes."""
    M, P, s = books.M, books.P, books.subdim
    u_rot = books.rotate(upstream)
    grad_cw = np.zeros((M, P, s))
    codes = np.asarray(codes, dtype=np.int64)
    for i in range(M):
        seg = u_rot[:, i * s : (i + 1) * s]
        for j in range(s):
            grad_cw[i, :, j] = np.bincount(codes[:, i], weights=seg[:, j], minlength=P)
    return upstream.copy(), grad_cw
