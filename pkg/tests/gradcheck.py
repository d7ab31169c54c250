"""Central finite-difference oracles shared by the unit and acceptance suites."""

import numpy as np

from bigran.losses import info_nce, st_backward
from bigran.nn import TowerEncoder
from bigran.pq import CodebookSet, encode, reconstruct

EPS = 1e-3


def fd_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` over every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), 1e-8))


def info_nce_instance(seed: int) -> float:
    rng = np.random.default_rng(seed)
    d, n = int(rng.integers(2, 9)), int(rng.integers(1, 6))
    tau = float(rng.uniform(0.5, 2.0))
    q, p, negs = rng.standard_normal(d), rng.standard_normal(d), rng.standard_normal((n, d))
    _, gq, gp, gn = info_nce(q, p, negs, tau)
    f = lambda: info_nce(q, p, negs, tau)[0]  # noqa: E731
    return max(rel_err(gq, fd_grad(f, q)), rel_err(gp, fd_grad(f, p)), rel_err(gn, fd_grad(f, negs)))


def encoder_instance(seed: int) -> float:
    rng = np.random.default_rng(seed)
    layers = int(rng.integers(1, 3))
    din, dout = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    enc = TowerEncoder.random(din, dout, layers, hidden=int(rng.integers(2, 6)), seed=seed)
    for b in enc.biases:
        b[:] = rng.standard_normal(b.shape) * 0.3
    x = rng.standard_normal((3, din))
    w = rng.standard_normal((3, dout))
    out, inputs = enc.forward_train(x)
    grads = enc.backward(inputs, w)
    f = lambda: float((enc.forward(x) * w).sum())  # noqa: E731
    return max(rel_err(g, fd_grad(f, p)) for g, p in zip(grads, enc.params()))


def straight_through_instance(seed: int) -> float:
    """InfoNCE on a quantized positive; selection held fixed while codewords move."""
    rng = np.random.default_rng(seed)
    M = int(rng.choice([1, 2, 4]))
    s, P = int(rng.integers(1, 4)), int(rng.integers(2, 9))
    d = M * s
    rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
    books = CodebookSet(rng.standard_normal((M, P, s)), rot)
    cw = books.codewords.astype(np.float64)
    rot = books.rotation.astype(np.float64)
    z = rng.standard_normal(d)
    code = encode(z, books)
    q, negs = rng.standard_normal(d), rng.standard_normal((3, d))

    def loss():
        rec = np.concatenate([cw[i, code[i]] for i in range(M)]) @ rot.T
        return info_nce(q, rec, negs)[0]

    rec = reconstruct(code, books)
    _, _, upstream, _ = info_nce(q, rec, negs)
    grad_z, grad_cw = st_backward(upstream[None], code[None], books)
    err_z = rel_err(grad_z[0], upstream)
    return max(err_z, rel_err(grad_cw, fd_grad(loss, cw)))


def run_suite(kind: str, n: int, seed0: int = 0) -> tuple[float, int]:
    """Max relative error and instance count for one gradient family."""
    fn = {"info_nce": info_nce_instance, "encoder": encoder_instance, "straight_through": straight_through_instance}[kind]
    errs = [fn(seed0 + i) for i in range(n)]
    return max(errs), len(errs)
