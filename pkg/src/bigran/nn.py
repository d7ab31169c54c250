"""Small two-tower encoders, optimizers and the BGE1 checkpoint format.

The towers stand in for the transformer backbones: one or two affine maps
with ``tanh`` in between, operating on rows of numeric features.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, Writer
from .core import make_rng
from .errors import ConfigError, ContractError, FormatError, NumericalError

BGE1_MAGIC = b"BGE1"


@dataclass(eq=False)
class TowerEncoder:
    """``y = W_L(... tanh(W_1 x + b_1) ...) + b_L``; weights are ``(out, in)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if not 1 <= len(self.weights) <= 2 or len(self.weights) != len(self.biases):
            raise ContractError("TowerEncoder needs 1 or 2 layers with matching biases")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractError(f"layer {i}: input dim {w.shape[1]} != previous output")

    @classmethod
    def identity(cls, dim: int) -> "TowerEncoder":
        return cls([np.eye(dim)], [np.zeros(dim)])

    @classmethod
    def random(cls, in_dim: int, out_dim: int, layers: int = 2, hidden: int | None = None, seed: int = 0):
        """Glorot-uniform weights, zero biases."""
        rng = make_rng(seed, 7)
        dims = [in_dim] + ([hidden or out_dim] if layers == 2 else []) + [out_dim]
        ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (a + b))
            ws.append(rng.uniform(-lim, lim, size=(b, a)))
            bs.append(np.zeros(b))
        return cls(ws, bs)

    @classmethod
    def create(cls, in_dim: int, out_dim: int, layers: int = 1, hidden: int | None = None, seed: int = 0):
        """Default initialization: identity for a square single layer."""
        if layers == 1 and in_dim == out_dim:
            return cls.identity(in_dim)
        if layers not in (1, 2):
            raise ConfigError(f"layers must be 1 or 2, got {layers}")
        return cls.random(in_dim, out_dim, layers, hidden, seed)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "TowerEncoder":
        return TowerEncoder([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def rounded(self) -> "TowerEncoder":
        """Copy with parameters rounded to float32 (what a checkpoint stores)."""
        with np.errstate(over="ignore"):
            out = TowerEncoder(
                [w.astype(np.float32).astype(np.float64) for w in self.weights],
                [b.astype(np.float32).astype(np.float64) for b in self.biases],
            )
        if not all(np.all(np.isfinite(p)) for p in out.params()):
            raise NumericalError("encoder parameters overflow float32; lower the learning rate")
        return out

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"encoder expects {self.in_dim} features, got {x.shape[-1]}")
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < self.n_layers - 1:
                h = np.tanh(h)
        return h

    def forward_train(self, x) -> tuple[np.ndarray, list[np.ndarray]]:
        """Batch forward keeping the per-layer inputs for ``backward``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ContractError(f"encoder expects {self.in_dim} features, got {x.shape[1]}")
        inputs = []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w.T + b
            if i < self.n_layers - 1:
                h = np.tanh(h)
        return h, inputs

    def backward(self, inputs: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients (ordered like ``params()``) given dL/d(output)."""
        grads: list[np.ndarray] = [None] * (2 * self.n_layers)  # type: ignore[list-item]
        g = grad_out
        for i in reversed(range(self.n_layers)):
            grads[2 * i] = g.T @ inputs[i]
            grads[2 * i + 1] = g.sum(0)
            if i > 0:
                # inputs[i] = tanh(pre-activation)
                g = (g @ self.weights[i]) * (1.0 - inputs[i] ** 2)
        return grads

    def equal(self, other: "TowerEncoder") -> bool:
        a, b = self.params(), other.params()
        return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


# --------------------------------------------------------------------------
# optimizers


@dataclass
class SGD:
    """SGD with heavy-ball momentum."""

    lr: float
    momentum: float = 0.9
    _buf: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for i, (p, g) in enumerate(zip(params, grads)):
            if self.momentum:
                v = self._buf.get(i)
                v = g.copy() if v is None else self.momentum * v + g
                self._buf[i] = v
                g = v
            p -= self.lr * g


@dataclass
class AdamW:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    _m: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _t: int = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self._t += 1
        c1 = 1.0 - self.beta1**self._t
        c2 = 1.0 - self.beta2**self._t
        for i, (p, g) in enumerate(zip(params, grads)):
            m = self._m.get(i, np.zeros_like(p))
            v = self._v.get(i, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[i], self._v[i] = m, v
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float, momentum: float = 0.9, weight_decay: float = 0.01):
    if name == "sgd":
        return SGD(lr, momentum)
    if name == "adamw":
        return AdamW(lr, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {name!r} (expected sgd or adamw)")


# --------------------------------------------------------------------------
# checkpoints


def encoder_to_writer(enc: TowerEncoder) -> Writer:
    w = Writer(BGE1_MAGIC)
    w.pack("I", enc.n_layers)
    for wt in enc.weights:
        w.pack("II", wt.shape[1], wt.shape[0])
    for p in enc.params():
        w.array(p, "f4")
    return w


def save_encoder(enc: TowerEncoder, path: str | os.PathLike) -> None:
    encoder_to_writer(enc).write(path)


def load_encoder(path: str | os.PathLike) -> TowerEncoder:
    r = Reader.open(path, BGE1_MAGIC)
    n = r.unpack("I")
    if not 1 <= n <= 2:
        raise FormatError(f"{path}: layer count {n} at offset 4 not in [1, 2]")
    dims = [r.unpack("II") for _ in range(n)]
    ws, bs = [], []
    for din, dout in dims:
        ws.append(r.array("f4", din * dout, finite=True).reshape(dout, din))
        bs.append(r.array("f4", dout, finite=True))
    r.finish()
    try:
        return TowerEncoder(ws, bs)
    except ContractError as exc:
        raise FormatError(f"{path}: {exc}") from None
