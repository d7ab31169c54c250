"""Flat ``key = value`` pipeline configuration.

Precedence is defaults < config file < command-line overrides.  Unknown keys
are rejected and every value is validated before any work starts.  The
resolved config (all defaults applied) is written next to every output.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .core import SyntheticSpec
from .errors import ConfigError
from .hnsw import HnswParams
from .training import StageConfig


@dataclass(frozen=True)
class PipelineConfig:
    # synthetic data
    dim: int = 64
    n_answers: int = 50_000
    n_queries: int = 6_000
    n_train: int = 0  # 0: all but a sixth of the queries
    n_clusters: int = 16
    noise_sigma: float = 1.0
    cluster_std: float = 1.0
    center_scale: float = 2.0
    spectrum_decay: float = 0.1
    data_seed: int = 1
    # shared training knobs
    seed: int = 0
    temperature: float = 1.0
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.01
    # dense warm-up (also the source of the PQ/OPQ baselines)
    warmup_batch: int = 128
    warmup_lr: float = 3e-4
    warmup_epochs: int = 20
    # quantizer
    M: int = 8
    P: int = 256
    kmeans_iters: int = 25
    opq_alternations: int = 10
    sphere_scale: float = 10.0
    # stage 1
    s1_batch: int = 128
    s1_lr: float = 3e-4
    s1_epochs: int = 10
    s1_codebook_lr_scale: float = 100.0
    s1_commitment: float = 0.0
    s1_ann_depth: int = 0
    # bipartite graph and stage 2
    graph_N: int = 200
    strategy: str = "snowball"
    s2_batch: int = 128
    s2_lr: float = 3e-4
    s2_epochs: int = 10
    s2_steps: int = -1
    # query unification
    unify: bool = False
    s3_batch: int = 128
    s3_lr: float = 3e-4
    s3_epochs: int = 5
    s3_steps: int = -1
    queue_capacity: int = 2048
    sparse_weight: float = 1.0
    dense_weight: float = 1.0
    # index and serving
    hnsw_max_degree: int = 32
    ef_construction: int = 200
    m_L: float = 1.0 / math.log(32)
    hnsw_seed: int = 0
    N: int = 1000
    K: int = 10
    ef_search: int = 1000
    mode: str = "unified"
    # evaluation
    eval_Ns: str = "100,200,500,1000"
    eval_K: int = 10
    bits_Ms: str = "8,16,32,64,128"
    bits_K: int = 100

    # ------------------------------------------------------------------

    def validate(self) -> "PipelineConfig":
        self.synthetic_spec().validate()
        if not 0 < self.train_count(self.n_queries) < self.n_queries:
            raise ConfigError(f"n_train must be in (0, n_queries={self.n_queries})")
        if self.dim % self.M:
            raise ConfigError(f"dim {self.dim} is not divisible by M={self.M}")
        if not 2 <= self.P <= 65536:
            raise ConfigError("P must be in [2, 65536]")
        if self.graph_N < 1:
            raise ConfigError("graph_N must be >= 1")
        if self.strategy not in ("snowball", "randomwalk"):
            raise ConfigError(f"strategy must be snowball or randomwalk, got {self.strategy!r}")
        if self.mode not in ("unified", "dual"):
            raise ConfigError(f"mode must be unified or dual, got {self.mode!r}")
        if self.K > self.N:
            raise ConfigError(f"K={self.K} must not exceed N={self.N}")
        if self.ef_search < self.N:
            raise ConfigError(f"ef_search={self.ef_search} must be >= N={self.N}")
        if self.queue_capacity < self.s3_batch:
            raise ConfigError(f"queue_capacity {self.queue_capacity} < s3_batch {self.s3_batch}")
        if self.sphere_scale < 0 or self.s1_ann_depth < 0:
            raise ConfigError("sphere_scale and s1_ann_depth must be >= 0")
        for st in (self.warmup(), self.stage1(), self.stage2(), self.stage3()):
            st.validate()
        self.hnsw().validate()
        self.int_list("eval_Ns")
        self.int_list("bits_Ms")
        return self

    def train_count(self, n_queries: int) -> int:
        """Number of leading queries used for training; the rest are held out."""
        return self.n_train if self.n_train > 0 else n_queries - max(1, n_queries // 6)

    def int_list(self, key: str) -> list[int]:
        raw = getattr(self, key)
        try:
            vals = [int(x) for x in str(raw).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated list of integers, got {raw!r}") from None
        if not vals or min(vals) < 1:
            raise ConfigError(f"{key} must list positive integers")
        return vals

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            dim=self.dim,
            n_answers=self.n_answers,
            n_queries=self.n_queries,
            n_clusters=self.n_clusters,
            noise_sigma=self.noise_sigma,
            cluster_std=self.cluster_std,
            center_scale=self.center_scale,
            spectrum_decay=self.spectrum_decay,
        )

    def _stage(self, batch, lr, epochs, steps=-1, **kw) -> StageConfig:
        return StageConfig(
            batch_size=batch,
            learning_rate=lr,
            epochs=epochs,
            steps=None if steps < 0 else steps,
            temperature=self.temperature,
            optimizer=self.optimizer,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
            **kw,
        )

    def warmup(self) -> StageConfig:
        return self._stage(self.warmup_batch, self.warmup_lr, self.warmup_epochs)

    def stage1(self) -> StageConfig:
        return self._stage(
            self.s1_batch, self.s1_lr, self.s1_epochs,
            codebook_lr_scale=self.s1_codebook_lr_scale, commitment=self.s1_commitment,
        )

    def stage2(self) -> StageConfig:
        return self._stage(self.s2_batch, self.s2_lr, self.s2_epochs, self.s2_steps)

    def stage3(self) -> StageConfig:
        return self._stage(self.s3_batch, self.s3_lr, self.s3_epochs, self.s3_steps)

    def hnsw(self) -> HnswParams:
        return HnswParams(self.hnsw_max_degree, self.ef_construction, self.m_L, self.hnsw_seed)

    # ------------------------------------------------------------------

    def with_overrides(self, items: dict[str, str]) -> "PipelineConfig":
        return replace(self, **{k: _convert(k, v) for k, v in items.items()})

    def dump(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def write(self, out_dir: str | os.PathLike, name: str = "config.resolved") -> Path:
        p = Path(out_dir) / name
        p.write_text(self.dump())
        return p


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key: str, value):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _TYPES[key]
    if not isinstance(value, str):
        return value
    v = value.strip()
    try:
        if typ == "bool":
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ == "int":
            return int(v)
        if typ == "float":
            return float(v)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {typ}") from None
    return v


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in _TYPES:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {k!r}")
        out[k] = v
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    """Resolve defaults < file < overrides, then validate."""
    cfg = PipelineConfig()
    if path is not None:
        text = Path(path).read_text()
        cfg = cfg.with_overrides(parse_config_text(text, str(path)))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg.validate()
