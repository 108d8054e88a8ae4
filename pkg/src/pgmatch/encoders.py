"""Modality encoders: relational reasoning over region features, word
embedding lookup, and the GRU cell shared by the policy and fusion stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    constant,
    gather_rows,
    matmul,
    mul,
    parameter,
    relu,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
)


@dataclass
class RegionSet:
    """Per-instance image region features, one row per region."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"region features must be a T x d matrix, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("region features contain non-finite entries")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class TokenSeq:
    """Token-id sequence for one caption."""

    token_ids: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.token_ids.ndim != 1 or self.token_ids.size < 1:
            raise ValueError(f"token ids must be a nonempty vector, got shape {self.token_ids.shape}")

    @property
    def length(self) -> int:
        return self.token_ids.size


@dataclass
class GruParams:
    """Gate weights for one GRU cell (input size p, hidden size q)."""

    w_xz: Tensor
    w_hz: Tensor
    b_z: Tensor
    w_xr: Tensor
    w_hr: Tensor
    b_r: Tensor
    w_xc: Tensor
    w_hc: Tensor
    b_c: Tensor

    def __post_init__(self):
        p, q = self.w_xz.shape
        expect = {
            "w_xz": (p, q), "w_hz": (q, q), "b_z": (q,),
            "w_xr": (p, q), "w_hr": (q, q), "b_r": (q,),
            "w_xc": (p, q), "w_hc": (q, q), "b_c": (q,),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"gru params: {name} has shape {got}, expected {shape}")

    @property
    def input_size(self) -> int:
        return self.w_xz.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_xz.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator,
             scale: float = 0.1) -> "GruParams":
        def w(*shape):
            return parameter(shape, rng, scale)

        return cls(
            w_xz=w(input_size, hidden_size), w_hz=w(hidden_size, hidden_size),
            b_z=parameter(np.zeros(hidden_size)),
            w_xr=w(input_size, hidden_size), w_hr=w(hidden_size, hidden_size),
            b_r=parameter(np.zeros(hidden_size)),
            w_xc=w(input_size, hidden_size), w_hc=w(hidden_size, hidden_size),
            b_c=parameter(np.zeros(hidden_size)),
        )

    def tensors(self):
        return [self.w_xz, self.w_hz, self.b_z, self.w_xr, self.w_hr, self.b_r,
                self.w_xc, self.w_hc, self.b_c]


def gru_step(x: Tensor, h: Tensor, params: GruParams) -> Tensor:
    """One GRU update: h' = (1-z) * h + z * candidate."""
    if x.shape != (params.input_size,) or h.shape != (params.hidden_size,):
        raise ShapeError(
            f"gru_step: x {x.shape} / h {h.shape} do not match params "
            f"({params.input_size}, {params.hidden_size})")
    z = sigmoid(add(add(matmul(x, params.w_xz), matmul(h, params.w_hz)), params.b_z))
    r = sigmoid(add(add(matmul(x, params.w_xr), matmul(h, params.w_hr)), params.b_r))
    cand = tanh(add(add(matmul(x, params.w_xc), matmul(mul(r, h), params.w_hc)), params.b_c))
    one = constant(np.ones(params.hidden_size))
    return add(mul(sub(one, z), h), mul(z, cand))


def region_affinity(features: Tensor, w_embed_a: Tensor, w_embed_b: Tensor) -> Tensor:
    """Pairwise affinities between embedded region features:
    (F @ Wa) (F @ Wb)^T. Pass the same weight twice for the tied variant."""
    return matmul(matmul(features, w_embed_a), transpose(matmul(features, w_embed_b)))


def gcn_reason(features: Tensor, relation: Tensor, w_graph: Tensor) -> Tensor:
    """One residual graph-convolution layer over the fully-connected region
    graph: F + ReLU(row_softmax(relation) @ F @ W)."""
    if relation.shape != (features.shape[0], features.shape[0]):
        raise ShapeError(
            f"gcn_reason: relation {relation.shape} does not match {features.shape[0]} regions")
    propagated = matmul(matmul(softmax(relation, axis=1), features), w_graph)
    return add(features, relu(propagated))


def embed_words(ids, table: Tensor) -> Tensor:
    """Look up word embeddings, one row per token. Gradients accumulate
    into exactly the rows used."""
    ids = ids.token_ids if isinstance(ids, TokenSeq) else np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of vocabulary range [0, {table.shape[0]})")
    return gather_rows(table, ids)


def load_embedding_table(path, vocab_size: int, dim: int,
                         base: np.ndarray | None = None) -> np.ndarray:
    """Read a pretrained embedding table: one row per token, first column
    the token id, then ``dim`` space-separated decimals. Rows present in
    the file override ``base`` (zeros when not given)."""
    table = np.zeros((vocab_size, dim)) if base is None else np.array(base, dtype=np.float64)
    if table.shape != (vocab_size, dim):
        raise ValueError(f"base table shape {table.shape} != ({vocab_size}, {dim})")
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected id + {dim} values, got {len(parts)} fields")
            tok = int(parts[0])
            if not 0 <= tok < vocab_size:
                raise ValueError(f"{path}:{lineno}: token id {tok} outside [0, {vocab_size})")
            table[tok] = [float(v) for v in parts[1:]]
    return table
