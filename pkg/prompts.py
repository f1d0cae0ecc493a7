#!/usr/bin/env python3
"""
Prompt pools, query-key selection, object-injected queries and prompt fusion.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

import tensorcore as tc
from tensorcore import Tensor

logger = logging.getLogger(__name__)

NAMESPACES = ("composition", "state", "object")
FUSIONS = ("max", "mean", "gem")

ETA_MIN = 1.0
ETA_MAX = 10.0
ETA_INIT = 3.0


class SelectionError(ValueError):
    """Invalid prompt selection request."""


class PromptPool:
    """M trainable prompts of shape [L, D] with one trainable key each."""

    def __init__(self, namespace: str, prompts: Tensor, keys: Tensor):
        if namespace not in NAMESPACES:
            raise SelectionError(f"unknown namespace {namespace!r}")
        if prompts.ndim != 3 or keys.ndim != 2:
            raise SelectionError("prompts must be [M, L, D] and keys [M, D]")
        if prompts.shape[0] != keys.shape[0] or prompts.shape[2] != keys.shape[1]:
            raise SelectionError(
                f"prompt pool {prompts.shape} and keys {keys.shape} disagree on M or D")
        self.namespace = namespace
        self.prompts = prompts
        self.keys = keys

    @classmethod
    def create(cls, namespace: str, size: int, length: int, dim: int,
               rng: np.random.Generator, dtype=np.float32) -> "PromptPool":
        """Prompts and keys drawn uniformly from [-1, 1]."""
        prompts = Tensor(rng.uniform(-1.0, 1.0, (size, length, dim)), requires_grad=True,
                         dtype=dtype, name=f"{namespace}.prompts")
        keys = Tensor(rng.uniform(-1.0, 1.0, (size, dim)), requires_grad=True,
                      dtype=dtype, name=f"{namespace}.keys")
        return cls(namespace, prompts, keys)

    @property
    def size(self) -> int:
        return self.prompts.shape[0]

    @property
    def length(self) -> int:
        return self.prompts.shape[1]

    @property
    def dim(self) -> int:
        return self.prompts.shape[2]

    def parameters(self):
        return [self.prompts, self.keys]


@dataclass
class SelectionResult:
    """Top-k indices per query, with their cosine similarities."""

    pool: PromptPool
    indices: np.ndarray
    similarities: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[-1]

    def selected_prompts(self) -> Tensor:
        """[..., k, L, D]; gradients reach the chosen pool rows."""
        return tc.gather(self.pool.prompts, self.indices)

    def selected_keys(self) -> Tensor:
        """[..., k, D]; gradients reach the chosen keys."""
        return tc.gather(self.pool.keys, self.indices)


def select_topk(pool: PromptPool, query, k: int) -> SelectionResult:
    """Pick the k keys most cosine-similar to each query.

    Ties go to the lowest index. Selection itself is not differentiable; keys
    learn through the surrogate loss on the returned selection.

    Args:
        pool: PromptPool to select from.
        query: [D] or [B, D] (Tensor or array).
        k: number of prompts, 1 <= k <= M.
    """
    if not 1 <= k <= pool.size:
        raise SelectionError(f"k={k} outside [1, {pool.size}]")
    q = np.asarray(query.data if isinstance(query, Tensor) else query, dtype=np.float64)
    if q.shape[-1] != pool.dim:
        raise SelectionError(f"query dimension {q.shape[-1]} does not match pool dimension {pool.dim}")
    if not np.all(np.isfinite(q)):
        raise SelectionError("query contains non-finite values")
    q_norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(q_norm == 0):
        raise SelectionError("zero-norm query")
    keys = pool.keys.data.astype(np.float64)
    k_norm = np.maximum(np.linalg.norm(keys, axis=-1), 1e-12)
    sims = (q / q_norm) @ (keys / k_norm[:, None]).T
    order = np.argsort(-sims, axis=-1, kind="stable")[..., :k]
    chosen = np.take_along_axis(sims, order, axis=-1)
    return SelectionResult(pool, order, np.clip(chosen, -1.0, 1.0))


@dataclass
class InjectionWeights:
    """Single-head cross-attention projections W_Q, W_K, W_V, each [D, D]."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1 or self.w_q.ndim != 2 or self.w_q.shape[0] != self.w_q.shape[1]:
            raise SelectionError(f"injection weights must be square and equal, got {shapes}")

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, dtype=np.float32) -> "InjectionWeights":
        """Identity plus small noise, so the injected query starts as a prompt mix."""
        def one(name):
            w = np.eye(dim) + rng.normal(0.0, 0.02, (dim, dim))
            return Tensor(w, requires_grad=True, dtype=dtype, name=f"injection.{name}")
        return cls(one("w_q"), one("w_k"), one("w_v"))

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v]


class GemParam:
    """Learnable GeM exponent: eta = clamp(1 + softplus(raw), 1, 10)."""

    def __init__(self, raw: Tensor):
        self.raw = raw

    @classmethod
    def create(cls, eta: float = ETA_INIT, dtype=np.float32, name: str = "gem.raw") -> "GemParam":
        if not ETA_MIN < eta <= ETA_MAX:
            raise SelectionError(f"initial eta {eta} outside ({ETA_MIN}, {ETA_MAX}]")
        raw = np.log(np.expm1(eta - 1.0))
        return cls(Tensor(np.asarray(raw), requires_grad=True, dtype=dtype, name=name))

    def eta(self) -> Tensor:
        return tc.clamp(1.0 + tc.softplus(self.raw), ETA_MIN, ETA_MAX)

    @property
    def value(self) -> float:
        with tc.no_grad():
            return self.eta().item()

    def parameters(self):
        return [self.raw]


def inject_object(query, fused_object_prompt: Tensor, weights: InjectionWeights) -> Tensor:
    """Object-injected query: Softmax(qW_Q (P W_K)^T / sqrt(D)) P W_V.

    Args:
        query: [D] or [B, D].
        fused_object_prompt: [L, D] or [B, L, D] (batch must match the query).
        weights: InjectionWeights of dimension D.

    Returns:
        [D] (or [B, D]).
    """
    q = query if isinstance(query, Tensor) else Tensor(query, dtype=weights.w_q.dtype)
    p = fused_object_prompt
    d = weights.dim
    single = q.ndim == 1
    if q.shape[-1] != d or p.shape[-1] != d:
        raise tc.ShapeError(f"query {q.shape} / prompt {p.shape} do not match dimension {d}",
                            op="inject_object")
    if single:
        if p.ndim != 2:
            raise tc.ShapeError(f"prompt {p.shape} must be [L, D] for a single query", op="inject_object")
        q = tc.reshape(q, (1, d))
        p = tc.reshape(p, (1,) + p.shape)
    elif p.ndim != 3 or p.shape[0] != q.shape[0]:
        raise tc.ShapeError(f"prompt {p.shape} does not match query batch {q.shape}", op="inject_object")
    b = q.shape[0]
    qw = tc.reshape(tc.matmul(q, weights.w_q), (b, 1, d))
    kw = tc.matmul(p, weights.w_k)
    vw = tc.matmul(p, weights.w_v)
    scores = tc.matmul(qw, tc.transpose(kw, (0, 2, 1))) * (1.0 / np.sqrt(d))
    out = tc.matmul(tc.softmax(scores, axis=-1), vw)
    return tc.reshape(out, (d,) if single else (b, d))


def gem_fuse(selected: Tensor, eta: Union[GemParam, Tensor, float]) -> Tensor:
    """Generalized mean over the selection axis.

    ``selected`` is [k, L, D] (or [B, k, L, D]); the result drops the k axis.
    Powers are signed, so negative prompt entries keep their sign.
    """
    if selected.ndim < 3 or selected.shape[-3] == 0:
        raise SelectionError("gem_fuse needs a non-empty selection of [L, D] prompts")
    if isinstance(eta, GemParam):
        eta = eta.eta()
    eta_value = float(eta.data) if isinstance(eta, Tensor) else float(eta)
    if eta_value < 1.0:
        raise SelectionError(f"eta must be >= 1, got {eta_value}")
    inner = tc.mean(tc.signed_pow(selected, eta), axis=-3)
    inverse = tc.div(1.0, eta) if isinstance(eta, Tensor) else 1.0 / eta_value
    return tc.signed_pow(inner, inverse)


def fuse(selected: Tensor, mode: str, eta: Optional[GemParam] = None) -> Tensor:
    """Collapse k selected prompts into one with max, mean or GeM pooling."""
    if selected.ndim < 3 or selected.shape[-3] == 0:
        raise SelectionError("fusion needs a non-empty selection")
    if mode == "max":
        return tc.tmax(selected, axis=selected.ndim - 3)
    if mode == "mean":
        return tc.mean(selected, axis=-3)
    if mode == "gem":
        if eta is None:
            raise SelectionError("gem fusion needs a GemParam")
        return gem_fuse(selected, eta)
    raise SelectionError(f"unknown fusion mode {mode!r}; expected one of {FUSIONS}")
