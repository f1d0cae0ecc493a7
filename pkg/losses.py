#!/usr/bin/env python3
"""
Training objectives.

- dd_loss / inter_intra: hinge on pairwise prompt angles between and within pools
- surrogate_loss: pulls selected keys towards their queries
- sce_loss: cross entropy plus weighted reverse cross entropy
- total_loss: weighted sum of all of the above
"""

import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

import tensorcore as tc
from prompts import PromptPool, SelectionResult
from tensorcore import Tensor

logger = logging.getLogger(__name__)


@dataclass
class DDConfig:
    theta_thre: float = math.pi / 2
    epsilon: float = 1e-6

    def validate(self) -> None:
        if not 0 < self.theta_thre <= math.pi:
            raise ValueError(f"theta_thre must lie in (0, pi], got {self.theta_thre}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class LossWeights:
    alpha: float = 0.006
    beta: float = 0.3
    lambda1: float = 0.1
    lambda2: float = 1e-7
    lambda3: float = 0.1
    rce_floor: float = -4.0

    def validate(self) -> None:
        for name in ("alpha", "beta", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.rce_floor >= 0:
            raise ValueError(f"rce_floor must be negative, got {self.rce_floor}")


@dataclass
class LossParts:
    """Component losses from one forward pass; absent terms count as zero."""

    inter: Optional[Tensor] = None
    intra: Optional[Tensor] = None
    surrogate: Optional[Tensor] = None
    sce_composition: Optional[Tensor] = None
    sce_state: Optional[Tensor] = None
    sce_object: Optional[Tensor] = None

    def values(self) -> Dict[str, float]:
        return {name: (0.0 if value is None else value.item())
                for name, value in self.__dict__.items()}


def _flat_prompts(pool: Union[PromptPool, Tensor]) -> Tensor:
    prompts = pool.prompts if isinstance(pool, PromptPool) else pool
    return tc.reshape(prompts, (prompts.shape[0], -1))


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def dd_loss(pool_a: Union[PromptPool, Tensor], pool_b: Union[PromptPool, Tensor],
            cfg: DDConfig, same_pool: bool) -> Tensor:
    """Directional decoupled loss between two pools of M prompts.

    (2 / (M (M - 1))) * sum over the full n, m grid of max(0, theta_thre - theta_nm),
    where theta_nm is the angle between flattened prompts n and m. With
    ``same_pool`` the diagonal contributes nothing.
    """
    a = _flat_prompts(pool_a)
    b = _flat_prompts(pool_b)
    m = a.shape[0]
    if b.shape != a.shape:
        raise tc.ShapeError(f"pools {a.shape} and {b.shape} differ in size", op="dd_loss")
    if m < 2:
        logger.warning("dd_loss with M=%d has no prompt pairs; returning 0", m)
        return _zero(a)

    na = tc.clamp(tc.norm(a, axis=-1), cfg.epsilon)
    nb = tc.clamp(tc.norm(b, axis=-1), cfg.epsilon)
    denom = tc.expand(tc.reshape(na, (m, 1)), (m, m)) * tc.expand(tc.reshape(nb, (1, m)), (m, m))
    theta = tc.arccos(tc.matmul(a, tc.transpose(b, (1, 0))) / denom)
    hinge = tc.relu(cfg.theta_thre - theta)
    if same_pool:
        hinge = hinge * Tensor(1.0 - np.eye(m), dtype=hinge.dtype)
    return tc.tsum(hinge) * (2.0 / (m * (m - 1)))


def inter_intra(pools: Mapping[str, PromptPool], cfg: DDConfig) -> Tuple[Tensor, Tensor]:
    """Inter-pool discrepancy and intra-pool diversity over the given pools.

    With the three standard pools this is dd(s,o)+dd(s,c)+dd(o,c) and
    dd(s,s)+dd(o,o)+dd(c,c). Fewer pools contribute fewer terms.
    """
    if not pools:
        raise ValueError("inter_intra needs at least one pool")
    sizes = {pool.size for pool in pools.values()}
    if len(sizes) != 1:
        raise tc.ShapeError(f"pools differ in size: {sorted(sizes)}", op="inter_intra")
    ordered = list(pools.values())
    inter = _zero(ordered[0].prompts)
    for first, second in combinations(ordered, 2):
        inter = inter + dd_loss(first, second, cfg, same_pool=False)
    intra = _zero(ordered[0].prompts)
    for pool in ordered:
        intra = intra + dd_loss(pool, pool, cfg, same_pool=True)
    return inter, intra


def cosine_to_keys(query: Tensor, keys: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity between each query [.., D] and its keys [.., k, D]."""
    k = keys.shape[-2]
    lead = query.shape[:-1]
    q = tc.expand(tc.reshape(query, lead + (1, query.shape[-1])), keys.shape)
    dot = tc.tsum(q * keys, axis=-1)
    return dot / (tc.clamp(tc.norm(q, axis=-1), eps) * tc.clamp(tc.norm(keys, axis=-1), eps))


def surrogate_loss(queries: Mapping[str, Tensor], selections: Mapping[str, SelectionResult]) -> Tensor:
    """Sum over namespaces and selected keys of (1 - cos(query, key)).

    Batched queries are averaged over the batch.
    """
    if not selections:
        raise ValueError("surrogate_loss needs at least one selection")
    total = None
    for namespace, selection in selections.items():
        if selection.k == 0:
            raise ValueError(f"empty selection for {namespace}")
        query = queries[namespace]
        if not isinstance(query, Tensor):
            query = Tensor(query, dtype=selection.pool.keys.dtype)
        distance = tc.tsum(1.0 - cosine_to_keys(query, selection.selected_keys()), axis=-1)
        term = tc.mean(distance) if distance.ndim else distance
        total = term if total is None else total + term
    return total


def sce_loss(logits: Tensor, labels, weights: LossWeights,
             allowed: Optional[np.ndarray] = None) -> Tensor:
    """Symmetric cross entropy: CE + alpha * RCE.

    RCE substitutes ``weights.rce_floor`` (A) for log 0 on the zero entries of
    the one-hot target, so RCE = -A * (1 - p_label). Classes outside
    ``allowed`` are excluded from the softmax. Batched logits are averaged.
    """
    if logits.shape[-1] < 2:
        raise tc.ShapeError(f"need at least two classes, got {logits.shape[-1]}", op="sce_loss")
    if not np.all(np.isfinite(logits.data)):
        raise tc.NonFiniteError("non-finite logits", op="sce_loss")
    log_p = tc.label_log_prob(logits, labels, allowed)
    loss = -log_p
    if weights.alpha > 0:
        rce = (1.0 - tc.exp(log_p)) * (-weights.rce_floor)
        loss = loss + rce * weights.alpha
    return tc.mean(loss) if loss.ndim else loss


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """lambda1 L_inter + lambda2 L_intra + lambda3 L_sur + L_SCE^c + beta (L_SCE^s + L_SCE^o)."""
    terms = [
        (weights.lambda1, parts.inter),
        (weights.lambda2, parts.intra),
        (weights.lambda3, parts.surrogate),
        (1.0, parts.sce_composition),
        (weights.beta, parts.sce_state),
        (weights.beta, parts.sce_object),
    ]
    present = [(w, t) for w, t in terms if t is not None]
    if not present:
        return Tensor(0.0)
    total = _zero(present[0][1])
    for weight, term in present:
        if weight != 0:
            total = total + term * weight
    return total
