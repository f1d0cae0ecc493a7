#!/usr/bin/env python3
"""
Incremental training and inference over a composition task sequence.

- ModelState: prompt pools, injection weights, GeM exponents, classifier heads
- forward: query -> prompt selection and fusion -> extended encoder pass -> logits
- train_task: Adam over one task's training split with composition-logit masking
- predict / evaluate: probability fusion of composition and primitive heads
- checkpoint / restore: versioned binary snapshot of a ModelState
- run_sequence: train every task in order and fill the accuracy matrices
"""

import hashlib
import json
import logging
import math
import struct
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

import tensorcore as tc
from backbone import BackboneConfigError, FrozenEncoder, truncated_normal
from data import LabelRegistry, PixelStore, SampleRecord, TaskData, TaskSequence, task_data
from losses import DDConfig, LossParts, LossWeights, inter_intra, sce_loss, surrogate_loss, total_loss
from metrics import MATRIX_KINDS, AccuracyMatrix
from prompts import (FUSIONS, NAMESPACES, GemParam, InjectionWeights, PromptPool, SelectionResult,
                     fuse, inject_object, select_topk)
from tensorcore import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CPIL"
CHECKPOINT_VERSION = 1
INJECTIONS = ("none", "object-to-state", "state-to-object")


class TrainingError(RuntimeError):
    """Training cannot proceed (bad task data, non-finite loss, broken invariant)."""


class CheckpointError(ValueError):
    """Unreadable or mismatched checkpoint."""


# ============================================================================
# Configuration
# ============================================================================

@dataclass
class MethodConfig:
    """Which parts of the model are switched on."""

    pools: Tuple[str, ...] = NAMESPACES
    injection: str = "object-to-state"
    fusion: str = "gem"
    use_rce: bool = True
    use_inter: bool = True
    use_intra: bool = True
    use_surrogate: bool = True

    def __post_init__(self):
        pools = tuple(self.pools)
        self.pools = tuple(ns for ns in NAMESPACES if ns in pools) + tuple(
            ns for ns in pools if ns not in NAMESPACES)

    def validate(self) -> None:
        unknown = [ns for ns in self.pools if ns not in NAMESPACES]
        if unknown:
            raise ValueError(f"pools: unknown pool(s) {unknown}; expected names from {NAMESPACES}")
        if "composition" not in self.pools:
            raise ValueError("pools: the composition pool is required")
        if self.injection not in INJECTIONS:
            raise ValueError(f"injection: expected one of {INJECTIONS}, got {self.injection!r}")
        if self.injection != "none" and not {"state", "object"} <= set(self.pools):
            raise ValueError(f"injection: {self.injection} needs both the state and object pools")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion: expected one of {FUSIONS}, got {self.fusion!r}")


METHODS = {
    "compiler": MethodConfig(),
    "sim-compiler": MethodConfig(injection="none", use_rce=False, use_inter=False, use_intra=False),
    "baseline": MethodConfig(pools=("composition",), injection="none", fusion="mean",
                             use_rce=False, use_inter=False, use_intra=False),
}


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    learning_rate: float = 0.03
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    pool_size: int = 20
    prompt_length: int = 5
    top_k: int = 5
    mu: float = 0.5
    seed: int = 0
    eval_batch_size: int = 64
    eval_workers: int = 1
    check_finite: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs, batch_size and eval_batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate: must be positive, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1) or self.adam_eps <= 0:
            raise ValueError("adam_beta1/adam_beta2 must lie in [0, 1) and adam_eps be positive")
        if self.pool_size < 1 or self.prompt_length < 1:
            raise ValueError("pool_size and prompt_length must be positive")
        if not 1 <= self.top_k <= self.pool_size:
            raise ValueError(f"top_k: must lie in [1, pool_size={self.pool_size}], got {self.top_k}")
        if self.mu < 0:
            raise ValueError(f"mu: must be >= 0, got {self.mu}")
        if self.eval_workers < 1:
            raise ValueError("eval_workers must be >= 1")


# Named presets: section -> field overrides. Every preset shares pool size 20,
# prompt length 5, top-5 selection, batch 16 and theta_thre = pi/2.
PRESETS: Dict[str, Dict[str, dict]] = {
    "split-clothing": {
        "data": {"top_k": 35, "n_tasks": 5, "policy": "random-partition",
                 "n_states": 9, "n_objects": 8, "count_spread": 20},
        "train": {"epochs": 25, "learning_rate": 0.03, "mu": 0.5},
        "loss": {"lambda1": 0.1, "lambda2": 1e-7, "lambda3": 0.1, "alpha": 0.006, "beta": 0.3},
    },
    "utzappos-5": {
        "data": {"top_k": 80, "n_tasks": 5, "policy": "count-sorted",
                 "n_states": 15, "n_objects": 12, "count_spread": 30},
        "train": {"epochs": 10, "learning_rate": 0.02, "mu": 0.02},
        "loss": {"lambda1": 1.0, "lambda2": 3e-6, "lambda3": 0.7, "alpha": 0.01, "beta": 0.7},
    },
    "utzappos-10": {
        "data": {"top_k": 80, "n_tasks": 10, "policy": "count-sorted",
                 "n_states": 15, "n_objects": 12, "count_spread": 30},
        "train": {"epochs": 3, "learning_rate": 0.03, "mu": 0.03},
        "loss": {"lambda1": 0.5, "lambda2": 1e-7, "lambda3": 0.1, "alpha": 0.05, "beta": 0.4},
    },
    "desk": {
        "data": {"top_k": 25, "n_tasks": 5, "policy": "count-sorted", "n_states": 6, "n_objects": 5,
                 "samples_per_composition": 40, "image_side": 32, "count_spread": 0},
        "train": {"epochs": 5, "learning_rate": 0.01, "mu": 0.5},
        "loss": {"lambda1": 0.1, "lambda2": 1e-7, "lambda3": 0.1, "alpha": 0.006, "beta": 0.3},
    },
}
for _preset in PRESETS.values():
    _preset["train"].update({"pool_size": 20, "prompt_length": 5, "top_k": 5, "batch_size": 16})
    _preset["dd"] = {"theta_thre": math.pi / 2}


def config_digest(method: MethodConfig, train: TrainConfig, weights: LossWeights, dd: DDConfig) -> str:
    payload = {"method": asdict(method), "train": asdict(train), "loss": asdict(weights), "dd": asdict(dd)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# ============================================================================
# Optimizer
# ============================================================================

class Adam:
    """Adaptive moment estimation without weight decay."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data -= update.astype(p.dtype)


# ============================================================================
# Model state
# ============================================================================

class ModelState:
    """Everything trainable plus the frozen encoder it runs on.

    The composition head spans every registered composition from the start;
    ``seen`` marks the compositions of tasks already trained.
    """

    def __init__(self, encoder: FrozenEncoder, registry: LabelRegistry, method: MethodConfig,
                 train: TrainConfig, weights: LossWeights, dd: DDConfig,
                 pools: Dict[str, PromptPool], injection: Optional[InjectionWeights],
                 gem: Dict[str, GemParam], heads: Dict[str, Tuple[Tensor, Tensor]]):
        self.encoder = encoder
        self.registry = registry
        self.method = method
        self.train = train
        self.weights = weights
        self.dd = dd
        self.pools = pools
        self.injection = injection
        self.gem = gem
        self.heads = heads
        self.tasks_trained = 0
        self.seen = np.zeros(registry.n_compositions, dtype=bool)
        self.optimizer = Adam(self.parameters(), train.learning_rate,
                              train.adam_beta1, train.adam_beta2, train.adam_eps)

    @classmethod
    def create(cls, encoder: FrozenEncoder, registry: LabelRegistry,
               method: Optional[MethodConfig] = None, train: Optional[TrainConfig] = None,
               weights: Optional[LossWeights] = None, dd: Optional[DDConfig] = None) -> "ModelState":
        method = method or MethodConfig()
        train = train or TrainConfig()
        weights = weights or LossWeights()
        dd = dd or DDConfig()
        for cfg in (method, train, weights, dd):
            cfg.validate()
        d = encoder.config.embed_dim
        needed = len(method.pools) * train.prompt_length
        if needed > encoder.config.prompt_tokens:
            raise BackboneConfigError(
                f"{len(method.pools)} pools x {train.prompt_length} tokens need {needed} prompt "
                f"positions; the backbone has {encoder.config.prompt_tokens}")
        dtype = encoder.dtype
        rng = np.random.default_rng(train.seed)
        pools = {ns: PromptPool.create(ns, train.pool_size, train.prompt_length, d, rng, dtype)
                 for ns in method.pools}
        injection = InjectionWeights.create(d, rng, dtype) if method.injection != "none" else None
        gem = ({ns: GemParam.create(dtype=dtype, name=f"gem.{ns}.raw") for ns in method.pools}
               if method.fusion == "gem" else {})
        widths = {"composition": registry.n_compositions, "state": registry.n_states,
                  "object": registry.n_objects}
        heads = {}
        for ns in method.pools:
            if widths[ns] < 2:
                logger.warning("%s head skipped: only %d class(es)", ns, widths[ns])
                continue
            heads[ns] = (
                Tensor(truncated_normal(rng, (d, widths[ns])), requires_grad=True, dtype=dtype,
                       name=f"head.{ns}.weight"),
                Tensor(np.zeros(widths[ns]), requires_grad=True, dtype=dtype, name=f"head.{ns}.bias"),
            )
        if "composition" not in heads:
            raise TrainingError("the registry needs at least two compositions")
        return cls(encoder, registry, method, train, weights, dd, pools, injection, gem, heads)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        params: "OrderedDict[str, Tensor]" = OrderedDict()
        for ns, pool in self.pools.items():
            params[f"pool.{ns}.prompts"] = pool.prompts
            params[f"pool.{ns}.keys"] = pool.keys
        if self.injection is not None:
            params["injection.w_q"] = self.injection.w_q
            params["injection.w_k"] = self.injection.w_k
            params["injection.w_v"] = self.injection.w_v
        for ns, g in self.gem.items():
            params[f"gem.{ns}.raw"] = g.raw
        for ns, (w, b) in self.heads.items():
            params[f"head.{ns}.weight"] = w
            params[f"head.{ns}.bias"] = b
        return params

    @property
    def config_digest(self) -> str:
        return config_digest(self.method, self.train, self.weights, self.dd)


# ============================================================================
# Forward pass
# ============================================================================

@dataclass
class ForwardOutput:
    """Logits per head plus the intermediate values the losses and exports need."""

    logits: Dict[str, Tensor]
    queries: Dict[str, Tensor]
    selections: Dict[str, SelectionResult]
    fused: Dict[str, Tensor]
    features: Dict[str, Tensor]
    query: Tensor

    @property
    def logits_s(self) -> Optional[Tensor]:
        return self.logits.get("state")

    @property
    def logits_o(self) -> Optional[Tensor]:
        return self.logits.get("object")

    @property
    def logits_c(self) -> Tensor:
        return self.logits["composition"]


def forward(images, state: ModelState) -> ForwardOutput:
    """Run the prompted model on one image [C, H, W] or a batch [B, C, H, W]."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    single = images.ndim == 3
    x = images[None] if single else images
    encoder, method, k = state.encoder, state.method, state.train.top_k

    q = encoder.extract_query(x)
    queries: Dict[str, Tensor] = {}
    selections: Dict[str, SelectionResult] = {}
    fused: Dict[str, Tensor] = {}

    def select(ns: str, query: Tensor) -> None:
        selection = select_topk(state.pools[ns], query, k)
        queries[ns] = query
        selections[ns] = selection
        fused[ns] = fuse(selection.selected_prompts(), method.fusion, state.gem.get(ns))

    select("composition", q)
    if method.injection == "object-to-state":
        select("object", q)
        select("state", inject_object(q, fused["object"], state.injection))
    elif method.injection == "state-to-object":
        select("state", q)
        select("object", inject_object(q, fused["state"], state.injection))
    else:
        for ns in ("state", "object"):
            if ns in state.pools:
                select(ns, q)

    order = [ns for ns in NAMESPACES if ns in fused]
    length = state.train.prompt_length
    x_e = encoder.embed(x)
    x_p = tc.concat([fused[ns] for ns in order] + [x_e], axis=1)
    out = encoder.encode_extended(x_p, n_prompt_tokens=len(order) * length)

    features, logits = {}, {}
    for i, ns in enumerate(order):
        block = tc.getitem(out, (slice(None), slice(i * length, (i + 1) * length)))
        features[ns] = tc.mean(block, axis=1)
        if ns in state.heads:
            w, b = state.heads[ns]
            logits[ns] = tc.matmul(features[ns], w) + b

    if single:
        logits = {ns: tc.reshape(v, v.shape[1:]) for ns, v in logits.items()}
        features = {ns: tc.reshape(v, v.shape[1:]) for ns, v in features.items()}
        fused = {ns: tc.reshape(v, v.shape[1:]) for ns, v in fused.items()}
        q = tc.reshape(q, q.shape[1:])
    return ForwardOutput(logits, queries, selections, fused, features, q)


def compute_loss(out: ForwardOutput, data_labels: Mapping[str, np.ndarray],
                 state: ModelState, allowed: Optional[np.ndarray]) -> Tuple[Tensor, LossParts]:
    """Total objective for one batch; disabled terms stay out of the sum."""
    method = state.method
    weights = state.weights if method.use_rce else replace(state.weights, alpha=0.0)
    parts = LossParts()
    parts.sce_composition = sce_loss(out.logits["composition"], data_labels["composition"], weights, allowed)
    if "state" in out.logits:
        parts.sce_state = sce_loss(out.logits["state"], data_labels["state"], weights)
    if "object" in out.logits:
        parts.sce_object = sce_loss(out.logits["object"], data_labels["object"], weights)
    if method.use_surrogate:
        parts.surrogate = surrogate_loss(out.queries, out.selections)
    if method.use_inter or method.use_intra:
        inter, intra = inter_intra(state.pools, state.dd)
        parts.inter = inter if method.use_inter else None
        parts.intra = intra if method.use_intra else None
    return total_loss(parts, weights), parts


# ============================================================================
# Training
# ============================================================================

@dataclass
class EpochRecord:
    task: int
    epoch: int
    loss: float
    parts: Dict[str, float]
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _check_task(state: ModelState, data: TaskData) -> np.ndarray:
    if len(data) == 0:
        raise TrainingError(f"task {data.task_index + 1} has no training samples")
    allowed = np.zeros(state.registry.n_compositions, dtype=bool)
    allowed[list(data.compositions)] = True
    if np.any(allowed & state.seen):
        repeated = [state.registry.composition_name(c) for c in np.flatnonzero(allowed & state.seen)]
        raise TrainingError(f"task {data.task_index + 1} repeats trained compositions: {', '.join(repeated)}")
    outside = ~allowed[data.composition_labels]
    if np.any(outside):
        raise TrainingError(
            f"task {data.task_index + 1} data holds {int(outside.sum())} sample(s) from other tasks")
    return allowed


def train_task(state: ModelState, data: TaskData, progress: bool = False,
               on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> List[EpochRecord]:
    """Optimize the total loss over one task's training split.

    Only ``data`` is read, so earlier tasks are never replayed. The optimizer
    moments are reset at the start of every task. Composition classes outside
    the task are masked out of the softmax.

    Returns:
        One EpochRecord per epoch.
    """
    allowed = _check_task(state, data)
    cfg = state.train
    params = state.parameters()
    state.optimizer.reset()
    n = len(data)
    labels = {"composition": data.composition_labels, "state": data.state_labels,
              "object": data.object_labels}
    records = []
    n_batches = math.ceil(n / cfg.batch_size)

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = np.random.default_rng([cfg.seed, data.task_index, epoch]).permutation(n)
        total, sums = 0.0, {}
        bar = tqdm(range(n_batches), desc=f"task {data.task_index + 1} epoch {epoch + 1}",
                   disable=not progress, leave=False)
        for b in bar:
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            tape = tc.Tape(check_finite=cfg.check_finite)
            try:
                with tape:
                    out = forward(data.images[idx], state)
                    loss, parts = compute_loss(out, {ns: v[idx] for ns, v in labels.items()}, state, allowed)
            except tc.NonFiniteError as exc:
                raise TrainingError(f"task {data.task_index + 1}, epoch {epoch + 1}, batch {b + 1}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"task {data.task_index + 1}, epoch {epoch + 1}, batch {b + 1}: non-finite loss "
                    f"{value} (parts {parts.values()})")
            grads = tape.backward(loss)
            state.optimizer.step({name: grads[p] for name, p in params.items() if p in grads})
            for p in params.values():
                p.grad = None
            total += value * len(idx)
            for name, v in parts.values().items():
                sums[name] = sums.get(name, 0.0) + v * len(idx)
            bar.set_postfix(loss=f"{value:.4f}")
        record = EpochRecord(data.task_index + 1, epoch + 1, total / n,
                             {name: v / n for name, v in sums.items()}, time.perf_counter() - started)
        logger.info("task %d epoch %d: loss %.5f (%.1fs)", record.task, record.epoch, record.loss, record.seconds)
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)

    state.seen |= allowed
    state.tasks_trained += 1
    if not state.encoder.verify_frozen():
        raise TrainingError("backbone parameters changed during training")
    return records


# ============================================================================
# Inference
# ============================================================================

def _softmax(z: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    z = z.astype(np.float64)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def fuse_probabilities(p_c: np.ndarray, p_s: Optional[np.ndarray], p_o: Optional[np.ndarray],
                       comp_state: np.ndarray, comp_object: np.ndarray, mu: float,
                       seen: Optional[np.ndarray] = None) -> np.ndarray:
    """p(c|x) + mu * (p(s_c|x) + p(o_c|x)); unseen compositions score -inf.

    Missing primitive heads contribute nothing.
    """
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    scores = np.array(p_c, dtype=np.float64)
    if p_s is not None:
        scores = scores + mu * np.take(p_s, comp_state, axis=-1)
    if p_o is not None:
        scores = scores + mu * np.take(p_o, comp_object, axis=-1)
    if seen is not None:
        scores = np.where(seen, scores, -np.inf)
    return scores


@dataclass
class Prediction:
    scores: np.ndarray
    compositions: np.ndarray
    states: np.ndarray
    objects: np.ndarray


def predict(images, state: ModelState, mu: Optional[float] = None) -> Prediction:
    """Composition scores and argmax predictions over the compositions seen so far."""
    mu = state.train.mu if mu is None else mu
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    if state.tasks_trained == 0:
        raise TrainingError("predict needs at least one trained task")
    with tc.no_grad():
        out = forward(images, state)
    p_c = _softmax(out.logits_c.data, state.seen)
    p_s = _softmax(out.logits_s.data) if out.logits_s is not None else None
    p_o = _softmax(out.logits_o.data) if out.logits_o is not None else None
    scores = fuse_probabilities(p_c, p_s, p_o, state.registry.comp_state, state.registry.comp_object,
                                mu, state.seen)
    comps = np.argmax(scores, axis=-1)
    return Prediction(scores, comps, state.registry.comp_state[comps], state.registry.comp_object[comps])


@dataclass
class EvalCounts:
    total: int = 0
    composition: int = 0
    state: int = 0
    object: int = 0

    def __add__(self, other: "EvalCounts") -> "EvalCounts":
        return EvalCounts(self.total + other.total, self.composition + other.composition,
                          self.state + other.state, self.object + other.object)

    def accuracy(self, kind: str) -> float:
        if self.total == 0:
            raise TrainingError("accuracy of an empty evaluation")
        return getattr(self, kind) / self.total


def evaluate(state: ModelState, data: TaskData, mu: Optional[float] = None,
             workers: Optional[int] = None) -> EvalCounts:
    """Count correct compositions, states and objects over ``data``.

    State and object correctness read the primitives of the predicted
    composition. Batches may be scored on several threads; counts are summed.
    """
    if len(data) == 0:
        return EvalCounts()
    size = state.train.eval_batch_size
    workers = state.train.eval_workers if workers is None else workers
    starts = range(0, len(data), size)

    def score(start: int) -> EvalCounts:
        sl = slice(start, start + size)
        pred = predict(data.images[sl], state, mu)
        return EvalCounts(
            total=len(pred.compositions),
            composition=int(np.sum(pred.compositions == data.composition_labels[sl])),
            state=int(np.sum(pred.states == data.state_labels[sl])),
            object=int(np.sum(pred.objects == data.object_labels[sl])),
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(score, starts))
    else:
        parts = [score(s) for s in starts]
    total = EvalCounts()
    for part in parts:
        total = total + part
    return total


# ============================================================================
# Checkpoints
# ============================================================================

def checkpoint(state: ModelState, path: Union[str, Path]) -> None:
    """Write magic, (version, header length), JSON header, then raw parameter arrays."""
    params = state.parameters()
    arrays = OrderedDict((name, p.data) for name, p in params.items())
    for name in params:
        arrays[f"adam.m.{name}"] = state.optimizer.m[name]
        arrays[f"adam.v.{name}"] = state.optimizer.v[name]
    header = {
        "version": CHECKPOINT_VERSION,
        "registry": state.registry.to_dict(),
        "registry_digest": state.registry.digest(),
        "config_digest": state.config_digest,
        "backbone_checksum": state.encoder.checksum(),
        "method": asdict(state.method),
        "train": asdict(state.train),
        "loss": asdict(state.weights),
        "dd": asdict(state.dd),
        "tasks_trained": state.tasks_trained,
        "seen": [int(c) for c in np.flatnonzero(state.seen)],
        "adam_t": state.optimizer.t,
        "arrays": [{"name": name, "dtype": a.dtype.newbyteorder("<").str, "shape": list(a.shape)}
                   for name, a in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for name, a in arrays.items():
            f.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    logger.debug("checkpoint written to %s", path)


def read_checkpoint_header(path: Union[str, Path]) -> Tuple[dict, bytes, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    if 12 + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len].decode())
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return header, raw, 12 + header_len


def restore(path: Union[str, Path], encoder: FrozenEncoder,
            registry: Optional[LabelRegistry] = None) -> ModelState:
    """Rebuild a ModelState from ``checkpoint`` output.

    Raises:
        CheckpointError: bad format, truncation, or a registry / backbone that
            differs from the one the checkpoint was trained with.
    """
    header, raw, offset = read_checkpoint_header(path)
    if registry is not None and registry.digest() != header["registry_digest"]:
        raise CheckpointError("checkpoint was trained on a different label registry")
    if encoder.checksum() != header["backbone_checksum"]:
        raise CheckpointError("checkpoint was trained with different backbone weights")
    try:
        registry = registry or LabelRegistry.from_dict(header["registry"])
        state = ModelState.create(encoder, registry, MethodConfig(**header["method"]),
                                  TrainConfig(**header["train"]), LossWeights(**header["loss"]),
                                  DDConfig(**header["dd"]))
    except (TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: incompatible header ({exc})") from None

    params = state.parameters()
    loaded = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + count * dtype.itemsize
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated inside {entry['name']}")
        loaded[entry["name"]] = np.frombuffer(raw[offset:end], dtype=dtype).reshape(entry["shape"])
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after the last array")
    for name, p in params.items():
        if name not in loaded or loaded[name].shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name} is missing or has the wrong shape")
        if f"adam.m.{name}" not in loaded or f"adam.v.{name}" not in loaded:
            raise CheckpointError(f"{path}: optimizer moments for {name} are missing")
        p.data[...] = loaded[name]
        state.optimizer.m[name] = loaded[f"adam.m.{name}"].astype(p.dtype)
        state.optimizer.v[name] = loaded[f"adam.v.{name}"].astype(p.dtype)
    state.optimizer.t = int(header["adam_t"])
    state.tasks_trained = int(header["tasks_trained"])
    state.seen[header["seen"]] = True
    return state


# ============================================================================
# Whole sequence
# ============================================================================

@dataclass
class SequenceResult:
    matrices: Dict[str, AccuracyMatrix]
    epochs: List[EpochRecord] = field(default_factory=list)
    state: Optional[ModelState] = None


def run_sequence(state: ModelState, sequence: TaskSequence, records: Mapping[str, SampleRecord],
                 store: PixelStore, progress: bool = False,
                 checkpoint_dir: Optional[Union[str, Path]] = None,
                 on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> SequenceResult:
    """Train tasks in order; after each, evaluate every task seen so far.

    Tasks already trained by ``state`` are skipped, so a restored state resumes
    where its checkpoint stopped (rows for skipped tasks stay undefined).
    """
    n = sequence.n_tasks
    matrices = {kind: AccuracyMatrix(n) for kind in MATRIX_KINDS}
    result = SequenceResult(matrices, state=state)
    checksum = state.encoder.checksum()
    tests = [task_data(t, "test", state.registry, records, store) for t in sequence.tasks]
    for task in sequence.tasks[state.tasks_trained:]:
        train = task_data(task, "train", state.registry, records, store)
        result.epochs.extend(train_task(state, train, progress=progress, on_epoch=on_epoch))
        if state.encoder.checksum() != checksum:
            raise TrainingError(f"backbone checksum changed after task {task.index + 1}")
        for i in range(task.index + 1):
            counts = evaluate(state, tests[i])
            if counts.total == 0:
                logger.warning("task %d has an empty test split", i + 1)
                continue
            for kind in MATRIX_KINDS:
                matrices[kind].set(task.index, i, counts.accuracy(kind))
        logger.info("after task %d: composition accuracies %s", task.index + 1,
                    np.round(matrices["composition"].row(task.index), 4).tolist())
        if checkpoint_dir is not None:
            checkpoint(state, Path(checkpoint_dir) / f"task{task.index + 1}.ckpt")
    return result


def records_by_id(records: Sequence[SampleRecord]) -> Dict[str, SampleRecord]:
    return {r.sample_id: r for r in records}
