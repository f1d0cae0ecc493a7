#!/usr/bin/env python3
"""
Composition-IL data protocol.

- LabelRegistry: state/object vocabularies and the composition table
- build_splits: rank compositions by image count, keep the top ones, divide into tasks
- validate_protocol: disjoint compositions, primitive recurrence counts
- synthesize: seeded shape (object) x colour/texture (state) image generator
- metadata CSV, raw RGB pixel store and task-sequence export
"""

import csv
import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

POLICIES = ("random-partition", "count-sorted")
METADATA_COLUMNS = ("sample_id", "state", "object", "pixel_path")
MIN_IMAGE_SIDE = 16
TEST_FRACTION = 0.2


class MetadataError(ValueError):
    """Malformed metadata, manifest or task-sequence file."""


class SplitError(ValueError):
    """Composition split cannot be built as requested."""


# ============================================================================
# Labels and protocol types
# ============================================================================

@dataclass(frozen=True)
class SampleRecord:
    """One image: its primitives plus either a pixel path or a synthetic recipe."""

    sample_id: str
    state: str
    object: str
    pixel_path: Optional[str] = None
    shape_id: Optional[int] = None
    color_id: Optional[int] = None
    noise_seed: Optional[int] = None

    @property
    def composition(self) -> Tuple[str, str]:
        return self.state, self.object


class LabelRegistry:
    """Global state and object vocabularies plus the composition table."""

    def __init__(self, states: Sequence[str], objects: Sequence[str],
                 compositions: Sequence[Tuple[int, int]]):
        self.states = list(states)
        self.objects = list(objects)
        self.compositions = [(int(s), int(o)) for s, o in compositions]
        if len(set(self.states)) != len(self.states) or len(set(self.objects)) != len(self.objects):
            raise SplitError("state and object names must be unique")
        if len(set(self.compositions)) != len(self.compositions):
            raise SplitError("composition pairs must be unique")
        for s, o in self.compositions:
            if not (0 <= s < len(self.states) and 0 <= o < len(self.objects)):
                raise SplitError(f"composition ({s}, {o}) references an unknown primitive")
        self.comp_state = np.array([s for s, _ in self.compositions], dtype=np.int64)
        self.comp_object = np.array([o for _, o in self.compositions], dtype=np.int64)
        self._index = {(self.states[s], self.objects[o]): i for i, (s, o) in enumerate(self.compositions)}

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_compositions(self) -> int:
        return len(self.compositions)

    def composition_name(self, index: int) -> str:
        s, o = self.compositions[index]
        return f"{self.states[s]} {self.objects[o]}"

    def contains(self, state: str, obj: str) -> bool:
        return (state, obj) in self._index

    def index_of(self, state: str, obj: str) -> int:
        try:
            return self._index[(state, obj)]
        except KeyError:
            raise SplitError(f"unknown composition <{state}, {obj}>") from None

    def labels_of(self, record: SampleRecord) -> Tuple[int, int, int]:
        """(composition, state, object) indices for a record."""
        c = self.index_of(record.state, record.object)
        return c, int(self.comp_state[c]), int(self.comp_object[c])

    def to_dict(self) -> dict:
        return {"states": self.states, "objects": self.objects,
                "compositions": [list(pair) for pair in self.compositions]}

    @classmethod
    def from_dict(cls, payload: dict) -> "LabelRegistry":
        return cls(payload["states"], payload["objects"], [tuple(p) for p in payload["compositions"]])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Task:
    index: int
    compositions: Tuple[int, ...]
    train_ids: Tuple[str, ...] = ()
    test_ids: Tuple[str, ...] = ()


@dataclass
class TaskSequence:
    tasks: List[Task] = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def image_counts(self) -> List[Tuple[int, int]]:
        """(train, test) image counts per task."""
        return [(len(t.train_ids), len(t.test_ids)) for t in self.tasks]


@dataclass
class ProtocolReport:
    valid: bool
    violations: List[str]
    state_recurrence: Dict[str, int]
    object_recurrence: Dict[str, int]

    @property
    def recurring_primitives(self) -> List[str]:
        return ([name for name, n in self.state_recurrence.items() if n > 1]
                + [name for name, n in self.object_recurrence.items() if n > 1])


# ============================================================================
# Metadata files
# ============================================================================

def read_metadata(path: Union[str, Path]) -> List[SampleRecord]:
    """Read ``sample_id,state,object[,pixel_path]`` rows; the header row is required."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise MetadataError(f"{path}: empty metadata file")
        missing = [c for c in METADATA_COLUMNS[:3] if c not in reader.fieldnames]
        if missing:
            raise MetadataError(f"{path}: header lacks column(s) {', '.join(missing)}")
        records = []
        seen = set()
        for line, row in enumerate(reader, start=2):
            sample_id = (row.get("sample_id") or "").strip()
            state = (row.get("state") or "").strip()
            obj = (row.get("object") or "").strip()
            if not sample_id or not state or not obj:
                raise MetadataError(f"{path}:{line}: incomplete record")
            if sample_id in seen:
                raise MetadataError(f"{path}:{line}: duplicate sample id {sample_id}")
            seen.add(sample_id)
            pixel_path = (row.get("pixel_path") or "").strip() or None
            records.append(SampleRecord(sample_id, state, obj, pixel_path))
    return records


def write_metadata(records: Iterable[SampleRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METADATA_COLUMNS)
        for r in records:
            writer.writerow([r.sample_id, r.state, r.object, r.pixel_path or ""])


# ============================================================================
# Split builder and protocol validator
# ============================================================================

def rank_compositions(records: Sequence[SampleRecord]) -> List[Tuple[Tuple[str, str], int]]:
    """Compositions by descending image count, ties broken by name."""
    counts = Counter(r.composition for r in records)
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))


def _chunk_sizes(total: int, n_tasks: int) -> List[int]:
    base, extra = divmod(total, n_tasks)
    return [base + (1 if i < extra else 0) for i in range(n_tasks)]


def build_splits(records: Sequence[SampleRecord], top_k: int, n_tasks: int,
                 policy: str = "count-sorted", seed: int = 0,
                 test_fraction: float = TEST_FRACTION) -> Tuple[LabelRegistry, TaskSequence]:
    """Build the label registry and task sequence from sample metadata.

    Args:
        records: sample metadata.
        top_k: number of most frequent compositions to keep.
        n_tasks: number of tasks; when it does not divide top_k the earliest
            tasks take one extra composition.
        policy: "random-partition" shuffles the kept compositions with the
            seed before dividing; "count-sorted" divides the ranked list
            contiguously.
        seed: experiment seed (partition and train/test split).
        test_fraction: per-composition share of held-out images.

    Returns:
        (LabelRegistry, TaskSequence)
    """
    if policy not in POLICIES:
        raise SplitError(f"unknown split policy {policy!r}; expected one of {POLICIES}")
    if top_k < 1 or n_tasks < 1:
        raise SplitError("top_k and n_tasks must be positive")
    ranked = rank_compositions(records)
    if len(ranked) < top_k:
        raise SplitError(f"metadata has {len(ranked)} compositions, fewer than top_k={top_k}")
    if n_tasks > top_k:
        raise SplitError(f"{n_tasks} tasks would leave a task without compositions (top_k={top_k})")
    if top_k % n_tasks:
        logger.warning("top_k=%d is not divisible by n_tasks=%d; earliest tasks take one extra",
                       top_k, n_tasks)

    kept = [pair for pair, _ in ranked[:top_k]]
    states = sorted({s for s, _ in kept})
    objects = sorted({o for _, o in kept})
    s_index = {name: i for i, name in enumerate(states)}
    o_index = {name: i for i, name in enumerate(objects)}
    registry = LabelRegistry(states, objects, [(s_index[s], o_index[o]) for s, o in kept])

    order = list(range(top_k))
    if policy == "random-partition":
        order = [int(i) for i in np.random.default_rng(seed).permutation(top_k)]

    by_composition: Dict[int, List[str]] = defaultdict(list)
    for r in records:
        if registry.contains(*r.composition):
            by_composition[registry.index_of(*r.composition)].append(r.sample_id)

    train_of, test_of = {}, {}
    for c in range(top_k):
        ids = sorted(by_composition[c])
        if not ids:
            raise SplitError(f"composition {registry.composition_name(c)} has no images")
        perm = np.random.default_rng([seed, c]).permutation(len(ids))
        n_test = int(round(test_fraction * len(ids))) if len(ids) > 1 else 0
        n_test = min(max(n_test, 1 if len(ids) > 1 and test_fraction > 0 else 0), len(ids) - 1)
        test_of[c] = tuple(ids[i] for i in sorted(perm[:n_test]))
        train_of[c] = tuple(ids[i] for i in sorted(perm[n_test:]))

    tasks, start = [], 0
    for t, size in enumerate(_chunk_sizes(top_k, n_tasks)):
        comps = tuple(order[start:start + size])
        start += size
        tasks.append(Task(
            index=t,
            compositions=comps,
            train_ids=tuple(i for c in comps for i in train_of[c]),
            test_ids=tuple(i for c in comps for i in test_of[c]),
        ))
    sequence = TaskSequence(tasks)
    for t, (n_train, n_test) in enumerate(sequence.image_counts()):
        logger.debug("task %d: %d compositions, %d train / %d test images",
                     t + 1, len(tasks[t].compositions), n_train, n_test)
    return registry, sequence


def validate_protocol(sequence: TaskSequence, registry: LabelRegistry) -> ProtocolReport:
    """Check composition disjointness and count primitive recurrence across tasks."""
    violations = []
    owner: Dict[int, int] = {}
    for task in sequence.tasks:
        for c in task.compositions:
            if not 0 <= c < registry.n_compositions:
                violations.append(f"task {task.index + 1}: composition index {c} is not registered")
                continue
            if c in owner and owner[c] != task.index:
                violations.append(
                    f"composition '{registry.composition_name(c)}' appears in "
                    f"task {owner[c] + 1} and task {task.index + 1}")
            elif c in owner:
                violations.append(
                    f"composition '{registry.composition_name(c)}' repeated within task {task.index + 1}")
            else:
                owner[c] = task.index
    uncovered = set(range(registry.n_compositions)) - set(owner)
    for c in sorted(uncovered):
        violations.append(f"composition '{registry.composition_name(c)}' belongs to no task")

    state_tasks: Dict[str, set] = defaultdict(set)
    object_tasks: Dict[str, set] = defaultdict(set)
    for c, t in owner.items():
        state_tasks[registry.states[registry.comp_state[c]]].add(t)
        object_tasks[registry.objects[registry.comp_object[c]]].add(t)
    return ProtocolReport(
        valid=not violations,
        violations=violations,
        state_recurrence={name: len(state_tasks[name]) for name in registry.states},
        object_recurrence={name: len(object_tasks[name]) for name in registry.objects},
    )


def write_task_sequence(sequence: TaskSequence, registry: LabelRegistry, path: Union[str, Path]) -> None:
    """Export tasks as JSON: composition names plus train/test sample ids."""
    payload = {
        "registry": registry.to_dict(),
        "tasks": [{
            "task": t.index + 1,
            "compositions": [registry.composition_name(c) for c in t.compositions],
            "composition_indices": list(t.compositions),
            "train_ids": list(t.train_ids),
            "test_ids": list(t.test_ids),
        } for t in sequence.tasks],
    }
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def read_task_sequence(path: Union[str, Path]) -> Tuple[LabelRegistry, TaskSequence]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        registry = LabelRegistry.from_dict(payload["registry"])
        tasks = [Task(int(t["task"]) - 1, tuple(t["composition_indices"]),
                      tuple(t["train_ids"]), tuple(t["test_ids"])) for t in payload["tasks"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise MetadataError(f"{path}: not a task-sequence file ({exc})") from None
    return registry, TaskSequence(tasks)


# ============================================================================
# Synthetic compositional images
# ============================================================================

SHAPE_NAMES = ("disk", "square", "triangle", "cross", "ring", "diamond",
               "hbar", "vbar", "ellipse", "corner", "frame", "wedge")
COLOR_NAMES = ("red", "orange", "yellow", "lime", "green", "teal", "cyan", "azure",
               "blue", "indigo", "violet", "magenta", "rose", "amber", "olive", "navy")
TEXTURES = ("solid", "striped", "checked")


@dataclass
class DatasetSpec:
    n_states: int = 6
    n_objects: int = 5
    samples_per_composition: int = 40
    image_side: int = 32
    noise_level: float = 0.05
    seed: int = 0
    n_compositions: Optional[int] = None
    count_spread: int = 0

    def validate(self) -> None:
        if self.image_side < MIN_IMAGE_SIDE:
            raise SplitError(f"image_side {self.image_side} is below the {MIN_IMAGE_SIDE}px minimum")
        if not 1 <= self.n_objects <= len(SHAPE_NAMES):
            raise SplitError(f"n_objects must lie in [1, {len(SHAPE_NAMES)}]")
        if not 1 <= self.n_states <= len(COLOR_NAMES) * len(TEXTURES):
            raise SplitError(f"n_states must lie in [1, {len(COLOR_NAMES) * len(TEXTURES)}]")
        if self.samples_per_composition < 1 or self.count_spread < 0 or self.noise_level < 0:
            raise SplitError("samples_per_composition must be positive; count_spread and noise_level non-negative")
        total = self.n_states * self.n_objects
        if self.n_compositions is not None and not 1 <= self.n_compositions <= total:
            raise SplitError(f"requested {self.n_compositions} compositions but n*m = {total}")


def state_name(state_id: int, n_states: int) -> str:
    hue_slots = min(n_states, len(COLOR_NAMES))
    return f"{TEXTURES[state_id // hue_slots]}-{COLOR_NAMES[state_id % hue_slots]}"


def _state_color(state_id: int, n_states: int) -> np.ndarray:
    hue_slots = min(n_states, len(COLOR_NAMES))
    hue = (state_id % hue_slots) / hue_slots
    sector = hue * 6.0
    x = 1.0 - abs(sector % 2.0 - 1.0)
    rgb = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)][int(sector) % 6]
    return 0.15 + 0.8 * np.array(rgb, dtype=np.float64)


def _shape_mask(shape_id: int, side: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = rng.uniform(-0.12, 0.12, size=2)
    s = rng.uniform(0.55, 0.75)
    grid = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    y, x = np.meshgrid(grid - cy, grid - cx, indexing="ij")
    r = np.sqrt(x * x + y * y)
    ax, ay = np.abs(x), np.abs(y)
    name = SHAPE_NAMES[shape_id]
    if name == "disk":
        return r < s
    if name == "square":
        return np.maximum(ax, ay) < 0.85 * s
    if name == "triangle":
        return (y >= -s) & (y <= s) & (ax <= (y + s) * 0.5)
    if name == "cross":
        return ((ax < 0.3 * s) & (ay < s)) | ((ay < 0.3 * s) & (ax < s))
    if name == "ring":
        return (r > 0.55 * s) & (r < s)
    if name == "diamond":
        return ax + ay < s
    if name == "hbar":
        return (ay < 0.35 * s) & (ax < s)
    if name == "vbar":
        return (ax < 0.35 * s) & (ay < s)
    if name == "ellipse":
        return (x / s) ** 2 + (y / (0.5 * s)) ** 2 < 1.0
    if name == "corner":
        return (np.maximum(ax, ay) < 0.85 * s) & ((x < -0.2 * s) | (y > 0.2 * s))
    if name == "frame":
        return (np.maximum(ax, ay) < 0.85 * s) & (np.maximum(ax, ay) > 0.5 * s)
    return (r < s) & (y < 0.1 * s)


def render_sample(spec: DatasetSpec, state_id: int, object_id: int, variant: int) -> Tuple[np.ndarray, np.ndarray]:
    """Render one image as uint8 [H, W, 3] together with its boolean shape mask.

    The mask depends only on (seed, object, variant); the fill depends on the
    state; background and noise depend on the full sample identity.
    """
    side = spec.image_side
    mask = _shape_mask(object_id, side, np.random.default_rng([spec.seed, 1, object_id, variant]))
    rng = np.random.default_rng([spec.seed, 2, state_id, object_id, variant])
    fill = np.broadcast_to(_state_color(state_id, spec.n_states), (side, side, 3)).copy()
    hue_slots = min(spec.n_states, len(COLOR_NAMES))
    texture = TEXTURES[state_id // hue_slots]
    rows, cols = np.indices((side, side))
    if texture == "striped":
        fill[(rows // 2) % 2 == 1] *= 0.45
    elif texture == "checked":
        fill[((rows // 3) + (cols // 3)) % 2 == 1] *= 0.45
    image = np.full((side, side, 3), rng.uniform(0.05, 0.3), dtype=np.float64)
    image[mask] = fill[mask]
    image += rng.normal(0.0, spec.noise_level, size=image.shape)
    return (np.clip(image, 0.0, 1.0) * 255).round().astype(np.uint8), mask


class PixelStore:
    """Raw 8-bit RGB images keyed by sample id."""

    def __init__(self, images: Optional[Dict[str, np.ndarray]] = None):
        self.images: Dict[str, np.ndarray] = dict(images or {})

    def __len__(self):
        return len(self.images)

    def __contains__(self, sample_id):
        return sample_id in self.images

    def put(self, sample_id: str, pixels: np.ndarray) -> None:
        if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
            raise MetadataError(f"{sample_id}: pixels must be uint8 [H, W, 3]")
        self.images[sample_id] = pixels

    def image(self, sample_id: str) -> np.ndarray:
        """Float image [3, H, W] scaled to [0, 1]."""
        try:
            pixels = self.images[sample_id]
        except KeyError:
            raise MetadataError(f"no pixels stored for sample {sample_id}") from None
        return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0

    def save(self, directory: Union[str, Path]) -> Path:
        """Write one ``<id>.rgb`` file per image and a ``manifest.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "manifest.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["sample_id", "file", "width", "height"])
            for sample_id in sorted(self.images):
                pixels = self.images[sample_id]
                name = f"{sample_id}.rgb"
                (directory / name).write_bytes(np.ascontiguousarray(pixels).tobytes())
                writer.writerow([sample_id, name, pixels.shape[1], pixels.shape[0]])
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "PixelStore":
        directory = Path(directory)
        manifest = directory / "manifest.csv"
        if not manifest.exists():
            raise MetadataError(f"{directory}: missing manifest.csv")
        store = cls()
        with open(manifest, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                width, height = int(row["width"]), int(row["height"])
                raw = (directory / row["file"]).read_bytes()
                if len(raw) != width * height * 3:
                    raise MetadataError(f"{row['file']}: expected {width * height * 3} bytes, got {len(raw)}")
                store.put(row["sample_id"], np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy())
        return store


def synthesize(spec: DatasetSpec) -> Tuple[List[SampleRecord], PixelStore]:
    """Render a synthetic compositional dataset.

    Objects are shapes, states are fill colour and texture. With
    ``n_compositions`` set, a seeded subset of the n x m pairs is used; with
    ``count_spread`` > 0 each composition gets up to that many extra images.
    """
    spec.validate()
    pairs = [(s, o) for s in range(spec.n_states) for o in range(spec.n_objects)]
    rng = np.random.default_rng([spec.seed, 0])
    if spec.n_compositions is not None and spec.n_compositions < len(pairs):
        chosen = sorted(rng.choice(len(pairs), size=spec.n_compositions, replace=False))
        pairs = [pairs[i] for i in chosen]
    extra = rng.integers(0, spec.count_spread + 1, size=len(pairs)) if spec.count_spread else np.zeros(len(pairs), int)

    records, store = [], PixelStore()
    for (s, o), bonus in zip(pairs, extra):
        s_name, o_name = state_name(s, spec.n_states), SHAPE_NAMES[o]
        for j in range(spec.samples_per_composition + int(bonus)):
            sample_id = f"{s_name}_{o_name}_{j:04d}"
            pixels, _ = render_sample(spec, s, o, j)
            store.put(sample_id, pixels)
            records.append(SampleRecord(sample_id, s_name, o_name, f"{sample_id}.rgb",
                                        shape_id=o, color_id=s, noise_seed=j))
    logger.info("Synthesized %d images over %d compositions", len(records), len(pairs))
    return records, store


# ============================================================================
# Task arrays for training and evaluation
# ============================================================================

@dataclass
class TaskData:
    """Images and labels of one task's split, ready for the trainer."""

    task_index: int
    compositions: Tuple[int, ...]
    sample_ids: List[str]
    images: np.ndarray
    composition_labels: np.ndarray
    state_labels: np.ndarray
    object_labels: np.ndarray

    def __len__(self):
        return len(self.sample_ids)


def task_data(task: Task, split: str, registry: LabelRegistry,
              records: Dict[str, SampleRecord], store: PixelStore) -> TaskData:
    """Gather one split ("train" or "test") of ``task`` into arrays."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    ids = list(task.train_ids if split == "train" else task.test_ids)
    labels = np.array([registry.labels_of(records[i]) for i in ids], dtype=np.int64).reshape(-1, 3)
    images = np.stack([store.image(i) for i in ids]) if ids else np.zeros((0, 3, 0, 0))
    return TaskData(task.index, task.compositions, ids, images,
                    labels[:, 0], labels[:, 1], labels[:, 2])
