#!/usr/bin/env python3
"""
Command-line front door for composition-incremental experiments.

Subcommands:
    generate-data    render a synthetic dataset (metadata.csv + pixels/)
    split            build and validate the task sequence, print per-task counts
    train            run the incremental sequence for every seed
    evaluate         score a checkpoint on the test splits of its trained tasks
    ablate           sweep method switches and tabulate the results
    export-features  dump per-sample features and predictions from a checkpoint
    report           recompute summary tables from saved accuracy matrices

Configuration comes from a named preset, then a JSON file, then ``--set
section.key=value`` flags, in that order.
"""

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from backbone import BackboneConfig, FrozenEncoder
from data import (DatasetSpec, MetadataError, PixelStore, SplitError, build_splits, read_metadata,
                  synthesize, task_data, validate_protocol, write_metadata, write_task_sequence)
from losses import DDConfig, LossWeights
from metrics import MetricError, load_matrices, mean_std, save_matrices, summarize
from results_deck import ResultTable, build_results_deck
from trainer import (METHODS, PRESETS, CheckpointError, EpochRecord, MethodConfig, ModelState, TrainConfig,
                     TrainingError, evaluate, forward, predict, read_checkpoint_header, records_by_id,
                     restore, run_sequence)
import tensorcore as tc

logger = logging.getLogger(__name__)

SUMMARY_METRICS = ("avg_acc", "ftt", "state", "object", "hm")
POOL_CODES = {"C": "composition", "S": "state", "O": "object"}
ABLATION_AXES = ("pools", "injection", "fusion", "rce", "inter", "intra")
DEFAULT_OUTPUT_ROOT = "runs"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


# ============================================================================
# Configuration
# ============================================================================

@dataclass
class DataConfig:
    metadata: Optional[str] = None
    pixel_dir: Optional[str] = None
    n_states: int = 6
    n_objects: int = 5
    samples_per_composition: int = 40
    image_side: int = 32
    noise_level: float = 0.05
    n_compositions: Optional[int] = None
    count_spread: int = 0
    top_k: int = 25
    n_tasks: int = 5
    policy: str = "count-sorted"

    def dataset_spec(self, seed: int) -> DatasetSpec:
        return DatasetSpec(self.n_states, self.n_objects, self.samples_per_composition, self.image_side,
                           self.noise_level, seed, self.n_compositions, self.count_spread)

    def validate(self) -> None:
        if self.metadata is None:
            self.dataset_spec(0).validate()
        if self.top_k < 1 or self.n_tasks < 1 or self.n_tasks > self.top_k:
            raise ValueError(f"need 1 <= n_tasks <= top_k, got n_tasks={self.n_tasks}, top_k={self.top_k}")


@dataclass
class ExperimentSettings:
    method: str = "compiler"
    label: Optional[str] = None
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    output: Optional[str] = None
    jobs: int = 1
    backbone_snapshot: Optional[str] = None
    checkpoints: bool = True

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method: expected one of {sorted(METHODS)}, got {self.method!r}")
        if not self.seeds:
            raise ValueError("seeds: at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds: duplicate seeds")
        if self.jobs < 1:
            raise ValueError("jobs: must be >= 1")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    dd: DDConfig = field(default_factory=DDConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def validate(self) -> None:
        for section in SECTIONS:
            try:
                getattr(self, section).validate()
            except ValueError as exc:
                raise ConfigError(f"{section}: {exc}") from None
        if self.backbone.image_side != self.data.image_side and self.data.metadata is None:
            raise ConfigError(f"backbone.image_side: {self.backbone.image_side} differs from "
                              f"data.image_side {self.data.image_side}")
        needed = len(self.method.pools) * self.train.prompt_length
        if needed > self.backbone.prompt_tokens:
            raise ConfigError(f"backbone.prompt_tokens: {self.backbone.prompt_tokens} is below "
                              f"{len(self.method.pools)} pools x {self.train.prompt_length} tokens = {needed}")

    def to_dict(self) -> Dict[str, dict]:
        return {section: asdict(getattr(self, section)) for section in SECTIONS}

    @property
    def label(self) -> str:
        return self.experiment.label or self.experiment.method

    @property
    def output_dir(self) -> Path:
        if self.experiment.output:
            return Path(self.experiment.output)
        return Path(os.environ.get("COMPIL_OUTPUT_ROOT", DEFAULT_OUTPUT_ROOT)) / self.label


SECTIONS = {
    "data": DataConfig,
    "backbone": BackboneConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "dd": DDConfig,
    "method": MethodConfig,
    "experiment": ExperimentSettings,
}


def parse_pools(value) -> Tuple[str, ...]:
    """Accept ["composition", "state"] or the short form "C+S"."""
    if isinstance(value, str):
        try:
            return tuple(POOL_CODES[code.strip().upper()] for code in value.split("+"))
        except KeyError:
            raise ConfigError(f"method.pools: unknown pool code in {value!r} (use C, S, O)") from None
    return tuple(value)


def _merge(target: Dict[str, dict], source: Dict[str, Any], origin: str) -> None:
    for section, values in source.items():
        if section not in SECTIONS:
            raise ConfigError(f"{section}: unknown section in {origin}")
        if not isinstance(values, dict):
            raise ConfigError(f"{section}: expected an object in {origin}")
        allowed = {f.name for f in fields(SECTIONS[section])}
        for key, value in values.items():
            if key not in allowed:
                raise ConfigError(f"{section}.{key}: unknown field in {origin}")
            target.setdefault(section, {})[key] = value


def parse_override(text: str) -> Tuple[str, str, Any]:
    """``section.key=value`` with the value parsed as JSON when possible."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"--set {text!r}: expected section.key=value")
    path, raw = text.split("=", 1)
    section, key = path.split(".", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return section, key, value


def load_config(path: Optional[str] = None, preset: Optional[str] = None,
                overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Resolve preset, file and ``--set`` overrides into a validated ExperimentConfig."""
    merged: Dict[str, dict] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"--preset: unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        _merge(merged, PRESETS[preset], f"preset {preset}")
    if path is not None:
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"--config: cannot read {path} ({exc})") from None
        except ValueError as exc:
            raise ConfigError(f"--config: {path} is not valid JSON ({exc})") from None
        if not isinstance(payload, dict):
            raise ConfigError(f"--config: {path} must hold a JSON object")
        _merge(merged, payload, path)
    for text in overrides:
        section, key, value = parse_override(text)
        _merge(merged, {section: {key: value}}, f"--set {text}")
    return build_config(merged)


def build_config(sections: Dict[str, dict]) -> ExperimentConfig:
    experiment = ExperimentSettings(**sections.get("experiment", {}))
    if experiment.method not in METHODS:
        raise ConfigError(f"experiment.method: expected one of {sorted(METHODS)}, got {experiment.method!r}")
    method_fields = dict(sections.get("method", {}))
    if "pools" in method_fields:
        method_fields["pools"] = parse_pools(method_fields["pools"])
    kwargs = {"experiment": experiment, "method": replace(METHODS[experiment.method], **method_fields)}
    for section, cls in SECTIONS.items():
        if section not in kwargs:
            try:
                kwargs[section] = cls(**sections.get(section, {}))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}: {exc}") from None
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


# ============================================================================
# Experiment runner
# ============================================================================

def load_dataset(cfg: DataConfig, seed: int):
    """Records and pixels: from metadata files when configured, else synthesized."""
    if cfg.metadata is None:
        return synthesize(cfg.dataset_spec(seed))
    records = read_metadata(cfg.metadata)
    pixel_dir = cfg.pixel_dir or str(Path(cfg.metadata).parent / "pixels")
    store = PixelStore.load(pixel_dir)
    missing = [r.sample_id for r in records if r.sample_id not in store]
    if missing:
        raise MetadataError(f"{len(missing)} sample(s) have no pixels in {pixel_dir}, e.g. {missing[0]}")
    return records, store


def build_encoder(cfg: ExperimentConfig) -> FrozenEncoder:
    if cfg.experiment.backbone_snapshot:
        return FrozenEncoder.load_weights(cfg.experiment.backbone_snapshot)
    return FrozenEncoder(cfg.backbone)


def prepare_seed(cfg: ExperimentConfig, seed: int):
    records, store = load_dataset(cfg.data, seed)
    registry, sequence = build_splits(records, cfg.data.top_k, cfg.data.n_tasks, cfg.data.policy, seed)
    report = validate_protocol(sequence, registry)
    if not report.valid:
        raise SplitError("; ".join(report.violations))
    return records, store, registry, sequence


def run_seed(cfg: ExperimentConfig, seed: int, progress: bool = False) -> Dict[str, Any]:
    """Run one seed and write its matrices, log, summary and checkpoints."""
    out = cfg.output_dir
    seed_dir = out / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    records, store, registry, sequence = prepare_seed(cfg, seed)
    write_task_sequence(sequence, registry, seed_dir / "tasks.json")

    state = ModelState.create(build_encoder(cfg), registry, cfg.method,
                              replace(cfg.train, seed=seed), cfg.loss, cfg.dd)
    checkpoint_dir = None
    if cfg.experiment.checkpoints:
        checkpoint_dir = seed_dir / "checkpoints"
        checkpoint_dir.mkdir(exist_ok=True)

    with open(seed_dir / "log.jsonl", "w", encoding="utf-8") as log:
        def on_epoch(record: EpochRecord) -> None:
            log.write(record.to_json() + "\n")
            log.flush()
        result = run_sequence(state, sequence, records_by_id(records), store, progress=progress,
                              checkpoint_dir=checkpoint_dir, on_epoch=on_epoch)

    save_matrices(result.matrices, out / f"matrix_seed{seed}.csv")
    summary = summarize(result.matrices)
    summary["seed"] = seed
    (seed_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    logger.info("seed %d: Avg Acc %.2f, HM %.2f", seed, summary["avg_acc"], summary["hm"])
    return summary


@dataclass
class ExperimentResult:
    label: str
    output: Path
    summaries: Dict[int, Dict[str, Any]]
    failures: Dict[int, str]

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def aggregate_row(label: str, method: str, summaries: Sequence[Dict[str, Any]], partial: bool) -> Dict[str, Any]:
    row: Dict[str, Any] = {"label": label, "method": method, "seeds": len(summaries), "partial": partial}
    for metric in SUMMARY_METRICS:
        values = [s[metric] for s in summaries if not math.isnan(s[metric])]
        mean, std = mean_std(values) if values else (math.nan, math.nan)
        row[f"{metric}_mean"] = mean
        row[f"{metric}_std"] = std
    return row


def write_rows(rows: Sequence[Dict[str, Any]], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_experiment(cfg: ExperimentConfig, progress: bool = False) -> ExperimentResult:
    """Run every seed, then write ``aggregate.csv`` (mean and std over successful seeds)."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")

    summaries: Dict[int, Dict[str, Any]] = {}
    failures: Dict[int, str] = {}

    def job(seed: int):
        try:
            return seed, run_seed(cfg, seed, progress=progress and cfg.experiment.jobs == 1), None
        except (TrainingError, SplitError, MetadataError, MetricError, CheckpointError,
                tc.ShapeError, tc.NonFiniteError, ValueError) as exc:
            logger.error("seed %d failed: %s", seed, exc)
            return seed, None, str(exc)

    seeds = cfg.experiment.seeds
    if cfg.experiment.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.experiment.jobs) as pool:
            outcomes = list(pool.map(job, seeds))
    else:
        outcomes = [job(s) for s in tqdm(seeds, desc=cfg.label, disable=not progress or len(seeds) == 1)]
    for seed, summary, error in outcomes:
        if error is None:
            summaries[seed] = summary
        else:
            failures[seed] = error

    result = ExperimentResult(cfg.label, out, dict(sorted(summaries.items())), failures)
    if summaries:
        row = aggregate_row(cfg.label, cfg.experiment.method, list(result.summaries.values()), result.partial)
        write_rows([row], out / "aggregate.csv")
    if failures:
        (out / "FAILED.json").write_text(json.dumps(failures, indent=2), encoding="utf-8")
    return result


# ============================================================================
# Ablations
# ============================================================================

def parse_axis(text: str) -> Tuple[str, List[str]]:
    if "=" not in text:
        raise ConfigError(f"--axis {text!r}: expected name=value1,value2")
    name, values = text.split("=", 1)
    if name not in ABLATION_AXES:
        raise ConfigError(f"--axis {name}: expected one of {ABLATION_AXES}")
    return name, [v.strip() for v in values.split(",") if v.strip()]


def apply_switch(method: MethodConfig, axis: str, value: str) -> MethodConfig:
    if axis == "pools":
        return replace(method, pools=parse_pools(value))
    if axis in ("injection", "fusion"):
        return replace(method, **{axis: value})
    if value not in ("on", "off"):
        raise ConfigError(f"--axis {axis}: values must be 'on' or 'off', got {value!r}")
    return replace(method, **{f"use_{axis}": value == "on"})


def run_ablation(cfg: ExperimentConfig, axes: Sequence[Tuple[str, List[str]]],
                 progress: bool = False) -> List[Dict[str, Any]]:
    """Cartesian sweep over the given switches; one aggregate row per variant."""
    rows = []
    root = cfg.output_dir
    names = [name for name, _ in axes]
    for combo in itertools.product(*[values for _, values in axes]):
        method = cfg.method
        for axis, value in zip(names, combo):
            method = apply_switch(method, axis, value)
            if axis == "pools" and "injection" not in names and method.injection != "none" \
                    and not {"state", "object"} <= set(method.pools):
                method = replace(method, injection="none")
        try:
            method.validate()
        except ValueError as exc:
            raise ConfigError(f"method: {exc} (variant {dict(zip(names, combo))})") from None
        key = "_".join(f"{a}-{v.replace('+', '')}" for a, v in zip(names, combo))
        variant = replace(cfg, method=method,
                          experiment=replace(cfg.experiment, label=f"{cfg.label}[{key}]",
                                             output=str(root / key)))
        result = run_experiment(variant, progress=progress)
        if result.summaries:
            row = dict(zip(names, combo))
            row.update(aggregate_row(variant.label, cfg.experiment.method,
                                     list(result.summaries.values()), result.partial))
            rows.append(row)
        else:
            logger.error("variant %s produced no results", key)
    if rows:
        write_rows(rows, root / "ablation.csv")
    return rows


# ============================================================================
# Features, evaluation and reports
# ============================================================================

def _restore_for(cfg: ExperimentConfig, checkpoint_path: str):
    header, _, _ = read_checkpoint_header(checkpoint_path)
    seed = int(header["train"]["seed"])
    records, store, registry, sequence = prepare_seed(cfg, seed)
    state = restore(checkpoint_path, build_encoder(cfg), registry)
    return state, records, store, sequence


def export_features(cfg: ExperimentConfig, checkpoint_path: str, split: str, path: Path) -> int:
    """One CSV row per sample of the trained tasks' ``split``; returns the row count."""
    state, records, store, sequence = _restore_for(cfg, checkpoint_path)
    by_id = records_by_id(records)
    registry = state.registry
    d = state.encoder.config.embed_dim
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "true_state", "true_object", "true_composition", "predicted_composition"]
                        + [f"cls_{i}" for i in range(d)] + [f"pc_{i}" for i in range(d)])
        for task in sequence.tasks[:state.tasks_trained]:
            data = task_data(task, split, registry, by_id, store)
            if len(data) == 0:
                continue
            pred = predict(data.images, state)
            with tc.no_grad():
                out = forward(data.images, state)
            cls = out.query.data
            pc = out.features["composition"].data
            for j, sample_id in enumerate(data.sample_ids):
                c = int(data.composition_labels[j])
                writer.writerow([sample_id, registry.states[registry.comp_state[c]],
                                 registry.objects[registry.comp_object[c]], registry.composition_name(c),
                                 registry.composition_name(int(pred.compositions[j]))]
                                + [repr(float(v)) for v in cls[j]] + [repr(float(v)) for v in pc[j]])
                rows += 1
    return rows


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint_path: str) -> List[Dict[str, Any]]:
    state, records, store, sequence = _restore_for(cfg, checkpoint_path)
    by_id = records_by_id(records)
    results = []
    for task in sequence.tasks[:state.tasks_trained]:
        counts = evaluate(state, task_data(task, "test", state.registry, by_id, store))
        entry = {"task": task.index + 1, "samples": counts.total}
        if counts.total:
            entry.update({kind: counts.accuracy(kind) for kind in ("composition", "state", "object")})
        results.append(entry)
    return results


def load_bundle(directory: Path) -> Tuple[str, str, List[Dict[str, Any]], Dict[str, np.ndarray]]:
    """Label, method, per-seed summaries and heat tables recomputed from matrix files."""
    matrix_files = sorted(directory.glob("matrix_seed*.csv"))
    if not matrix_files:
        raise MetricError(f"{directory}: no matrix_seed*.csv files")
    label = method = directory.name
    resolved = directory / "config.resolved.json"
    if resolved.exists():
        experiment = json.loads(resolved.read_text(encoding="utf-8")).get("experiment", {})
        method = experiment.get("method", method)
        label = experiment.get("label") or method
    summaries, heatmaps = [], {}
    for path in matrix_files:
        matrices = load_matrices(path)
        summaries.append(summarize(matrices))
        for kind, m in matrices.items():
            heatmaps[f"{label} {path.stem} {kind}"] = m.values
    return label, method, summaries, heatmaps


def report(directories: Sequence[Path], output: Path, deck: Optional[Path] = None) -> List[Dict[str, Any]]:
    """Per-method mean and std of every metric, written as report.csv and report.json."""
    if not directories:
        raise MetricError("report needs at least one result directory")
    output.mkdir(parents=True, exist_ok=True)
    rows, all_heatmaps = [], {}
    for directory in directories:
        label, method, summaries, heatmaps = load_bundle(Path(directory))
        rows.append(aggregate_row(label, method, summaries, partial=(Path(directory) / "FAILED.json").exists()))
        all_heatmaps.update(heatmaps)

    table = ResultTable("Summary (mean ± std over seeds)", ["method"] + list(SUMMARY_METRICS))
    with open(output / "report.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(table.header)
        for row in rows:
            cells = [row["label"]] + [f"{row[f'{m}_mean']:.2f} ± {row[f'{m}_std']:.2f}" for m in SUMMARY_METRICS]
            writer.writerow(cells)
            table.rows.append(cells)
    (output / "report.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    if deck is not None:
        build_results_deck([table], all_heatmaps, deck)
    return rows


# ============================================================================
# Entry point
# ============================================================================

def _banner(title: str) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compil", description="Composition-incremental learning experiments")
    parser.add_argument("--log-level", default=os.environ.get("COMPIL_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--preset", help=f"named preset ({', '.join(sorted(PRESETS))})")
        p.add_argument("--method", choices=sorted(METHODS))
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--output", help="output directory (default: $COMPIL_OUTPUT_ROOT/<label>)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--quiet", action="store_true", help="disable progress bars")
        return p

    p = with_config(sub.add_parser("generate-data", help="render a synthetic dataset"))
    p.add_argument("--seed", type=int, default=0)
    with_config(sub.add_parser("split", help="build the task sequence and report it")).add_argument(
        "--seed", type=int, default=0)
    with_config(sub.add_parser("train", help="run the incremental sequence"))
    p = with_config(sub.add_parser("evaluate", help="evaluate a checkpoint"))
    p.add_argument("checkpoint")
    p = with_config(sub.add_parser("ablate", help="sweep method switches"))
    p.add_argument("--axis", action="append", required=True, metavar="NAME=V1,V2",
                   help=f"one of {', '.join(ABLATION_AXES)}")
    p = with_config(sub.add_parser("export-features", help="dump features from a checkpoint"))
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p = sub.add_parser("report", help="summarize result directories")
    p.add_argument("results", nargs="+", type=Path)
    p.add_argument("--output", type=Path, default=Path("report"))
    p.add_argument("--deck", type=Path, help="also write a .pptx results deck")
    return parser


def config_from_args(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.method:
        overrides.append(f"experiment.method={json.dumps(args.method)}")
    if args.seeds:
        overrides.append(f"experiment.seeds={json.dumps(args.seeds)}")
    if args.output:
        overrides.append(f"experiment.output={json.dumps(args.output)}")
    return load_config(args.config, args.preset, overrides)


def dispatch(args) -> int:
    if args.command == "report":
        rows = report(args.results, args.output, args.deck)
        print(f"✓ Report for {len(rows)} result set(s) written to {args.output}")
        return 0

    cfg = config_from_args(args)
    progress = not args.quiet and sys.stderr.isatty()

    if args.command == "generate-data":
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        records, store = synthesize(cfg.data.dataset_spec(args.seed))
        write_metadata(records, out / "metadata.csv")
        store.save(out / "pixels")
        print(f"✓ {len(records)} images written to {out}")
        return 0

    if args.command == "split":
        records, store = load_dataset(cfg.data, args.seed)
        registry, sequence = build_splits(records, cfg.data.top_k, cfg.data.n_tasks, cfg.data.policy, args.seed)
        protocol = validate_protocol(sequence, registry)
        _banner(f"{registry.n_compositions} compositions, {registry.n_states} states, "
                f"{registry.n_objects} objects, {sequence.n_tasks} tasks")
        for task, (n_train, n_test) in zip(sequence.tasks, sequence.image_counts()):
            print(f"  task {task.index + 1}: {len(task.compositions)} compositions, "
                  f"{n_train} train / {n_test} test images")
        print(f"  recurring primitives: {', '.join(protocol.recurring_primitives) or 'none'}")
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        write_task_sequence(sequence, registry, out / "tasks.json")
        if protocol.valid:
            print("✓ Protocol valid")
            return 0
        for line in protocol.violations:
            print(f"✗ {line}", file=sys.stderr)
        return 1

    if args.command == "train":
        _banner(f"Training {cfg.label} over seeds {cfg.experiment.seeds}")
        result = run_experiment(cfg, progress=progress)
        for seed, summary in result.summaries.items():
            print(f"✓ seed {seed}: Avg Acc {summary['avg_acc']:.2f}  FTT {summary['ftt']:.2f}  "
                  f"State {summary['state']:.2f}  Object {summary['object']:.2f}  HM {summary['hm']:.2f}")
        for seed, error in result.failures.items():
            print(f"✗ seed {seed}: {error}", file=sys.stderr)
        return 1 if result.partial else 0

    if args.command == "evaluate":
        results = evaluate_checkpoint(cfg, args.checkpoint)
        for entry in results:
            if entry["samples"]:
                print(f"  task {entry['task']}: composition {entry['composition']:.4f}  "
                      f"state {entry['state']:.4f}  object {entry['object']:.4f}")
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        (out / "evaluation.json").write_text(json.dumps(results, indent=2), encoding="utf-8")
        print(f"✓ Evaluated {len(results)} task(s)")
        return 0

    if args.command == "ablate":
        rows = run_ablation(cfg, [parse_axis(a) for a in args.axis], progress=progress)
        print(f"✓ {len(rows)} ablation variant(s) written to {cfg.output_dir / 'ablation.csv'}")
        return 0 if rows and not any(r["partial"] for r in rows) else 1

    if args.command == "export-features":
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        n = export_features(cfg, args.checkpoint, args.split, out / f"features_{args.split}.csv")
        print(f"✓ {n} feature rows written to {out / f'features_{args.split}.csv'}")
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"✗ Invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, CheckpointError, SplitError, MetadataError, MetricError,
            tc.ShapeError, tc.NonFiniteError, ValueError, OSError) as exc:
        print(f"✗ {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
