#!/usr/bin/env python3
"""
Unit tests for the composition protocol: registry, split builder, protocol
validator, synthetic renderer and file formats.
"""

import unittest
import sys
import os
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from data import (DatasetSpec, LabelRegistry, MetadataError, PixelStore, SampleRecord, SplitError, Task,
                  TaskSequence, build_splits, read_metadata, read_task_sequence, render_sample, synthesize,
                  task_data, validate_protocol, write_metadata, write_task_sequence)


def records_from_counts(counts):
    """SampleRecords with ``counts[(state, object)]`` images per composition."""
    records = []
    for (state, obj), n in counts.items():
        records.extend(SampleRecord(f"{state}-{obj}-{j}", state, obj) for j in range(n))
    return records


def clothing_like_counts():
    """35 frequent compositions over 9 states and 8 objects, plus rare ones."""
    counts = {}
    rank = 0
    for s in range(9):
        for o in range(8):
            if (s + o) % 2 == 0 and (s, o) != (8, 0):
                counts[(f"state{s}", f"object{o}")] = 100 - rank
                rank += 1
            else:
                counts[(f"state{s}", f"object{o}")] = 3
    return counts


class TestBuildSplits(unittest.TestCase):
    """Ranking, filtering and division into tasks."""

    def test_clothing_shaped_metadata(self):
        """35 kept compositions, 9 states, 8 objects, 5 disjoint tasks of 7."""
        registry, sequence = build_splits(records_from_counts(clothing_like_counts()), 35, 5,
                                          "random-partition", seed=0)
        self.assertEqual(registry.n_compositions, 35)
        self.assertEqual(registry.n_states, 9)
        self.assertEqual(registry.n_objects, 8)
        self.assertEqual([len(t.compositions) for t in sequence.tasks], [7] * 5)
        covered = [c for t in sequence.tasks for c in t.compositions]
        self.assertEqual(sorted(covered), list(range(35)))
        report = validate_protocol(sequence, registry)
        self.assertTrue(report.valid, report.violations)
        self.assertGreaterEqual(len(report.recurring_primitives), 1)

    def test_keeps_most_frequent(self):
        counts = {("a", "x"): 10, ("b", "x"): 9, ("a", "y"): 2, ("b", "y"): 1}
        registry, _ = build_splits(records_from_counts(counts), 2, 1)
        names = {registry.composition_name(c) for c in range(registry.n_compositions)}
        self.assertEqual(names, {"a x", "b x"})

    def test_count_sorted_contiguous_division(self):
        """80 compositions in 10 tasks: task 1 holds the 8 most frequent."""
        counts = {(f"s{i:02d}", f"o{i % 7}"): 200 - i for i in range(80)}
        registry, sequence = build_splits(records_from_counts(counts), 80, 10, "count-sorted")
        self.assertEqual([len(t.compositions) for t in sequence.tasks], [8] * 10)
        first = {registry.composition_name(c) for c in sequence.tasks[0].compositions}
        top8 = sorted(counts, key=lambda pair: -counts[pair])[:8]
        self.assertEqual(first, {f"{s} {o}" for s, o in top8})

    def test_ties_broken_by_name(self):
        counts = {("b", "x"): 5, ("a", "x"): 5, ("c", "x"): 5}
        registry, _ = build_splits(records_from_counts(counts), 2, 1)
        self.assertEqual(registry.composition_name(0), "a x")
        self.assertEqual(registry.composition_name(1), "b x")

    def test_remainder_goes_to_earliest_tasks(self):
        counts = {(f"s{i}", "x"): 20 - i for i in range(7)}
        with self.assertLogs("data", level="WARNING"):
            _, sequence = build_splits(records_from_counts(counts), 7, 3)
        self.assertEqual([len(t.compositions) for t in sequence.tasks], [3, 2, 2])

    def test_rejections(self):
        records = records_from_counts({("a", "x"): 3, ("b", "x"): 3})
        with self.assertRaises(SplitError):
            build_splits(records, 3, 1)
        with self.assertRaises(SplitError):
            build_splits(records, 2, 3)
        with self.assertRaises(SplitError):
            build_splits(records, 2, 1, policy="shuffled")

    def test_train_test_split_per_composition(self):
        """10 images per composition: 8 train, 2 test, disjoint."""
        counts = {("a", "x"): 10, ("b", "x"): 10}
        _, sequence = build_splits(records_from_counts(counts), 2, 1)
        task = sequence.tasks[0]
        self.assertEqual(len(task.train_ids), 16)
        self.assertEqual(len(task.test_ids), 4)
        self.assertFalse(set(task.train_ids) & set(task.test_ids))
        self.assertEqual(sequence.image_counts(), [(16, 4)])

    def test_deterministic(self):
        records = records_from_counts(clothing_like_counts())
        first = build_splits(records, 35, 5, "random-partition", seed=4)
        second = build_splits(records, 35, 5, "random-partition", seed=4)
        self.assertEqual(first[1], second[1])
        self.assertEqual(first[0].digest(), second[0].digest())


class TestValidateProtocol(unittest.TestCase):
    """Disjointness and recurrence reporting."""

    def setUp(self):
        self.registry = LabelRegistry(["s1", "s2"], ["o1"], [(0, 0), (1, 0)])

    def test_recurring_object_is_valid(self):
        report = validate_protocol(TaskSequence([Task(0, (0,)), Task(1, (1,))]), self.registry)
        self.assertTrue(report.valid)
        self.assertEqual(report.object_recurrence["o1"], 2)
        self.assertEqual(report.state_recurrence, {"s1": 1, "s2": 1})

    def test_repeated_composition_is_named(self):
        report = validate_protocol(TaskSequence([Task(0, (0,)), Task(1, (0,))]), self.registry)
        self.assertFalse(report.valid)
        self.assertTrue(any("s1 o1" in v and "task 1" in v and "task 2" in v for v in report.violations),
                        report.violations)

    def test_registry_rejects_bad_pairs(self):
        with self.assertRaises(SplitError):
            LabelRegistry(["s1"], ["o1"], [(0, 0), (0, 0)])
        with self.assertRaises(SplitError):
            LabelRegistry(["s1"], ["o1"], [(1, 0)])


class TestSynthesize(unittest.TestCase):
    """Seeded shape x colour renderer."""

    def setUp(self):
        self.spec = DatasetSpec(n_states=3, n_objects=2, samples_per_composition=10, image_side=16, seed=7)

    def test_counts(self):
        records, store = synthesize(self.spec)
        self.assertEqual(len(records), 60)
        self.assertEqual(len({r.composition for r in records}), 6)
        self.assertEqual(len(store), 60)

    def test_same_seed_same_pixels(self):
        _, first = synthesize(self.spec)
        _, second = synthesize(self.spec)
        self.assertEqual(sorted(first.images), sorted(second.images))
        for sample_id, pixels in first.images.items():
            np.testing.assert_array_equal(pixels, second.images[sample_id])

    def test_state_changes_fill_not_shape(self):
        pixels_a, mask_a = render_sample(self.spec, 0, 1, 3)
        pixels_b, mask_b = render_sample(self.spec, 1, 1, 3)
        np.testing.assert_array_equal(mask_a, mask_b)
        self.assertTrue(mask_a.any())
        fill_a = pixels_a[mask_a].astype(float).mean(axis=0)
        fill_b = pixels_b[mask_b].astype(float).mean(axis=0)
        self.assertGreater(np.abs(fill_a - fill_b).max(), 20.0)

    def test_labels_recoverable_from_recipe(self):
        records, _ = synthesize(self.spec)
        for record in records:
            self.assertEqual(record.composition[1], ["disk", "square"][record.shape_id])

    def test_small_images_rejected(self):
        with self.assertRaises(SplitError):
            synthesize(DatasetSpec(image_side=12))

    def test_composition_subset(self):
        records, _ = synthesize(DatasetSpec(n_states=3, n_objects=2, samples_per_composition=2,
                                            image_side=16, n_compositions=4))
        self.assertEqual(len({r.composition for r in records}), 4)
        with self.assertRaises(SplitError):
            DatasetSpec(n_states=2, n_objects=2, n_compositions=5).validate()

    def test_task_arrays(self):
        records, store = synthesize(self.spec)
        registry, sequence = build_splits(records, 6, 2, seed=7)
        by_id = {r.sample_id: r for r in records}
        train = task_data(sequence.tasks[0], "train", registry, by_id, store)
        self.assertEqual(train.images.shape, (len(sequence.tasks[0].train_ids), 3, 16, 16))
        self.assertTrue(np.all((train.images >= 0) & (train.images <= 1)))
        self.assertTrue(set(train.composition_labels.tolist()) <= set(sequence.tasks[0].compositions))
        np.testing.assert_array_equal(registry.comp_state[train.composition_labels], train.state_labels)


class TestFileFormats(unittest.TestCase):
    """Metadata CSV, pixel store and task-sequence export."""

    def test_metadata_round_trip(self):
        records = [SampleRecord("a", "red", "disk", "a.rgb"), SampleRecord("b", "blue", "ring")]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "metadata.csv"
            write_metadata(records, path)
            self.assertEqual(read_metadata(path), records)

    def test_metadata_errors(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "metadata.csv"
            path.write_text("id,state,object\nx,red,disk\n")
            with self.assertRaises(MetadataError):
                read_metadata(path)
            path.write_text("sample_id,state,object\nx,red,disk\nx,blue,disk\n")
            with self.assertRaises(MetadataError):
                read_metadata(path)
            path.write_text("sample_id,state,object\nx,,disk\n")
            with self.assertRaises(MetadataError):
                read_metadata(path)

    def test_pixel_store_round_trip_and_truncation(self):
        _, store = synthesize(DatasetSpec(n_states=1, n_objects=2, samples_per_composition=2, image_side=16))
        with tempfile.TemporaryDirectory() as tmp:
            store.save(tmp)
            loaded = PixelStore.load(tmp)
            for sample_id, pixels in store.images.items():
                np.testing.assert_array_equal(loaded.images[sample_id], pixels)
            victim = next(Path(tmp).glob("*.rgb"))
            victim.write_bytes(victim.read_bytes()[:-1])
            with self.assertRaises(MetadataError):
                PixelStore.load(tmp)

    def test_task_sequence_export(self):
        counts = {("a", "x"): 5, ("b", "x"): 4, ("a", "y"): 3}
        registry, sequence = build_splits(records_from_counts(counts), 3, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "tasks.json"
            write_task_sequence(sequence, registry, path)
            loaded_registry, loaded = read_task_sequence(path)
            self.assertIn("a x", path.read_text())
        self.assertEqual(loaded, sequence)
        self.assertEqual(loaded_registry.digest(), registry.digest())


if __name__ == '__main__':
    unittest.main()
