#!/usr/bin/env python3
"""
Unit tests for accuracy matrices and the continual-learning summary metrics.
"""

import unittest
import sys
import os
import math
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from metrics import (AccuracyMatrix, MetricError, avg_acc, forgetting, harmonic_mean, load_matrices, mean_std,
                     save_matrices, session_avg_acc, summarize)


def brute_force_forgetting(values):
    n = values.shape[0]
    drops = []
    for i in range(n - 1):
        best = max(values[t][i] for t in range(i, n - 1))
        drops.append(best - values[n - 1][i])
    return sum(drops) / len(drops)


class TestAccuracyMatrix(unittest.TestCase):
    """Lower-triangular storage."""

    def test_upper_cells_undefined(self):
        m = AccuracyMatrix.from_rows([[0.9], [0.7, 0.8]])
        self.assertTrue(math.isnan(m.values[0, 1]))
        self.assertEqual(m.completed_rows, 2)

    def test_rejects_upper_cell_and_bad_value(self):
        m = AccuracyMatrix(2)
        with self.assertRaises(MetricError):
            m.set(0, 1, 0.5)
        with self.assertRaises(MetricError):
            m.set(1, 0, 1.5)
        with self.assertRaises(MetricError):
            AccuracyMatrix.from_rows([[0.5, 0.5]])

    def test_partial_rows(self):
        m = AccuracyMatrix.from_rows([[0.9], [0.7]])
        self.assertEqual(m.completed_rows, 1)
        self.assertFalse(m.row_complete(1))


class TestSummaryMetrics(unittest.TestCase):
    """Avg Acc, forgetting, harmonic mean and seed aggregation."""

    def test_two_task_example(self):
        m = AccuracyMatrix.from_rows([[0.9], [0.7, 0.8]])
        self.assertAlmostEqual(avg_acc(m), 0.75)
        self.assertAlmostEqual(forgetting(m), 0.2)
        np.testing.assert_allclose(session_avg_acc(m), [0.9, 0.75])

    def test_forgetting_uses_best_earlier_accuracy(self):
        m = AccuracyMatrix.from_rows([[0.6], [0.9, 0.5], [0.4, 0.5, 0.7]])
        self.assertAlmostEqual(forgetting(m), ((0.9 - 0.4) + (0.5 - 0.5)) / 2)

    def test_forgetting_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 7))
            values = np.tril(rng.uniform(0.0, 1.0, (n, n)))
            m = AccuracyMatrix.from_rows([values[t, :t + 1] for t in range(n)])
            self.assertAlmostEqual(forgetting(m), brute_force_forgetting(values), places=12)
            self.assertAlmostEqual(avg_acc(m), values[n - 1].mean(), places=12)

    def test_forgetting_errors(self):
        with self.assertRaises(MetricError):
            forgetting(AccuracyMatrix.from_rows([[0.5]]))
        with self.assertRaises(MetricError):
            forgetting(AccuracyMatrix.from_rows([[0.5], [0.4]]))
        with self.assertRaises(MetricError):
            avg_acc(AccuracyMatrix.from_rows([[0.5], [0.4]]))

    def test_harmonic_mean(self):
        self.assertAlmostEqual(harmonic_mean(91.81, 96.67), 94.18, delta=0.01)
        self.assertAlmostEqual(harmonic_mean(50.0, 100.0), 66.6667, places=4)
        self.assertAlmostEqual(harmonic_mean(42.0, 42.0), 42.0)
        self.assertEqual(harmonic_mean(0.0, 0.0), 0.0)
        with self.assertRaises(MetricError):
            harmonic_mean(-1.0, 50.0)

    def test_mean_std(self):
        mean, std = mean_std([0.5, 0.6, 0.7])
        self.assertAlmostEqual(mean, 0.6)
        self.assertAlmostEqual(std, 0.1)
        self.assertEqual(mean_std([0.3]), (0.3, 0.0))
        with self.assertRaises(MetricError):
            mean_std([])

    def test_summarize_percentages(self):
        matrices = {
            "composition": AccuracyMatrix.from_rows([[0.9], [0.7, 0.8]]),
            "state": AccuracyMatrix.from_rows([[1.0], [0.9, 0.9]]),
            "object": AccuracyMatrix.from_rows([[1.0], [0.6, 0.6]]),
        }
        summary = summarize(matrices)
        self.assertAlmostEqual(summary["avg_acc"], 75.0)
        self.assertAlmostEqual(summary["ftt"], 20.0)
        self.assertAlmostEqual(summary["state"], 90.0)
        self.assertAlmostEqual(summary["object"], 60.0)
        self.assertAlmostEqual(summary["hm"], 72.0)

    def test_single_task_has_no_forgetting(self):
        matrices = {kind: AccuracyMatrix.from_rows([[0.5]]) for kind in ("composition", "state", "object")}
        self.assertTrue(math.isnan(summarize(matrices)["ftt"]))


class TestMatrixFiles(unittest.TestCase):
    """CSV persistence."""

    def test_save_and_load(self):
        matrices = {
            "composition": AccuracyMatrix.from_rows([[0.9], [0.7, 0.8], [0.1, 0.2, 0.3]]),
            "state": AccuracyMatrix.from_rows([[1.0], [0.5], []]),
        }
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "matrix.csv"
            save_matrices(matrices, path)
            self.assertEqual(path.read_text().splitlines()[0], "metric,after_task,task_1,task_2,task_3")
            loaded = load_matrices(path)
        self.assertEqual(loaded, matrices)

    def test_foreign_file_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "other.csv"
            path.write_text("a,b,c\n1,2,3\n")
            with self.assertRaises(MetricError):
                load_matrices(path)


if __name__ == '__main__':
    unittest.main()
