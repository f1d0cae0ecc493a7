#!/usr/bin/env python3
"""
Unit tests for the training objectives: directional decoupling, surrogate,
symmetric cross entropy and the weighted total.
"""

import unittest
import sys
import os
import math

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import tensorcore as tc
from losses import (DDConfig, LossParts, LossWeights, dd_loss, inter_intra, sce_loss, surrogate_loss,
                    total_loss)
from prompts import PromptPool, select_topk
from tensorcore import Tensor, check_gradients


def brute_force_dd(a, b, theta_thre, same_pool):
    """Double loop over prompt pairs."""
    m = a.shape[0]
    fa, fb = a.reshape(m, -1), b.reshape(m, -1)
    total = 0.0
    for n in range(m):
        for k in range(m):
            if same_pool and n == k:
                continue
            cos = fa[n] @ fb[k] / (np.linalg.norm(fa[n]) * np.linalg.norm(fb[k]))
            theta = math.acos(min(max(cos, -1.0 + 1e-7), 1.0 - 1e-7))
            total += max(0.0, theta_thre - theta)
    return 2.0 * total / (m * (m - 1))


def make_pool(namespace, rng, m=4, length=2, d=3):
    return PromptPool(namespace,
                      Tensor(rng.normal(size=(m, length, d)), requires_grad=True, dtype=np.float64),
                      Tensor(rng.normal(size=(m, d)), requires_grad=True, dtype=np.float64))


class TestDirectionalDecoupling(unittest.TestCase):
    """dd_loss against its definition."""

    def test_matches_double_loop(self):
        rng = np.random.default_rng(0)
        cfg = DDConfig()
        for _ in range(100):
            a = Tensor(rng.normal(size=(5, 2, 3)), dtype=np.float64)
            b = Tensor(rng.normal(size=(5, 2, 3)), dtype=np.float64)
            self.assertAlmostEqual(dd_loss(a, b, cfg, same_pool=False).item(),
                                   brute_force_dd(a.data, b.data, cfg.theta_thre, False), delta=1e-10)
            self.assertAlmostEqual(dd_loss(a, a, cfg, same_pool=True).item(),
                                   brute_force_dd(a.data, a.data, cfg.theta_thre, True), delta=1e-10)

    def test_orthogonal_pools_give_zero(self):
        eye = np.eye(4)
        a = Tensor(eye[:2].reshape(2, 1, 4), dtype=np.float64)
        b = Tensor(eye[2:].reshape(2, 1, 4), dtype=np.float64)
        self.assertEqual(dd_loss(a, b, DDConfig(), same_pool=False).item(), 0.0)

    def test_identical_prompts_within_pool(self):
        """Two identical prompts: both off-diagonal pairs pay close to pi/2."""
        a = Tensor(np.ones((2, 1, 3)), dtype=np.float64)
        self.assertAlmostEqual(dd_loss(a, a, DDConfig(), same_pool=True).item(), math.pi, delta=1e-2)

    def test_identical_prompts_across_pools(self):
        """Every pair in the full grid is parallel: 4 * pi/2 scaled by 2 / (2 * 1)."""
        a = Tensor(np.full((2, 1, 3), 0.5), dtype=np.float64)
        b = Tensor(np.full((2, 1, 3), 0.5), dtype=np.float64)
        self.assertAlmostEqual(dd_loss(a, b, DDConfig(), same_pool=False).item(), 2.0 * math.pi, delta=1e-2)

    def test_positive_rescaling_leaves_loss_unchanged(self):
        rng = np.random.default_rng(6)
        cfg = DDConfig()

        def dd(x, y, same_pool):
            return dd_loss(Tensor(x, dtype=np.float64), Tensor(y, dtype=np.float64), cfg, same_pool).item()

        for _ in range(20):
            a, b = rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 2, 3))
            scale_a = rng.uniform(0.01, 100.0, size=(4, 1, 1))
            scale_b = rng.uniform(0.01, 100.0, size=(4, 1, 1))
            self.assertAlmostEqual(dd(a * scale_a, b * scale_b, False), dd(a, b, False), delta=1e-9)
            self.assertAlmostEqual(dd(a * scale_a, a * scale_a, True), dd(a, a, True), delta=1e-9)

    def test_single_prompt_pool_is_zero(self):
        a = Tensor(np.ones((1, 2, 3)), dtype=np.float64)
        with self.assertLogs("losses", level="WARNING"):
            self.assertEqual(dd_loss(a, a, DDConfig(), same_pool=True).item(), 0.0)

    def test_size_mismatch(self):
        with self.assertRaises(tc.ShapeError):
            dd_loss(Tensor(np.ones((2, 1, 3))), Tensor(np.ones((3, 1, 3))), DDConfig(), same_pool=False)

    def test_zero_prompt_stays_finite(self):
        a = Tensor(np.zeros((3, 1, 2)), requires_grad=True, dtype=np.float64)
        tape = tc.Tape()
        with tape:
            loss = dd_loss(a, a, DDConfig(), same_pool=True)
        grads = tape.backward(loss)
        self.assertTrue(np.isfinite(loss.item()))
        self.assertTrue(np.all(np.isfinite(grads[a])))

    def test_inter_intra_over_pools(self):
        rng = np.random.default_rng(1)
        pools = {ns: make_pool(ns, rng) for ns in ("composition", "state", "object")}
        cfg = DDConfig()
        inter, intra = inter_intra(pools, cfg)
        p = {ns: pool.prompts.data for ns, pool in pools.items()}
        expected_inter = (brute_force_dd(p["state"], p["object"], cfg.theta_thre, False)
                          + brute_force_dd(p["state"], p["composition"], cfg.theta_thre, False)
                          + brute_force_dd(p["object"], p["composition"], cfg.theta_thre, False))
        expected_intra = sum(brute_force_dd(v, v, cfg.theta_thre, True) for v in p.values())
        self.assertAlmostEqual(inter.item(), expected_inter, delta=1e-10)
        self.assertAlmostEqual(intra.item(), expected_intra, delta=1e-10)

    def test_single_pool_has_no_inter_term(self):
        rng = np.random.default_rng(2)
        inter, intra = inter_intra({"composition": make_pool("composition", rng)}, DDConfig())
        self.assertEqual(inter.item(), 0.0)
        self.assertGreaterEqual(intra.item(), 0.0)

    def test_dd_gradients(self):
        rng = np.random.default_rng(3)
        a, b = make_pool("state", rng), make_pool("object", rng)
        cfg = DDConfig(theta_thre=2.5)
        report = check_gradients(lambda: dd_loss(a, b, cfg, same_pool=False), [a.prompts, b.prompts],
                                 step=1e-6)
        self.assertTrue(report.passed, report.summary())


class TestSurrogate(unittest.TestCase):
    """Query-key pull."""

    def test_identical_key_and_query_give_zero(self):
        keys = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        pool = PromptPool("composition", Tensor(np.zeros((3, 1, 2)), dtype=np.float64),
                          Tensor(keys, requires_grad=True, dtype=np.float64))
        query = Tensor(np.array([2.0, 0.0]), dtype=np.float64)
        selection = select_topk(pool, query, 1)
        self.assertAlmostEqual(surrogate_loss({"composition": query}, {"composition": selection}).item(), 0.0)

    def test_sum_over_namespaces_and_keys(self):
        keys = np.array([[1.0, 0.0], [0.0, 1.0]])
        pools = {ns: PromptPool(ns, Tensor(np.zeros((2, 1, 2)), dtype=np.float64),
                                Tensor(keys, requires_grad=True, dtype=np.float64))
                 for ns in ("composition", "object")}
        query = Tensor(np.array([1.0, 0.0]), dtype=np.float64)
        selections = {ns: select_topk(pool, query, 2) for ns, pool in pools.items()}
        queries = {ns: query for ns in pools}
        self.assertAlmostEqual(surrogate_loss(queries, selections).item(), 2.0)

    def test_range_over_three_namespaces(self):
        """0 <= loss <= 2 k per namespace; the top is reached when every key opposes its query."""
        rng = np.random.default_rng(7)
        k = 2
        for _ in range(50):
            pools = {ns: make_pool(ns, rng) for ns in ("composition", "state", "object")}
            queries = {ns: Tensor(rng.normal(size=3), dtype=np.float64) for ns in pools}
            selections = {ns: select_topk(pool, queries[ns], k) for ns, pool in pools.items()}
            value = surrogate_loss(queries, selections).item()
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 2.0 * k * 3)

        query = Tensor(np.array([1.0, 2.0, -1.0]), dtype=np.float64)
        opposed = {ns: PromptPool(ns, Tensor(np.zeros((4, 1, 3)), dtype=np.float64),
                                  Tensor(np.tile(-query.data, (4, 1)), dtype=np.float64))
                   for ns in ("composition", "state", "object")}
        selections = {ns: select_topk(pool, query, k) for ns, pool in opposed.items()}
        value = surrogate_loss({ns: query for ns in opposed}, selections).item()
        self.assertAlmostEqual(value, 2.0 * k * 3, places=9)

    def test_keys_receive_gradient(self):
        rng = np.random.default_rng(4)
        pool = make_pool("composition", rng)
        query = Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
        selection = select_topk(pool, query, 2)
        report = check_gradients(lambda: surrogate_loss({"composition": query}, {"composition": selection}),
                                 [pool.keys], step=1e-6)
        self.assertTrue(report.passed, report.summary())


class TestSymmetricCrossEntropy(unittest.TestCase):
    """CE + alpha * RCE with log 0 replaced by the floor."""

    def test_uniform_two_class(self):
        """p = 0.5: CE = ln 2, RCE = 4 * 0.5 = 2."""
        logits = Tensor(np.zeros(2), dtype=np.float64)
        value = sce_loss(logits, 0, LossWeights(alpha=1.0)).item()
        self.assertAlmostEqual(value, math.log(2.0) + 2.0, places=12)

    def test_three_quarter_probability(self):
        """alpha = 1, A = -4, p = 0.75: -ln 0.75 + 4 * 0.25."""
        logits = Tensor(np.array([math.log(3.0), 0.0]), dtype=np.float64)
        value = sce_loss(logits, 0, LossWeights(alpha=1.0, rce_floor=-4.0)).item()
        self.assertAlmostEqual(value, -math.log(0.75) + 1.0, places=12)
        self.assertAlmostEqual(value, 1.2877, delta=1e-4)

    def test_decreases_as_label_probability_grows(self):
        weights = LossWeights(alpha=1.0)
        values = [sce_loss(Tensor(np.array([t, 0.0, 0.5]), dtype=np.float64), 0, weights).item()
                  for t in np.linspace(-6.0, 6.0, 61)]
        self.assertTrue(np.all(np.diff(values) < 0.0))

    def test_confident_correct_prediction(self):
        logits = Tensor(np.array([50.0, 0.0, 0.0]), dtype=np.float64)
        self.assertLess(sce_loss(logits, 0, LossWeights(alpha=1.0)).item(), 1e-12)

    def test_alpha_zero_is_cross_entropy(self):
        logits = Tensor(np.array([0.2, -0.4, 1.1]), dtype=np.float64)
        expected = -(0.2 - np.log(np.exp([0.2, -0.4, 1.1]).sum()))
        self.assertAlmostEqual(sce_loss(logits, 0, LossWeights(alpha=0.0)).item(), expected, places=12)

    def test_masking_excludes_classes(self):
        logits = Tensor(np.array([0.0, 0.0, 100.0]), dtype=np.float64)
        allowed = np.array([True, True, False])
        self.assertAlmostEqual(sce_loss(logits, 0, LossWeights(alpha=0.0), allowed).item(), math.log(2.0))

    def test_invalid_inputs(self):
        with self.assertRaises(tc.ShapeError):
            sce_loss(Tensor(np.zeros(1)), 0, LossWeights())
        with self.assertRaises(tc.NonFiniteError):
            sce_loss(Tensor(np.array([np.nan, 0.0])), 0, LossWeights())
        with self.assertRaises(tc.ShapeError):
            sce_loss(Tensor(np.zeros(3)), 5, LossWeights())

    def test_batched_gradients(self):
        logits = Tensor(np.random.default_rng(5).normal(size=(4, 3)), requires_grad=True, dtype=np.float64)
        weights = LossWeights(alpha=0.5)
        report = check_gradients(lambda: sce_loss(logits, [0, 2, 1, 2], weights), [logits], step=1e-6)
        self.assertTrue(report.passed, report.summary())


class TestTotalLoss(unittest.TestCase):
    """Weighted combination."""

    def test_weighted_sum(self):
        parts = LossParts(*[Tensor(np.array(v), dtype=np.float64) for v in (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)])
        weights = LossWeights(lambda1=0.5, lambda2=0.25, lambda3=2.0, beta=0.1)
        expected = 0.5 * 1 + 0.25 * 2 + 2.0 * 3 + 4 + 0.1 * (5 + 6)
        self.assertAlmostEqual(total_loss(parts, weights).item(), expected)

    def test_missing_terms_count_as_zero(self):
        parts = LossParts(sce_composition=Tensor(np.array(1.5), dtype=np.float64))
        self.assertAlmostEqual(total_loss(parts, LossWeights()).item(), 1.5)
        self.assertEqual(parts.values()["inter"], 0.0)

    def test_weight_validation(self):
        with self.assertRaises(ValueError):
            LossWeights(beta=-1.0).validate()
        with self.assertRaises(ValueError):
            LossWeights(rce_floor=0.0).validate()
        with self.assertRaises(ValueError):
            DDConfig(theta_thre=4.0).validate()


if __name__ == '__main__':
    unittest.main()
