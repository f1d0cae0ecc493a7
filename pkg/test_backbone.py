#!/usr/bin/env python3
"""
Unit tests for the frozen encoder: configuration checks, determinism,
freezing, prompt-extended encoding and weight snapshots.
"""

import unittest
import sys
import os
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import tensorcore as tc
from backbone import BackboneConfig, BackboneConfigError, FrozenEncoder, SnapshotError, truncated_normal
from tensorcore import Tape, Tensor


def tiny_config(**overrides):
    values = dict(image_side=16, patch_side=8, embed_dim=16, n_layers=1, n_heads=2,
                  prompt_tokens=6, dtype="float64")
    values.update(overrides)
    return BackboneConfig(**values)


class TestBackboneConfig(unittest.TestCase):
    """Configuration validation."""

    def test_indivisible_image_rejected(self):
        with self.assertRaises(BackboneConfigError):
            FrozenEncoder(tiny_config(image_side=20))

    def test_heads_must_divide_width(self):
        with self.assertRaises(BackboneConfigError):
            FrozenEncoder(tiny_config(n_heads=3))

    def test_token_count(self):
        """16x16 image with 8x8 patches gives 4 patches plus the class token."""
        self.assertEqual(tiny_config().n_tokens, 5)

    def test_truncated_normal_bounds(self):
        values = truncated_normal(np.random.default_rng(0), (1000,), std=0.02)
        self.assertLessEqual(np.abs(values).max(), 0.04)


class TestEncoder(unittest.TestCase):
    """Forward behaviour of the frozen encoder."""

    def setUp(self):
        self.encoder = FrozenEncoder(tiny_config())
        self.image = np.random.default_rng(3).uniform(0.0, 1.0, (3, 16, 16))

    def test_same_seed_same_weights(self):
        self.assertEqual(self.encoder.checksum(), FrozenEncoder(tiny_config()).checksum())
        self.assertNotEqual(self.encoder.checksum(), FrozenEncoder(tiny_config(seed=1)).checksum())

    def test_embed_shape(self):
        self.assertEqual(self.encoder.embed(self.image).shape, (5, 16))
        self.assertEqual(self.encoder.embed(np.stack([self.image] * 2)).shape, (2, 5, 16))

    def test_wrong_image_shape_rejected(self):
        with self.assertRaises(BackboneConfigError):
            self.encoder.embed(np.zeros((3, 8, 8)))

    def test_query_is_deterministic_and_untracked(self):
        """extract_query records nothing, even inside an active tape."""
        tape = Tape()
        with tape:
            q1 = self.encoder.extract_query(self.image)
        q2 = self.encoder.extract_query(self.image)
        self.assertEqual(len(tape), 0)
        self.assertEqual(q1.shape, (16,))
        np.testing.assert_array_equal(q1.data, q2.data)

    def test_query_is_class_row_of_plain_encoding(self):
        full = self.encoder.encode(self.encoder.embed(self.image))
        np.testing.assert_array_equal(self.encoder.extract_query(self.image).data, full.data[0])

    def test_single_pixel_changes_embedding(self):
        """Only the token of the patch holding the pixel moves."""
        shifted = self.image.copy()
        shifted[1, 9, 2] += 0.25
        before = self.encoder.embed(self.image).data
        after = self.encoder.embed(shifted).data
        # patch grid is 2x2; row 9, column 2 lies in patch (1, 0), token 3
        self.assertGreater(np.abs(after[3] - before[3]).max(), 0.0)
        np.testing.assert_array_equal(np.delete(after, 3, axis=0), np.delete(before, 3, axis=0))

    def test_prompt_block_order_matters(self):
        blocks = [np.random.default_rng(10 + i).normal(size=(2, 16)) for i in range(3)]
        x_e = self.encoder.embed(self.image)
        outputs = []
        for order in ((0, 1, 2), (2, 0, 1)):
            prompts = Tensor(np.concatenate([blocks[i] for i in order]))
            outputs.append(self.encoder.encode_extended(tc.concat([prompts, x_e], axis=0)).data)
        self.assertEqual(outputs[0].shape, (11, 16))
        self.assertGreater(np.abs(outputs[0][6:] - outputs[1][6:]).max(), 1e-8)

    def test_parameters_are_read_only(self):
        with self.assertRaises(ValueError):
            self.encoder.params["cls_token"].data[0] = 1.0

    def test_extended_sequence_length_checked(self):
        x_e = self.encoder.embed(self.image)
        prompts = Tensor(np.zeros((4, 16)))
        with self.assertRaises(BackboneConfigError):
            self.encoder.encode_extended(tc.concat([prompts, x_e], axis=0), n_prompt_tokens=3)
        with self.assertRaises(BackboneConfigError):
            self.encoder.encode_extended(
                tc.concat([Tensor(np.zeros((7, 16))), x_e], axis=0), n_prompt_tokens=7)

    def test_gradients_reach_prompts_not_backbone(self):
        """Prompt tokens get gradients through the encoder; the backbone stays unchanged."""
        before = self.encoder.checksum()
        prompts = Tensor(np.random.default_rng(4).normal(size=(2, 6, 16)), requires_grad=True)
        x_e = self.encoder.embed(np.stack([self.image] * 2))
        tape = Tape()
        with tape:
            out = self.encoder.encode_extended(tc.concat([prompts, x_e], axis=1))
            loss = tc.tsum(tc.mean(tc.getitem(out, (slice(None), slice(0, 6))), axis=1) ** 2)
        grads = tape.backward(loss)
        self.assertEqual(set(grads), {prompts})
        self.assertGreater(np.abs(grads[prompts]).sum(), 0.0)
        self.assertEqual(self.encoder.checksum(), before)
        self.assertTrue(self.encoder.verify_frozen())


class TestSnapshots(unittest.TestCase):
    """Weight snapshot save/load."""

    def test_round_trip_preserves_outputs(self):
        encoder = FrozenEncoder(tiny_config(dtype="float32"))
        image = np.random.default_rng(5).uniform(0.0, 1.0, (3, 16, 16))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "backbone.bin"
            encoder.save_weights(path)
            loaded = FrozenEncoder.load_weights(path)
        self.assertEqual(loaded.checksum(), encoder.checksum())
        np.testing.assert_array_equal(loaded.extract_query(image).data, encoder.extract_query(image).data)

    def test_truncated_snapshot_rejected(self):
        encoder = FrozenEncoder(tiny_config())
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "backbone.bin"
            encoder.save_weights(path)
            path.write_bytes(path.read_bytes()[:-10])
            with self.assertRaises(SnapshotError):
                FrozenEncoder.load_weights(path)

    def test_foreign_file_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "other.bin"
            path.write_bytes(b"not a snapshot at all")
            with self.assertRaises(SnapshotError):
                FrozenEncoder.load_weights(path)


if __name__ == '__main__':
    unittest.main()
