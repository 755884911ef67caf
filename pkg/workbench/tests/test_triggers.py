"""Tests for trigger patterns and their application rules."""

import tempfile
from pathlib import Path

import numpy as np
from scipy import special, stats

from ..lab.exceptions import TriggerPlacementError
from ..lab.network import build_model
from ..lab.triggers import (
    Trigger,
    a_blend_trigger,
    apply_trigger,
    badnets_trigger,
    blend,
    checker_pattern,
    craft_adv_trigger,
    load_trigger,
    make_refool_trigger,
    make_wanet_trigger,
    occlusion_mask,
    patch_side,
    refool_trigger,
    save_trigger,
    stamp_patch,
    tsb_triggers,
    wanet_trigger,
)
from .base import BaseLabTestCase


class PatchTriggerTests(BaseLabTestCase):
    """Test cases for stamped patch triggers"""

    def setUp(self):
        self.images = np.random.default_rng(0).random((4, 16, 16, 3), dtype=np.float32)

    def test_patch_side_scales_with_image(self):
        self.assertEqual(patch_side(16), 3)
        self.assertEqual(patch_side(32), 3)
        self.assertEqual(patch_side(64), 6)

    def test_badnets_stamps_only_the_patch(self):
        original = self.images.copy()
        stamped = stamp_patch(self.images, badnets_trigger(16))
        np.testing.assert_array_equal(self.images, original)
        expected = np.broadcast_to(checker_pattern(3), (4, 3, 3, 3))
        np.testing.assert_array_equal(stamped[:, :3, :3, :], expected)
        np.testing.assert_array_equal(stamped[:, 3:, :, :], original[:, 3:, :, :])
        np.testing.assert_array_equal(stamped[:, :3, 3:, :], original[:, :3, 3:, :])

    def test_single_image_keeps_its_shape(self):
        stamped = stamp_patch(self.images[0], badnets_trigger(16))
        self.assertEqual(stamped.shape, (16, 16, 3))

    def test_patch_outside_image_raises(self):
        with self.assertRaises(TriggerPlacementError):
            stamp_patch(self.images, badnets_trigger(16, location=(14, 14)))

    def test_occluded_cells_keep_the_image(self):
        trigger = badnets_trigger(16)
        mask = np.zeros((3, 3, 1), np.float32)
        np.testing.assert_array_equal(stamp_patch(self.images, trigger, mask=mask), self.images)

    def test_stamping_twice_changes_nothing(self):
        trigger = badnets_trigger(16, location=(5, 9))
        once = stamp_patch(self.images, trigger)
        np.testing.assert_array_equal(stamp_patch(once, trigger), once)


class BlendTriggerTests(BaseLabTestCase):
    """Test cases for blended triggers and occlusion masks"""

    def setUp(self):
        self.images = np.random.default_rng(1).random((2, 8, 8, 3), dtype=np.float32)
        self.trigger = a_blend_trigger(8, 3, seed=4)

    def test_blend_extremes(self):
        np.testing.assert_allclose(blend(self.images, self.trigger, alpha=0.0), self.images)
        np.testing.assert_allclose(
            blend(self.images, self.trigger, alpha=1.0),
            np.broadcast_to(self.trigger.pattern, self.images.shape),
        )

    def test_blend_is_convex_combination(self):
        out = blend(self.images, self.trigger, alpha=0.3)
        expected = 0.7 * self.images + 0.3 * self.trigger.pattern
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_invalid_opacity_raises(self):
        with self.assertRaises(ValueError):
            blend(self.images, self.trigger, alpha=1.5)

    def test_occlusion_mask_extremes(self):
        self.assertTrue((occlusion_mask(8, 4, 0.0, seed=0) == 1).all())
        self.assertTrue((occlusion_mask(8, 4, 1.0, seed=0) == 0).all())
        self.assertEqual(occlusion_mask(8, 4, 0.5, seed=0).shape, (8, 8, 1))

    def test_occlusion_mask_is_constant_per_cell(self):
        mask = occlusion_mask(8, 4, 0.5, seed=3)[:, :, 0]
        for row in range(0, 8, 2):
            for col in range(0, 8, 2):
                cell = mask[row : row + 2, col : col + 2]
                self.assertEqual(len(np.unique(cell)), 1)

    def test_occlusion_rate_over_many_masks(self):
        # every 2x2 block of an 8px mask with a 4x4 grid is one cell
        kept = np.concatenate(
            [occlusion_mask(8, 4, 0.3, seed=seed)[::2, ::2, 0].ravel() for seed in range(500)]
        )
        self.assertAlmostEqual(kept.mean(), 0.7, delta=0.03)


class SegmentAndWarpTriggerTests(BaseLabTestCase):
    """Test cases for TSB segments, WaNet warping and Refool ghosting"""

    def test_tsb_segments_are_distinct(self):
        triggers = tsb_triggers(16, 8, seed=0)
        self.assertEqual(len(triggers), 8)
        self.assertEqual(len({t.location for t in triggers}), 8)
        for i, first in enumerate(triggers):
            for second in triggers[i + 1 :]:
                self.assertFalse(np.array_equal(first.pattern, second.pattern))

    def test_tsb_cells_are_uniform_over_seeds(self):
        counts = np.zeros(16, np.int64)
        for seed in range(1600):
            (trigger,) = tsb_triggers(16, 1, seed=seed)
            row, col = trigger.location
            counts[(row // 4) * 4 + col // 4] += 1
        self.assertGreater(stats.chisquare(counts).pvalue, 1e-3)

    def test_tsb_needs_room_for_segments(self):
        with self.assertRaises(TriggerPlacementError):
            tsb_triggers(16, 17, seed=0)
        with self.assertRaises(TriggerPlacementError):
            tsb_triggers(8, 2, seed=0)

    def test_zero_strength_warp_is_identity(self):
        images = np.random.default_rng(2).random((2, 8, 8, 3), dtype=np.float32)
        trigger = make_wanet_trigger(8, seed=1, strength=1.5)
        np.testing.assert_array_equal(wanet_trigger(images, trigger.warp_field, 0.0), images)
        warped = apply_trigger(images, trigger)
        self.assertEqual(warped.shape, images.shape)
        self.assertGreaterEqual(warped.min(), 0.0)
        self.assertLessEqual(warped.max(), 1.0)

    def test_zero_intensity_reflection_is_identity(self):
        images = np.random.default_rng(3).random((2, 8, 8, 3), dtype=np.float32)
        np.testing.assert_array_equal(refool_trigger(images, images[1], intensity=0.0), images)
        ghosted = apply_trigger(images, make_refool_trigger(images[1]))
        self.assertLessEqual(ghosted.max(), 1.0)
        self.assertTrue((ghosted >= images - 1e-6).all())

    def test_reflection_touches_most_pixels(self):
        rng = np.random.default_rng(4)
        images = 0.5 * rng.random((2, 16, 16, 3), dtype=np.float32)
        reflection = rng.random((16, 16, 3), dtype=np.float32)
        ghosted = apply_trigger(images, make_refool_trigger(reflection))
        self.assertGreater(np.mean(ghosted != images), 0.5)

    def test_adversarial_trigger_stays_in_the_ball_and_pushes_the_target(self):
        model = build_model(3, 8, seed=0)
        images = np.random.default_rng(5).random((8, 8, 8, 3), dtype=np.float32)
        trigger = craft_adv_trigger(model, target_class=2, epsilon=8 / 255, steps=4)
        perturbed = apply_trigger(images, trigger)
        self.assertLessEqual(np.abs(perturbed - images).max(), 8 / 255 + 1e-6)
        self.assertGreaterEqual(perturbed.min(), 0.0)
        self.assertLessEqual(perturbed.max(), 1.0)
        before = special.log_softmax(model.logits(images), axis=1)[:, 2].mean()
        after = special.log_softmax(model.logits(perturbed), axis=1)[:, 2].mean()
        self.assertGreater(after, before)

    def test_unknown_rule_rejected(self):
        with self.assertRaises(ValueError):
            Trigger(rule="sticker")

    def test_trigger_file_keeps_warp_field(self):
        trigger = make_wanet_trigger(8, seed=1, strength=1.5)
        with tempfile.TemporaryDirectory() as directory:
            path = save_trigger(trigger, Path(directory) / "warp")
            self.assertEqual(path.suffix, ".npz")
            loaded = load_trigger(path)
        self.assertEqual(loaded.rule, "warp")
        self.assertEqual(loaded.strength, 1.5)
        np.testing.assert_array_equal(loaded.warp_field, trigger.warp_field)
