"""Tests for synthetic data, labelled sets and the sampling distribution."""

import tempfile

import numpy as np

from ..lab.data import (
    Distribution,
    LabeledSet,
    Oracle,
    Provenance,
    derive_seeds,
    generate_synthetic_dataset,
    holdout_split,
    load_dataset,
    resolve_count,
    save_dataset,
)
from ..lab.exceptions import InsufficientSamplesError, InvalidDatasetError
from .base import BaseLabTestCase


class SyntheticDatasetTests(BaseLabTestCase):
    """Test cases for the synthetic dataset generator"""

    def test_generated_set_is_balanced_and_in_range(self):
        data, oracle = generate_synthetic_dataset(4, 25, 16, seed=3)
        self.assertEqual(data.images.shape, (100, 16, 16, 3))
        self.assertEqual(data.images.dtype, np.float32)
        self.assertGreaterEqual(data.images.min(), 0.0)
        self.assertLessEqual(data.images.max(), 1.0)
        np.testing.assert_array_equal(np.bincount(data.labels), [25, 25, 25, 25])
        np.testing.assert_array_equal(oracle.predict(data), data.labels)

    def test_generation_is_deterministic_in_seed(self):
        first, _ = generate_synthetic_dataset(3, 10, 8, seed=11)
        second, _ = generate_synthetic_dataset(3, 10, 8, seed=11)
        other, _ = generate_synthetic_dataset(3, 10, 8, seed=12)
        np.testing.assert_array_equal(first.images, second.images)
        self.assertFalse(np.array_equal(first.images, other.images))

    def test_image_too_small_for_patch_trigger(self):
        with self.assertRaises(InvalidDatasetError):
            generate_synthetic_dataset(3, 10, 4, seed=0)

    def test_needs_two_classes(self):
        with self.assertRaises(InvalidDatasetError):
            generate_synthetic_dataset(1, 10, 8, seed=0)


class LabeledSetTests(BaseLabTestCase):
    """Test cases for LabeledSet validation and helpers"""

    def test_pixel_values_outside_unit_range_are_rejected(self):
        with self.assertRaises(InvalidDatasetError):
            LabeledSet(images=np.full((2, 8, 8, 3), 1.5), labels=[0, 1], class_count=2)

    def test_labels_outside_class_range_are_rejected(self):
        with self.assertRaises(InvalidDatasetError):
            LabeledSet(images=np.zeros((2, 8, 8, 3)), labels=[0, 2], class_count=2)

    def test_defaults_mark_samples_clean(self):
        data = LabeledSet(images=np.zeros((3, 8, 8, 3)), labels=[0, 1, 0], class_count=2)
        self.assertFalse(data.poisoned.any())
        np.testing.assert_array_equal(data.source_index, [0, 1, 2])

    def test_concatenate_keeps_lineage(self):
        data, _ = self.make_pool()
        joined = LabeledSet.concatenate(data.subset([0, 1]), data.subset([5]))
        self.assertEqual(len(joined), 3)
        np.testing.assert_array_equal(joined.source_index, [0, 1, 5])

    def test_oracle_follows_source_index(self):
        data, _ = self.make_pool()
        oracle = Oracle(np.arange(len(data)) % 3)
        subset = data.subset([4, 7])
        np.testing.assert_array_equal(oracle.predict(subset), [4 % 3, 7 % 3])

    def test_dataset_directory_round_trip(self):
        data, _ = self.make_pool()
        data.provenance[:2] = Provenance.PAYLOAD
        with tempfile.TemporaryDirectory() as directory:
            save_dataset(data, directory, meta={"note": "x"})
            loaded, meta = load_dataset(directory)
        np.testing.assert_array_equal(loaded.images, data.images)
        np.testing.assert_array_equal(loaded.provenance, data.provenance)
        self.assertEqual(meta["note"], "x")
        self.assertEqual(meta["class_count"], 3)


class DistributionTests(BaseLabTestCase):
    """Test cases for sampling without replacement"""

    def test_draws_are_disjoint(self):
        distribution = self.make_distribution()
        first = distribution.draw(30)
        second = distribution.draw(30)
        third = distribution.draw_stratified(9)
        indices = np.concatenate([first.source_index, second.source_index, third.source_index])
        self.assertEqual(len(np.unique(indices)), 69)

    def test_draw_restricted_to_classes(self):
        distribution = self.make_distribution()
        draw = distribution.draw(10, classes=[1, 2])
        self.assertTrue(np.isin(draw.labels, [1, 2]).all())

    def test_draw_beyond_pool_raises(self):
        distribution = self.make_distribution()
        with self.assertRaises(InsufficientSamplesError):
            distribution.draw(121)

    def test_stratified_draw_spreads_classes(self):
        distribution = self.make_distribution()
        draw = distribution.draw_stratified(7)
        self.assertEqual(sorted(np.bincount(draw.labels, minlength=3)), [2, 2, 3])

    def test_same_seed_same_draws(self):
        pool, oracle = self.make_pool()
        first = Distribution(pool, oracle, 5).draw(10)
        second = Distribution(pool, oracle, 5).draw(10)
        np.testing.assert_array_equal(first.source_index, second.source_index)


class SeedTests(BaseLabTestCase):
    def test_derive_seeds_is_deterministic_and_independent(self):
        seeds = derive_seeds(42)
        self.assertEqual(seeds, derive_seeds(42))
        values = [seeds.data, seeds.init, seeds.training, seeds.attack, seeds.defense]
        self.assertEqual(len(set(values)), 5)
        self.assertEqual(seeds.as_dict()["master"], 42)

    def test_resolve_count(self):
        self.assertEqual(resolve_count(0.1, 200), 20)
        self.assertEqual(resolve_count(30, 200), 30)
        self.assertEqual(resolve_count(0.001, 200), 1)


class HoldoutSplitTests(BaseLabTestCase):
    """Test cases for per-class held-out splits"""

    def test_split_is_per_class_and_disjoint(self):
        data, _ = self.make_pool(per_class=10)
        fit, held = holdout_split(data, 0.4, seed=1)
        np.testing.assert_array_equal(np.bincount(held.labels, minlength=3), [4, 4, 4])
        np.testing.assert_array_equal(np.bincount(fit.labels, minlength=3), [6, 6, 6])
        self.assertEqual(len(np.intersect1d(fit.source_index, held.source_index)), 0)
        np.testing.assert_array_equal(
            np.sort(np.concatenate([fit.source_index, held.source_index])), np.arange(30)
        )

    def test_every_class_keeps_a_sample_to_fit(self):
        data, _ = self.make_pool(per_class=2)
        fit, held = holdout_split(data, 0.9, seed=0)
        np.testing.assert_array_equal(np.bincount(fit.labels, minlength=3), [1, 1, 1])
        self.assertEqual(len(held), 3)
        self.assertEqual(len(holdout_split(data, 0.4, seed=0)[1]), 0)

    def test_fraction_outside_range(self):
        data, _ = self.make_pool(per_class=4)
        for fraction in (-0.1, 1.0):
            with self.subTest(fraction=fraction), self.assertRaises(ValueError):
                holdout_split(data, fraction, seed=0)
