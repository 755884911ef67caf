"""Tests for ROC AUC, Succ_Repair and the sweep aggregates."""

from types import SimpleNamespace

from ..lab.exceptions import EmptyInputError
from ..lab.metrics import MetricReport, mean_std, roc_auc, spearman, succ_repair
from .base import BaseLabTestCase


class RocAucTests(BaseLabTestCase):
    def test_perfect_separation(self):
        self.assertEqual(roc_auc([0.9, 0.8], [0.1, 0.2]), 1.0)
        self.assertEqual(roc_auc([0.1, 0.2], [0.9, 0.8]), 0.0)

    def test_ties_count_one_half(self):
        self.assertEqual(roc_auc([0.5, 0.5], [0.5, 0.5]), 0.5)
        self.assertEqual(roc_auc([1.0, 0.5], [0.5]), 0.75)

    def test_matches_pair_counting(self):
        backdoored, clean = [0.7, 0.4, 0.4], [0.4, 0.1, 0.9]
        wins = sum(1.0 if b > c else 0.5 if b == c else 0.0 for b in backdoored for c in clean)
        self.assertAlmostEqual(roc_auc(backdoored, clean), wins / 9, places=12)

    def test_empty_side_raises(self):
        with self.assertRaises(EmptyInputError):
            roc_auc([], [0.1])
        with self.assertRaises(EmptyInputError):
            roc_auc([0.1], [])


class AggregateTests(BaseLabTestCase):
    def test_mean_std_uses_sample_deviation(self):
        mean, std = mean_std([1.0, 2.0, 3.0])
        self.assertAlmostEqual(mean, 2.0)
        self.assertAlmostEqual(std, 1.0)
        self.assertEqual(mean_std([0.4]), (0.4, 0.0))
        with self.assertRaises(EmptyInputError):
            mean_std([])

    def test_succ_repair_is_mean_gap(self):
        outcomes = [SimpleNamespace(cda=0.9, asr=0.1), SimpleNamespace(cda=0.8, asr=0.4)]
        self.assertAlmostEqual(succ_repair(outcomes), 0.6)
        with self.assertRaises(EmptyInputError):
            succ_repair([])

    def test_spearman(self):
        self.assertAlmostEqual(spearman([1, 2, 3, 4], [10, 20, 25, 40]), 1.0)
        self.assertEqual(spearman([1, 1, 1], [1, 2, 3]), 0.0)

    def test_metric_report_range_checks(self):
        with self.assertRaises(ValueError):
            MetricReport(attack="badnets", detectability=1.5)
        report = MetricReport(attack="badnets", m=10, detectability=0.75)
        self.assertEqual(report.as_dict()["detectability"], 0.75)
