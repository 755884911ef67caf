"""Tests for the robustness and detectability games and the sweeps on them."""

import numpy as np

from ..lab.attacks import AttackSpec
from ..lab.data import derive_seeds
from ..lab.detection import ConstantDetector
from ..lab.games import (
    DefenseChain,
    curve_point,
    data_efficiency,
    detectability_game,
    detectability_round,
    effectiveness_curve,
    member_seed_for,
    robustness_game,
)
from ..lab.network import build_model
from ..lab.repair import RepairConfig
from .base import BaseLabTestCase


def member_stub(pool, oracle, attack, n, m, r, scorers, seed, train_cfg, test_size, train_fn):
    """A population member whose poisoned score grows with m and clean score is fixed."""
    return {
        "asr": min(1.0, m / 10),
        "cda": 0.9,
        "clean_cda": 0.9,
        "poisoned": {name: float(m) for name in scorers},
        "clean": {name: 0.0 for name in scorers},
        "seeds": {"master": seed},
    }


class RobustnessGameTests(BaseLabTestCase):
    """Test cases for the robustness game"""

    def setUp(self):
        self.attack = AttackSpec(attack="badnets", target_class=0)
        self.train_cfg = self.quick_train_config(steps=3)

    def play(self, distribution=None, **kwargs):
        distribution = distribution or self.make_distribution()
        defaults = {
            "n": 30, "m": 4, "r": 6, "seed": 1, "train_cfg": self.train_cfg,
            "test_size": 20, "eval_size": 10,
        }
        defaults.update(kwargs)
        return robustness_game(distribution, self.attack, **defaults)

    def test_asr_is_model_minus_oracle(self):
        outcome = self.play()
        self.assertAlmostEqual(outcome.asr, outcome.model_asr - outcome.oracle_asr)
        self.assertEqual(outcome.r, 6)
        self.assertEqual(outcome.defense, "none")
        self.assertEqual(outcome.attack["poison_count"], 4)

    def test_draws_are_disjoint_within_a_game(self):
        distribution = self.make_distribution()
        self.play(distribution)
        self.assertEqual(len(distribution.used), 30 + 4 + 6 + 10 + 20)

    def test_oracle_deployment_has_no_attack_success(self):
        distribution = self.make_distribution()
        chain = DefenseChain(deploy=lambda _model: distribution.oracle)
        outcome = self.play(distribution, defense_chain=chain)
        self.assertEqual(outcome.cda, 1.0)
        self.assertEqual(outcome.asr, 0.0)

    def test_game_is_deterministic_in_seed(self):
        first = self.play()
        second = self.play()
        self.assertEqual(first.as_dict(), second.as_dict())

    def test_defended_game_records_trace(self):
        chain = DefenseChain(
            defense="weight-decay",
            repair=RepairConfig(method="weight-decay", steps=2, eval_every=1, delta=0.5, probe_steps=2),
        )
        outcome = self.play(defense_chain=chain)
        self.assertEqual(outcome.defense, "weight-decay")
        trace = outcome.as_dict()["trace"]
        self.assertEqual(trace["method"], "weight-decay")
        self.assertEqual(trace["meta"]["canary"]["steps"], 2)

    def test_tuning_hook_picks_the_repair_config(self):
        def tune(suspect, trust, cfg):
            return cfg.with_values(method="weight-decay", steps=1, eval_every=1)

        chain = DefenseChain(
            defense="pivotal-tuning",
            repair=RepairConfig(method="pivotal-tuning", delta=0.5, probe_steps=2),
            tune=tune,
        )
        outcome = self.play(defense_chain=chain)
        self.assertEqual(outcome.defense, "weight-decay")

    def test_tsb_reports_segment_asr(self):
        distribution = self.make_distribution(image_size=16)
        self.attack = AttackSpec(attack="tsb", tsb_k=3)
        outcome = self.play(distribution)
        self.assertEqual(len(outcome.segment_asr), 3)


class DetectabilityGameTests(BaseLabTestCase):
    """Test cases for the detectability game"""

    def test_constant_detector_is_right_when_the_coin_agrees(self):
        attack = AttackSpec(attack="badnets", target_class=0)
        for seed in range(4):
            coin = int(np.random.default_rng(derive_seeds(seed).defense).integers(2))
            result = detectability_game(
                self.make_distribution(), attack, None, 20, 4, 6, ConstantDetector(0), seed,
                train_cfg=self.quick_train_config(steps=2),
            )
            self.assertEqual(result, int(coin == 0))

    def test_round_reports_coin_and_prediction(self):
        round_ = detectability_round(
            self.make_distribution(), AttackSpec(), 20, 4, 6, ConstantDetector(1), seed=3,
            train_cfg=self.quick_train_config(steps=2),
        )
        self.assertEqual(round_.prediction, 1)
        self.assertEqual(round_.correct, int(round_.coin == 1))


class SweepTests(BaseLabTestCase):
    """Test cases for effectiveness curves and data efficiency"""

    def test_member_seeds_are_paired_and_distinct(self):
        self.assertEqual(member_seed_for(5, 0, 1), member_seed_for(5, 0, 1))
        self.assertNotEqual(member_seed_for(5, 0, 1), member_seed_for(5, 1, 0))

    def test_curve_point_aggregates_members(self):
        members = [
            [member_stub(None, None, None, 0, 10, 0, {"cnc": None}, s, None, 0, None) for s in range(3)]
        ]
        point = curve_point(10, members, ["cnc"])
        self.assertEqual(point.effectiveness, 1.0)
        self.assertEqual(point.effectiveness_std, 0.0)
        self.assertEqual(point.detectability["cnc"], 1.0)
        self.assertEqual(len(point.poisoned_scores["cnc"]), 3)

    def test_effectiveness_curve_with_stub_members(self):
        pool, oracle = self.make_pool()
        points = effectiveness_curve(
            pool, oracle, AttackSpec(), [0, 5], repeats=2, n=20, r=6,
            scorers={"cnc": None, "nc": None}, populations=2, member_fn=member_stub,
        )
        self.assertEqual([p.m for p in points], [0, 5])
        self.assertEqual(points[0].detectability["cnc"], 0.5)
        self.assertEqual(points[1].detectability["nc"], 1.0)
        self.assertAlmostEqual(points[1].effectiveness, 0.5)
        self.assertEqual(len(points[1].asr_values), 4)

    def test_effectiveness_curve_needs_repeats(self):
        pool, oracle = self.make_pool()
        with self.assertRaises(ValueError):
            effectiveness_curve(pool, oracle, AttackSpec(), [0], 0, 20, 6, {}, member_fn=member_stub)

    def test_data_efficiency_points_per_trust_size(self):
        pool, oracle = self.make_pool()
        points = data_efficiency(
            pool, oracle, AttackSpec(), "none", [3, 6], 0.1, 20, 4, seed=0,
            train_cfg=self.quick_train_config(steps=3), test_size=20, eval_size=10,
        )
        self.assertEqual([p.r for p in points], [3, 6])
        for point in points:
            self.assertGreaterEqual(point.data_efficiency, 0.0)
            self.assertLessEqual(point.data_efficiency, 1.0)
            self.assertEqual(point.as_dict()["trace"]["method"], "none")

    def test_data_efficiency_budget_range(self):
        pool, oracle = self.make_pool()
        with self.assertRaises(ValueError):
            data_efficiency(pool, oracle, AttackSpec(), "none", [3], 1.0, 20, 4)

    def test_data_efficiency_reuses_a_given_suspect(self):
        pool, oracle = self.make_pool()
        suspect = build_model(pool.class_count, pool.image_size, seed=0)
        first = data_efficiency(
            pool, oracle, AttackSpec(target_class=1), "none", [3], 0.1, 20, 0,
            train_cfg=self.quick_train_config(steps=2), test_size=20, eval_size=10, suspect=suspect,
        )
        self.assertEqual(first[0].cda, first[0].pre_cda)
