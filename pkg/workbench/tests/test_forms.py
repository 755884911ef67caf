"""Tests for experiment config validation."""

from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from ..experiment_config import default_config, merge
from ..forms import ExperimentConfigForm, validate_config
from .base import FormTestMixin, tiny_config


class ExperimentConfigFormTests(FormTestMixin, SimpleTestCase):
    """Test cases for the experiment config form"""

    def make_form(self, **overrides):
        data = merge(default_config(), tiny_config())
        data.update(overrides)
        return ExperimentConfigForm(data=data)

    def test_default_config_is_valid(self):
        self.assertFormValid(ExperimentConfigForm(data=default_config()))

    def test_tiny_config_is_valid(self):
        self.assertFormValid(self.make_form())

    def test_unknown_dataset_field(self):
        dataset = {**tiny_config()["dataset"], "colour": "red"}
        self.assertFormInvalid(self.make_form(dataset=dataset), ["dataset"])

    def test_dataset_needs_two_classes(self):
        dataset = {**tiny_config()["dataset"], "classes": 1}
        self.assertFormInvalid(self.make_form(dataset=dataset), ["dataset"])

    def test_unknown_attack(self):
        self.assertFormInvalid(self.make_form(attack={"attack": "nope"}), ["attack"])

    def test_unknown_attack_field(self):
        self.assertFormInvalid(
            self.make_form(attack={"attack": "badnets", "strength": 2}), ["attack"]
        )

    def test_target_class_outside_dataset(self):
        self.assertFormInvalid(
            self.make_form(attack={"attack": "badnets", "target_class": 5}), ["attack"]
        )

    def test_unknown_defense(self):
        self.assertFormInvalid(self.make_form(defense={"method": "magic"}), ["defense"])

    def test_negative_repair_weight(self):
        defense = {"method": "pivotal-tuning", "slol_lambda": -1}
        self.assertFormInvalid(self.make_form(defense=defense), ["defense"])

    def test_unknown_detector(self):
        self.assertFormInvalid(self.make_form(detector={"method": "oracle"}), ["detector"])

    def test_sweep_missing_key(self):
        self.assertFormInvalid(self.make_form(sweep={"m": [0], "r": [6]}), ["sweep"])

    def test_sweep_unknown_key(self):
        sweep = {"m": [0], "r": [6], "delta": [0.1], "b": [1]}
        self.assertFormInvalid(self.make_form(sweep=sweep), ["sweep"])

    def test_sweep_delta_range(self):
        for delta in (0.0, 1.0, 1.5):
            with self.subTest(delta=delta):
                sweep = {"m": [0], "r": [6], "delta": [delta]}
                self.assertFormInvalid(self.make_form(sweep=sweep), ["sweep"])

    def test_sweep_rejects_fractional_m(self):
        sweep = {"m": [1.5], "r": [6], "delta": [0.1]}
        self.assertFormInvalid(self.make_form(sweep=sweep), ["sweep"])

    def test_pool_too_small_for_one_game(self):
        self.assertFormInvalid(self.make_form(n=200), ["__all__"])

    def test_fractional_trust_counts_against_the_pool(self):
        sweep = {"m": [0], "r": [0.5], "delta": [0.1]}
        self.assertFormValid(self.make_form(sweep=sweep))

    def test_data_efficiency_counts_every_trusted_set(self):
        # 30 + 4 + max(6, 20, 31) + 30 fits in 120; the sum over r does not
        sweep = {"m": [4], "r": [6, 20, 31], "delta": [0.5]}
        self.assertFormValid(self.make_form(sweep=sweep))
        self.assertFormInvalid(
            self.make_form(game="data-efficiency", sweep=sweep, defense={"method": "weight-decay"}),
            ["__all__"],
        )

    def test_advclean_counts_the_surrogate_draw(self):
        sweep = {"m": [4], "r": [6], "delta": [0.5]}
        self.assertFormValid(self.make_form(n=60, sweep=sweep))
        form = self.make_form(n=60, sweep=sweep, attack={"attack": "advclean", "target_class": 0})
        self.assertFormInvalid(form, ["__all__"])

    def test_gridsearch_needs_a_defense(self):
        self.assertFormInvalid(self.make_form(game="gridsearch"), ["defense"])

    def test_grid_search_space_fields(self):
        grid = {"space": {"learning_rate": [0.01, 0.1]}}
        self.assertFormValid(self.make_form(grid_search=grid))
        grid = {"space": {"momentum_of_doom": [1]}}
        self.assertFormInvalid(self.make_form(grid_search=grid), ["grid_search"])

    def test_unknown_game(self):
        self.assertFormInvalid(self.make_form(game="tournament"), ["game"])


class ValidateConfigTests(SimpleTestCase):
    """Test cases for validate_config"""

    def test_fills_in_defaults(self):
        config = validate_config({"n": 30, "test_size": 20, "eval_size": 10,
                                  "dataset": {"classes": 3, "per_class": 40}})
        self.assertEqual(config["detector"], {"method": "cnc"})
        self.assertEqual(config["grid_search"], {})
        self.assertEqual(config["repeats"], 1)

    def test_validation_error_names_the_field(self):
        with self.assertRaises(ValidationError) as cm:
            validate_config(tiny_config(defense={"method": "magic"}))
        self.assertIn("defense", cm.exception.message_dict)

    def test_cleaned_config_is_stable(self):
        self.assertEqual(validate_config(tiny_config()), validate_config(tiny_config()))
