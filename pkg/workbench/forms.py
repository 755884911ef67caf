from dataclasses import fields

from django import forms
from django.core.exceptions import ValidationError

from .experiment_config import (
    DETECTORS,
    GAMES,
    attack_spec,
    default_config,
    detection_config,
    merge,
    repair_config,
    train_config,
)
from .lab.data import MIN_IMAGE_SIZE, resolve_count
from .lab.defenses import DEFENSES
from .lab.network import ARCHITECTURE_ID
from .lab.repair import RepairConfig

DATASET_KEYS = {"classes", "per_class", "image_size", "channels", "noise", "seed"}
SWEEP_KEYS = {"m", "r", "delta"}


def _number_list(value, name):
    if not isinstance(value, list) or not value:
        raise ValidationError(f"sweep.{name} must be a non-empty list")
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ValidationError(f"sweep.{name} contains a non-number: {item!r}")
    return value


class ExperimentConfigForm(forms.Form):
    """Validates one experiment config (already merged with the defaults)"""

    name = forms.CharField(max_length=200, required=False)
    game = forms.ChoiceField(choices=[(game, game) for game in GAMES])
    architecture = forms.ChoiceField(choices=[(ARCHITECTURE_ID, ARCHITECTURE_ID)])
    n = forms.IntegerField(min_value=1, help_text="Clean training samples per game")
    repeats = forms.IntegerField(min_value=1)
    populations = forms.IntegerField(min_value=1)
    seed = forms.IntegerField(min_value=0, help_text="Master seed")
    test_size = forms.IntegerField(min_value=1)
    eval_size = forms.IntegerField(min_value=1)
    dataset = forms.JSONField()
    train = forms.JSONField()
    attack = forms.JSONField()
    defense = forms.JSONField()
    detector = forms.JSONField(required=False)
    sweep = forms.JSONField()
    grid_search = forms.JSONField(required=False)

    def clean_dataset(self):
        dataset = self.cleaned_data.get("dataset")
        if not isinstance(dataset, dict):
            raise ValidationError("dataset must be an object")
        unknown = sorted(set(dataset) - DATASET_KEYS)
        if unknown:
            raise ValidationError(f"Unknown dataset fields: {', '.join(unknown)}")
        if int(dataset["classes"]) < 2:
            raise ValidationError("dataset.classes must be at least 2")
        if int(dataset["per_class"]) < 1:
            raise ValidationError("dataset.per_class must be at least 1")
        if int(dataset["image_size"]) < MIN_IMAGE_SIZE:
            raise ValidationError(f"dataset.image_size must be at least {MIN_IMAGE_SIZE}")
        if int(dataset["channels"]) not in (1, 3):
            raise ValidationError("dataset.channels must be 1 or 3")
        if float(dataset["noise"]) < 0:
            raise ValidationError("dataset.noise cannot be negative")
        return dataset

    def clean_train(self):
        train = self.cleaned_data.get("train")
        try:
            train_config({"train": train})
        except (TypeError, ValueError) as e:
            raise ValidationError(f"Invalid train section: {e}")
        return train

    def clean_attack(self):
        attack = self.cleaned_data.get("attack")
        try:
            attack_spec({"attack": attack})
        except (TypeError, ValueError) as e:
            raise ValidationError(f"Invalid attack section: {e}")
        return attack

    def clean_defense(self):
        defense = self.cleaned_data.get("defense")
        method = (defense or {}).get("method", "none")
        if method not in DEFENSES:
            raise ValidationError(
                f"Unknown defense {method!r}; choose from {', '.join(sorted(DEFENSES))}"
            )
        try:
            repair_config({"defense": defense})
        except (TypeError, ValueError) as e:
            raise ValidationError(f"Invalid defense section: {e}")
        return defense

    def clean_detector(self):
        detector = self.cleaned_data.get("detector") or {"method": "cnc"}
        if detector.get("method", "cnc") not in DETECTORS:
            raise ValidationError(f"Unknown detector; choose from {', '.join(DETECTORS)}")
        try:
            detection_config({"detector": detector})
        except (TypeError, ValueError) as e:
            raise ValidationError(f"Invalid detector section: {e}")
        return detector

    def clean_sweep(self):
        sweep = self.cleaned_data.get("sweep")
        if not isinstance(sweep, dict):
            raise ValidationError("sweep must be an object")
        missing = sorted(SWEEP_KEYS - set(sweep))
        if missing:
            raise ValidationError(f"sweep is missing: {', '.join(missing)}")
        unknown = sorted(set(sweep) - SWEEP_KEYS)
        if unknown:
            raise ValidationError(f"Unknown sweep fields: {', '.join(unknown)}")
        for name in SWEEP_KEYS:
            _number_list(sweep[name], name)
        if any(m < 0 or int(m) != m for m in sweep["m"]):
            raise ValidationError("sweep.m values must be non-negative integers")
        if any(r <= 0 for r in sweep["r"]):
            raise ValidationError("sweep.r values must be positive")
        if any(not 0.0 < delta < 1.0 for delta in sweep["delta"]):
            raise ValidationError("sweep.delta values must lie in (0, 1)")
        return sweep

    def clean_grid_search(self):
        grid = self.cleaned_data.get("grid_search") or {}
        if not grid:
            return {}
        space = grid.get("space")
        if space is not None:
            if not isinstance(space, dict) or not space:
                raise ValidationError("grid_search.space must be a non-empty object")
            known = {f.name for f in fields(RepairConfig)}
            for key, values in space.items():
                if key not in known:
                    raise ValidationError(f"grid_search.space: unknown repair field {key!r}")
                if not isinstance(values, list) or not values:
                    raise ValidationError(f"grid_search.space.{key} must be a non-empty list")
        return grid

    def clean(self):
        cleaned_data = super().clean()
        dataset = cleaned_data.get("dataset")
        attack = cleaned_data.get("attack")
        sweep = cleaned_data.get("sweep")

        if dataset and attack:
            target = int(attack.get("target_class", 0))
            if not 0 <= target < int(dataset["classes"]):
                self.add_error("attack", "attack.target_class is outside the dataset's classes")

        if dataset and sweep and cleaned_data.get("n"):
            pool = int(dataset["classes"]) * int(dataset["per_class"])
            n = cleaned_data["n"]
            trust_sizes = [resolve_count(r, n) for r in sweep["r"]]
            # data-efficiency draws a fresh trusted set for every r in one game
            if cleaned_data.get("game") == "data-efficiency":
                trust = sum(trust_sizes)
            else:
                trust = max(trust_sizes)
            needed = n + max(sweep["m"]) + trust + cleaned_data.get("test_size", 0) + (
                cleaned_data.get("eval_size", 0)
            )
            if attack and attack.get("attack") == "advclean":
                needed += max(n // 2, int(dataset["classes"]))
            if needed > pool:
                raise ValidationError(
                    f"The dataset holds {pool} samples but one game draws up to {needed}"
                )

        defense = cleaned_data.get("defense")
        if cleaned_data.get("game") == "gridsearch" and defense:
            if defense.get("method", "none") == "none":
                self.add_error("defense", "gridsearch needs a defense other than 'none'")
        return cleaned_data

    def cleaned_config(self):
        """The validated config in canonical form"""
        data = self.cleaned_data
        return {
            "name": data["name"],
            "game": data["game"],
            "architecture": data["architecture"],
            "dataset": data["dataset"],
            "train": data["train"],
            "attack": data["attack"],
            "defense": data["defense"],
            "detector": data["detector"],
            "sweep": data["sweep"],
            "grid_search": data["grid_search"],
            "n": data["n"],
            "repeats": data["repeats"],
            "populations": data["populations"],
            "seed": data["seed"],
            "test_size": data["test_size"],
            "eval_size": data["eval_size"],
        }


def validate_config(config):
    """Merge ``config`` with the defaults and validate it; raises ValidationError."""
    form = ExperimentConfigForm(data=merge(default_config(), config))
    if not form.is_valid():
        raise ValidationError(
            {
                field: [error["message"] for error in errors]
                for field, errors in form.errors.get_json_data().items()
            }
        )
    return form.cleaned_config()
