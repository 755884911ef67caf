"""
Experiment config files: loading, ``--set`` overrides, hashing and the
conversion of a validated config into lab objects.
"""

import copy
import hashlib
import itertools
import json
from dataclasses import fields
from pathlib import Path

from django.conf import settings

from .lab.attacks import AttackSpec
from .lab.detection import DetectionConfig
from .lab.repair import REFERENCE_CONFIGS, RepairConfig
from .lab.training import preset

GAMES = (
    "robustness",
    "detectability",
    "detectability-game",
    "data-efficiency",
    "gridsearch",
)
DETECTORS = ("cnc", "nc")


def default_config():
    """Defaults for every field an experiment file may leave out."""
    workbench = settings.WORKBENCH
    return {
        "name": "",
        "game": "robustness",
        "architecture": "smallconv-v1",
        "dataset": {
            "classes": workbench["CLASS_COUNT"],
            "per_class": 300,
            "image_size": workbench["IMAGE_SIZE"],
            "channels": 3,
            "noise": 0.08,
            "seed": 0,
        },
        "train": {"preset": "desk"},
        "attack": {"attack": "badnets", "target_class": 0},
        "defense": {"method": "none"},
        "detector": {"method": "cnc"},
        "sweep": {
            "m": [0],
            "r": list(workbench["R_SWEEP"]),
            "delta": [workbench["DEFAULT_DELTA"]],
        },
        "grid_search": {},
        "n": 2000,
        "repeats": 1,
        "populations": 1,
        "seed": 0,
        "test_size": workbench["TEST_SIZE"],
        "eval_size": 200,
    }


def merge(base, overrides):
    """Recursively merge ``overrides`` into a copy of ``base``."""
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != "grid_search":
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path):
    with open(path, encoding="utf-8") as handle:
        config = json.load(handle)
    if not isinstance(config, dict):
        raise ValueError(f"{path}: an experiment config must be a JSON object")
    return config


def parse_override(text):
    """``a.b.c=value`` -> (["a", "b", "c"], value); the value is JSON when it parses."""
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ValueError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(config, overrides):
    config = copy.deepcopy(config)
    for text in overrides or ():
        path, value = parse_override(text)
        node = config
        for part in path[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[path[-1]] = value
    return config


def canonical_bytes(config):
    return json.dumps(config, sort_keys=True, indent=2).encode("utf-8")


def config_hash(config):
    return hashlib.sha256(canonical_bytes(config)).hexdigest()


def git_blob_sha1(content):
    header = f"blob {len(content)}\0".encode("utf-8")
    return hashlib.sha1(header + content).hexdigest()


def code_hash(root=None):
    """
    Content hash of the package source: the sha1 of the sorted
    ``<blob sha1> <relative path>`` listing of every ``.py`` file.
    """
    root = Path(root) if root is not None else Path(__file__).resolve().parent
    lines = []
    for path in sorted(root.rglob("*.py")):
        relative = path.relative_to(root)
        if "migrations" in relative.parts or "tests" in relative.parts:
            continue
        lines.append(f"{git_blob_sha1(path.read_bytes())} {relative.as_posix()}")
    return hashlib.sha1("\n".join(lines).encode("utf-8")).hexdigest()


def run_directory(digest):
    return Path(settings.WORKBENCH["CACHE_ROOT"]) / digest


def _section(config, name):
    return dict(config.get(name) or {})


def train_config(config):
    values = _section(config, "train")
    name = values.pop("preset", "desk")
    return preset(name, **values)


def attack_spec(config, m=None, seed=None):
    values = _section(config, "attack")
    if m is not None:
        values["poison_count"] = int(m)
    if seed is not None:
        values["seed"] = int(seed)
    known = {f.name for f in fields(AttackSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown attack fields: {', '.join(unknown)}")
    return AttackSpec.from_dict(values)


def repair_config(config, delta=None, seed=None):
    values = _section(config, "defense")
    reference = values.pop("reference", False)
    if delta is not None:
        values["delta"] = float(delta)
    if seed is not None:
        values["seed"] = int(seed)
    values.setdefault("method", "none")
    if reference:
        if values["method"] not in REFERENCE_CONFIGS:
            raise ValueError(f"no reference config for defense {values['method']!r}")
        return REFERENCE_CONFIGS[values["method"]].with_values(**values)
    return RepairConfig(**values)


def detection_config(config, seed=None):
    values = _section(config, "detector")
    values.pop("method", None)
    values.pop("compare", None)
    repair = values.pop("repair", None)
    if seed is not None:
        values["seed"] = int(seed)
    repair_cfg = RepairConfig(**repair) if repair else RepairConfig()
    return DetectionConfig(repair=repair_cfg, **values)


def sweep_cells(config):
    """Every (m, r, delta, repeat) combination of the sweep, in lexicographic order."""
    sweep = config["sweep"]
    return list(
        itertools.product(sweep["m"], sweep["r"], sweep["delta"], range(config["repeats"]))
    )
