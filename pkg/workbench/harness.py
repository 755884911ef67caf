"""
Experiment orchestration.

``run_experiment`` validates a config, hashes it, runs the declared sweep on
a bounded worker pool and stores every stage twice: as an append-only
``StageRecord`` row and as a line in ``runs/<hash>/records/<kind>.jsonl``.
"""

import itertools
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np
import torch
from django.conf import settings
from django.db import transaction
from django.utils import timezone

from .experiment_config import (
    attack_spec,
    canonical_bytes,
    code_hash,
    config_hash,
    detection_config,
    repair_config,
    run_directory,
    sweep_cells,
    train_config,
)
from .forms import validate_config
from .lab.checkpoints import save_checkpoint
from .lab.data import (
    Distribution,
    Oracle,
    derive_seeds,
    generate_synthetic_dataset,
    holdout_split,
    load_dataset,
    resolve_count,
    save_dataset,
)
from .lab.defenses import run_defense
from .lab.detection import CalibratedDetector, cnc, nc_detect, self_poison, self_poison_probe
from .lab.games import (
    DefenseChain,
    collect,
    curve_point,
    data_efficiency,
    detectability_round,
    member_seed_for,
    population_member,
    robustness_game,
    train_suspect,
    train_surrogate,
)
from .lab.metrics import MetricReport, mean_std, roc_auc
from .lab.network import build_model
from .lab.repair import RepairConfig, RepairEvaluation
from .lab.training import train
from .models import ExperimentRun, StageRecord
from .statistics import RunSummaryCalculator, write_summary_csv

logger = logging.getLogger(__name__)

# Hyper-parameter ranges searched per defense when a config gives no space.
DEFAULT_SPACES = {
    "pivotal-tuning": {
        "slol_lambda": [0.1, 0.05, 0.01, 0.005, 0.001],
        "optimizer": ["sgd", "adam"],
    },
    "weight-decay": {
        "weight_decay": [1e-2, 1e-3, 1e-4, 1e-5],
        "optimizer": ["sgd", "adam"],
    },
    "fine-pruning": {
        "prune_rate": [0.5, 0.75, 0.9, 0.96, 0.99],
        "optimizer": ["sgd", "adam"],
    },
    "nad": {
        "attention_power": [2, 3, 4],
        "attention_lambda": [100, 1000, 10000],
    },
    "neural-cleanse": {
        "nc_lambda": [2e-2, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
    },
}


def jsonable(value):
    """Round-trip through JSON so numpy scalars and arrays become plain values."""

    def default(obj):
        if isinstance(obj, np.generic):
            return obj.item()
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, Path):
            return str(obj)
        raise TypeError(f"{type(obj).__name__} is not JSON serializable")

    return json.loads(json.dumps(value, default=default))


# Grid search


@dataclass
class GridSearchResult:
    best: RepairConfig
    cells: list
    infeasible: bool = False
    self_poison_target: int = None
    self_poison_asr: float = None

    def as_dict(self):
        return {
            "best": self.best.as_dict(),
            "cells": self.cells,
            "infeasible": self.infeasible,
            "self_poison_target": self.self_poison_target,
            "self_poison_asr": self.self_poison_asr,
        }


def grid_search(defense, space, suspect, trust, delta, base_cfg=None,
                self_poison_steps=200, seed=0, clean=None, holdout=0.4):
    """
    Pick the repair config with the lowest self-poisoned ASR within the CDA
    budget.

    The suspect is fine-tuned on ``trust`` plus BadNets samples carrying the
    defender's own trigger; every config in the product of ``space`` then
    repairs that model. CDA and the self-poisoned ASR are scored on ``clean``,
    or on a ``holdout`` share of each trusted class when it is not given.
    Ties go to the smaller CDA loss, then to the smaller config in
    lexicographic order. When no config stays in budget the one
    with the smallest CDA loss is returned with ``infeasible`` set.
    """
    if not space:
        raise ValueError("grid search needs a non-empty space")
    base_cfg = base_cfg or RepairConfig(method=defense)
    target = int(np.random.default_rng(seed).integers(trust.class_count))
    if clean is None:
        fit, held = holdout_split(trust, holdout, seed)
        if len(held):
            trust, clean = fit, held
        else:
            logger.warning("Trusted set too small to hold out; grid search scores on its own data")
            clean = trust
    poisoned, trigger, _ = self_poison(
        suspect, trust, steps=self_poison_steps, target_class=target, seed=seed
    )
    evaluation = RepairEvaluation(clean=clean, probe=self_poison_probe(clean, trigger, target))
    pre_cda = evaluation.cda(poisoned)
    self_asr = evaluation.probe_asr(poisoned)
    logger.info(
        "Self-poisoned suspect for %s grid search: target %d, ASR %.3f, CDA %.3f",
        defense, target, self_asr, pre_cda,
    )

    keys = sorted(space)
    cells = []
    for index, values in enumerate(itertools.product(*(space[key] for key in keys))):
        settings_ = dict(zip(keys, values))
        cfg = base_cfg.with_values(**{"method": defense, "delta": delta, "seed": seed, **settings_})
        model, trace = run_defense(cfg.method, poisoned, trust, cfg, evaluation, pre_cda)
        cda = evaluation.cda(model)
        loss = pre_cda - cda
        cells.append(
            {
                "index": index,
                "config": settings_,
                "method": cfg.method,
                "cda": cda,
                "asr": evaluation.probe_asr(model),
                "cda_loss": loss,
                "feasible": bool(loss <= delta + 1e-12 and not trace.fallback),
                "selected_step": trace.selected_step,
            }
        )

    def order(cell):
        return tuple(cell["config"][key] for key in keys)

    feasible = [cell for cell in cells if cell["feasible"]]
    if feasible:
        best = min(feasible, key=lambda c: (c["asr"], c["cda_loss"], order(c)))
    else:
        best = min(cells, key=lambda c: (c["cda_loss"], order(c)))
        logger.warning(
            "Every %s config exceeds the CDA budget %.3f; returning the smallest CDA loss",
            defense, delta,
        )
    chosen = base_cfg.with_values(**{"method": defense, "delta": delta, **best["config"]})
    return GridSearchResult(chosen, cells, not feasible, target, self_asr)


def tune_repair(suspect, trust, cfg, space=None, self_poison_steps=200):
    """DefenseChain ``tune`` hook: run a grid search on the game's trusted data."""
    space = space or DEFAULT_SPACES[cfg.method]
    result = grid_search(
        cfg.method, space, suspect, trust, cfg.delta, base_cfg=cfg,
        self_poison_steps=self_poison_steps, seed=cfg.seed,
    )
    return result.best.with_values(seed=cfg.seed)


# Worker pool


@dataclass
class JobResult:
    job: dict
    value: object = None
    error: str = None

    @property
    def ok(self):
        return self.error is None


def _worker_init():
    torch.set_num_threads(1)


def _capture(fn, job):
    try:
        return JobResult(job, value=fn(**job))
    except Exception as e:
        logger.exception("Job %s failed", getattr(fn, "__name__", fn))
        return JobResult(job, error=f"{type(e).__name__}: {e}")


def run_jobs(fn, jobs, max_workers=None):
    """
    Run ``fn(**job)`` for every job on a bounded process pool. Results come
    back in job order; a failing job yields a JobResult with ``error`` set.
    """
    max_workers = settings.WORKBENCH["MAX_WORKERS"] if max_workers is None else max_workers
    if max_workers <= 1 or len(jobs) <= 1:
        return [_capture(fn, job) for job in jobs]
    with ProcessPoolExecutor(max_workers=max_workers, initializer=_worker_init) as executor:
        futures = [executor.submit(_capture, fn, job) for job in jobs]
        return [future.result() for future in futures]


# Record store


class RecordStore:
    """Appends stage records to the database and to ``records/<kind>.jsonl``"""

    def __init__(self, run, directory):
        self.run = run
        self.directory = Path(directory)
        (self.directory / "records").mkdir(parents=True, exist_ok=True)

    def append(self, kind, payload, **columns):
        with transaction.atomic():
            stage = StageRecord.objects.create(
                run=self.run,
                sequence=self.run.next_sequence(),
                kind=kind,
                payload=jsonable(payload),
                **{key: value for key, value in columns.items() if value is not None},
            )
        line = json.dumps(stage.as_record(), sort_keys=True)
        with open(self.directory / "records" / f"{kind}.jsonl", "a", encoding="utf-8") as handle:
            handle.write(line + "\n")
        return stage


def read_records(directory, kinds=None):
    """Every record under ``directory/records``, in sequence order."""
    records = []
    for path in sorted((Path(directory) / "records").glob("*.jsonl")):
        if kinds is not None and path.stem not in kinds:
            continue
        with open(path, encoding="utf-8") as handle:
            records.extend(json.loads(line) for line in handle if line.strip())
    return sorted(records, key=lambda record: record["sequence"])


def summary_row(attack, defense, m, b, r, delta, cda, asr, auc, seed, repeat):
    return {
        "attack": attack,
        "defense": defense,
        "m": m,
        "b": b,
        "r": r,
        "delta": delta,
        "cda": cda,
        "asr": asr,
        "auc": auc,
        "seed": seed,
        "repeat": repeat,
    }


# Datasets


def dataset_path(dataset):
    digest = config_hash({"dataset": dataset})[:16]
    return Path(settings.WORKBENCH["CACHE_ROOT"]) / "datasets" / digest


def oracle_for(pool):
    table = np.zeros(int(pool.source_index.max()) + 1, dtype=np.int64)
    table[pool.source_index] = pool.labels
    return Oracle(table)


def dataset_for(config):
    """The synthetic pool for ``config``, generated once and cached on disk."""
    dataset = config["dataset"]
    path = dataset_path(dataset)
    if (path / "meta.json").exists():
        pool, _ = load_dataset(path)
        logger.info("Loaded cached dataset %s", path.name)
        return pool, oracle_for(pool)
    pool, oracle = generate_synthetic_dataset(
        dataset["classes"],
        dataset["per_class"],
        dataset["image_size"],
        dataset["seed"],
        channels=dataset["channels"],
        noise=dataset["noise"],
    )
    save_dataset(pool, path, meta={"dataset": dataset})
    return pool, oracle


# Jobs. Module-level so the process pool can pickle them.


def cnc_score(model, trust, cfg):
    return cnc(model, trust, cfg=cfg)[0]


def nc_score(model, trust, cfg):
    return nc_detect(model, trust, cfg)[0]


SCORERS = {"cnc": cnc_score, "nc": nc_score}


def detector_config_for(config, delta, seed):
    cfg = detection_config(config, seed=seed)
    return replace(cfg, repair=cfg.repair.with_values(delta=delta))


def scorers_for(config, delta, seed):
    """The configured detector first, then any `compare` detectors."""
    detector = config.get("detector") or {}
    primary = detector.get("method", "cnc")
    names = [primary] + [name for name in detector.get("compare", []) if name != primary]
    cfg = detector_config_for(config, delta, seed)
    return {name: partial(SCORERS[name], cfg=cfg) for name in names}


def robustness_job(pool, oracle, config, m, r, delta, repeat, seed, checkpoint_dir=None):
    defense = config["defense"].get("method", "none")
    chain = DefenseChain(defense=defense, repair=repair_config(config, delta=delta))
    grid = config.get("grid_search") or {}
    if grid and defense != "none":
        chain.tune = partial(
            tune_repair,
            space=grid.get("space"),
            self_poison_steps=grid.get("self_poison_steps", 200),
        )
    outcome = robustness_game(
        Distribution(pool, oracle, derive_seeds(seed).data),
        attack_spec(config),
        config["n"],
        m,
        r,
        chain,
        seed,
        train_config(config),
        config["test_size"],
        config["eval_size"],
    )
    if checkpoint_dir is not None:
        stem = f"m{m}-r{r:g}-d{delta:g}-{repeat}"
        for stage in ("train", "repair"):
            save_checkpoint(outcome.checkpoints[stage], Path(checkpoint_dir) / f"{stem}-{stage}.pt")
    return outcome.as_dict()


def detectability_job(pool, oracle, config, m, r, delta, repeat, seed):
    detector = CalibratedDetector(detector_config_for(config, delta, seed))
    result = detectability_round(
        Distribution(pool, oracle, derive_seeds(seed).data),
        attack_spec(config),
        config["n"],
        m,
        r,
        detector,
        seed,
        train_cfg=train_config(config),
    )
    return {
        "correct": result.correct,
        "coin": result.coin,
        "prediction": result.prediction,
        "score": detector.last_score,
        "threshold": None if detector.last_calibration is None else detector.last_calibration.threshold,
        "report": None if detector.last_report is None else detector.last_report.as_dict(),
        "seeds": result.seeds,
    }


def efficiency_job(pool, oracle, config, m, delta, seed):
    points = data_efficiency(
        pool,
        oracle,
        attack_spec(config),
        config["defense"].get("method", "none"),
        config["sweep"]["r"],
        delta,
        config["n"],
        m,
        seed=seed,
        train_cfg=train_config(config),
        repair_cfg=repair_config(config, delta=delta),
        test_size=config["test_size"],
        eval_size=config["eval_size"],
    )
    return [point.as_dict() for point in points]


def gridsearch_job(pool, oracle, config, seed):
    sweep = config["sweep"]
    m, r, delta = sweep["m"][0], sweep["r"][0], sweep["delta"][0]
    seeds = derive_seeds(seed)
    distribution = Distribution(pool, oracle, seeds.data)
    spec = attack_spec(config, m=m, seed=seeds.attack)
    cfg = train_config(config).with_seed(seeds.training)
    surrogate = train_surrogate(distribution, spec, config["n"], cfg, seeds.attack, train)
    data, _, triggers = collect(distribution, spec, config["n"], m, seeds.attack, surrogate)
    init = build_model(data.class_count, data.image_size, seeds.init, data.images.shape[-1])
    suspect = train_suspect(spec, data, cfg, init, train, triggers)
    trust = distribution.draw_stratified(resolve_count(r, config["n"]))
    clean = distribution.draw(config["eval_size"])
    grid = config.get("grid_search") or {}
    defense = config["defense"]["method"]
    result = grid_search(
        defense,
        grid.get("space") or DEFAULT_SPACES[defense],
        suspect,
        trust,
        delta,
        base_cfg=repair_config(config, delta=delta),
        self_poison_steps=grid.get("self_poison_steps", 200),
        seed=seeds.defense,
        clean=clean,
    )
    return result.as_dict()


# Game runners. Each returns the list of failed jobs.


def _cell_seed(config, repeat):
    return member_seed_for(config["seed"], repeat)


def run_robustness(store, config, pool, oracle, max_workers):
    attack = config["attack"]
    jobs = [
        {
            "pool": pool,
            "oracle": oracle,
            "config": config,
            "m": int(m),
            "r": r,
            "delta": delta,
            "repeat": repeat,
            "seed": _cell_seed(config, repeat),
            "checkpoint_dir": str(store.directory / "checkpoints"),
        }
        for m, r, delta, repeat in sweep_cells(config)
    ]
    failures = []
    for result in run_jobs(robustness_job, jobs, max_workers):
        job = result.job
        columns = {
            "attack": attack["attack"],
            "defense": config["defense"].get("method", "none"),
            "m": job["m"],
            "b": attack.get("boost", 1),
            "delta": job["delta"],
            "repeat": job["repeat"],
            "seed": job["seed"],
        }
        if not result.ok:
            failures.append({**columns, "r": job["r"], "error": result.error})
            continue
        outcome = result.value
        trace = outcome.pop("trace")
        row = summary_row(
            columns["attack"], outcome["defense"], job["m"], columns["b"],
            resolve_count(job["r"], config["n"]), job["delta"], outcome["cda"], outcome["asr"],
            None, job["seed"], job["repeat"],
        )
        store.append("game", {**outcome, "row": row}, r=outcome["r"], **columns)
        if trace is not None:
            store.append("repair", trace, r=outcome["r"], **columns)
    return failures


def run_detectability(store, config, pool, oracle, max_workers):
    attack = config["attack"]
    sweep = config["sweep"]
    repeats, populations = config["repeats"], config["populations"]
    cells = list(itertools.product(sweep["m"], sweep["r"], sweep["delta"]))
    jobs = []
    for m, r, delta in cells:
        for population in range(populations):
            for repeat in range(repeats):
                seed = member_seed_for(config["seed"], population, repeat)
                jobs.append(
                    {
                        "pool": pool,
                        "oracle": oracle,
                        "attack": attack_spec(config),
                        "n": config["n"],
                        "m": int(m),
                        "r": r,
                        "scorers": scorers_for(config, delta, seed),
                        "seed": seed,
                        "train_cfg": train_config(config),
                        "test_size": config["test_size"],
                    }
                )
    results = iter(run_jobs(population_member, jobs, max_workers))

    failures = []
    for m, r, delta in cells:
        populations_members = []
        names = None
        for population in range(populations):
            members = []
            for repeat in range(repeats):
                result = next(results)
                names = list(result.job["scorers"])
                if result.ok:
                    members.append((repeat, result.job["seed"], result.value))
                else:
                    failures.append(
                        {"m": int(m), "r": r, "delta": delta, "repeat": repeat, "error": result.error}
                    )
            populations_members.append(members)
        if not all(populations_members):
            continue
        point = curve_point(m, [[member for _, _, member in ms] for ms in populations_members], names)
        primary = names[0]
        for population, members in enumerate(populations_members):
            auc = roc_auc(
                [member["poisoned"][primary] for _, _, member in members],
                [member["clean"][primary] for _, _, member in members],
            )
            for repeat, seed, member in members:
                row = summary_row(
                    attack["attack"], "none", int(m), attack.get("boost", 1),
                    resolve_count(r, config["n"]), delta, member["cda"], member["asr"],
                    auc, seed, population * repeats + repeat,
                )
                store.append(
                    "detectability",
                    {**member, "population": population, "row": row},
                    attack=attack["attack"], m=int(m), b=attack.get("boost", 1),
                    r=resolve_count(r, config["n"]), delta=delta,
                    repeat=population * repeats + repeat, seed=seed,
                )
        report = MetricReport(
            attack=attack["attack"],
            m=int(m),
            r=resolve_count(r, config["n"]),
            delta=delta,
            effectiveness=point.effectiveness,
            effectiveness_std=point.effectiveness_std,
            detectability=point.detectability[primary],
            detectability_std=point.detectability_std[primary],
            samples=len(point.asr_values),
        )
        store.append(
            "metric",
            {"report": report.as_dict(), "curve": point.as_dict()},
            attack=attack["attack"], m=int(m), r=resolve_count(r, config["n"]), delta=delta,
        )
    return failures


def run_detectability_game(store, config, pool, oracle, max_workers):
    attack = config["attack"]
    cells = sweep_cells(config)
    jobs = [
        {
            "pool": pool,
            "oracle": oracle,
            "config": config,
            "m": int(m),
            "r": r,
            "delta": delta,
            "repeat": repeat,
            "seed": _cell_seed(config, repeat),
        }
        for m, r, delta, repeat in cells
    ]
    failures = []
    by_cell = {}
    for result in run_jobs(detectability_job, jobs, max_workers):
        job = result.job
        columns = {
            "attack": attack["attack"],
            "m": job["m"],
            "b": attack.get("boost", 1),
            "r": resolve_count(job["r"], config["n"]),
            "delta": job["delta"],
            "repeat": job["repeat"],
            "seed": job["seed"],
        }
        if not result.ok:
            failures.append({**columns, "error": result.error})
            continue
        value = result.value
        report = value.pop("report")
        row = summary_row(
            attack["attack"], "none", job["m"], columns["b"],
            resolve_count(job["r"], config["n"]), job["delta"], None, None, None, job["seed"], job["repeat"],
        )
        store.append("detectability", {**value, "row": row}, **columns)
        if report is not None:
            store.append("anomaly", report, **columns)
        by_cell.setdefault((job["m"], job["r"], job["delta"]), []).append(value)

    for (m, r, delta), values in by_cell.items():
        backdoored = [v["score"] for v in values if v["coin"] == 0]
        clean = [v["score"] for v in values if v["coin"] == 1]
        auc = roc_auc(backdoored, clean) if backdoored and clean else None
        accuracy, accuracy_std = mean_std([v["correct"] for v in values])
        report = MetricReport(
            attack=attack["attack"], m=m, r=resolve_count(r, config["n"]), delta=delta,
            detectability=auc, samples=len(values),
        )
        store.append(
            "metric",
            {"report": report.as_dict(), "detect_accuracy": accuracy, "detect_accuracy_std": accuracy_std},
            attack=attack["attack"], m=m, r=resolve_count(r, config["n"]), delta=delta,
        )
    return failures


def run_data_efficiency(store, config, pool, oracle, max_workers):
    attack = config["attack"]
    defense = config["defense"].get("method", "none")
    sweep = config["sweep"]
    cells = list(itertools.product(sweep["m"], sweep["delta"], range(config["repeats"])))
    jobs = [
        {
            "pool": pool,
            "oracle": oracle,
            "config": config,
            "m": int(m),
            "delta": delta,
            "seed": _cell_seed(config, repeat),
        }
        for m, delta, repeat in cells
    ]
    failures = []
    values = {}
    for (m, delta, repeat), result in zip(cells, run_jobs(efficiency_job, jobs, max_workers)):
        columns = {
            "attack": attack["attack"],
            "defense": defense,
            "m": int(m),
            "b": attack.get("boost", 1),
            "delta": delta,
            "repeat": repeat,
            "seed": result.job["seed"],
        }
        if not result.ok:
            failures.append({**columns, "error": result.error})
            continue
        for r, point in zip(sweep["r"], result.value):
            trace = point.pop("trace")
            row = summary_row(
                attack["attack"], defense, int(m), columns["b"], resolve_count(r, config["n"]), delta,
                point["cda"], point["data_efficiency"], None, result.job["seed"], repeat,
            )
            store.append("repair", {**point, "trace": trace, "row": row}, r=point["r"], **columns)
            values.setdefault((int(m), r, delta), []).append(point["data_efficiency"])

    for (m, r, delta), upsilons in values.items():
        report = MetricReport(
            attack=attack["attack"], defense=defense, m=m, r=resolve_count(r, config["n"]), delta=delta,
            data_efficiency=mean_std(upsilons)[0], budget_used=delta, samples=len(upsilons),
        )
        store.append(
            "metric",
            {"report": report.as_dict(), "data_efficiency_std": mean_std(upsilons)[1]},
            attack=attack["attack"], defense=defense, m=m, delta=delta,
            r=resolve_count(r, config["n"]),
        )
    return failures


def run_gridsearch(store, config, pool, oracle, max_workers):
    sweep = config["sweep"]
    defense = config["defense"]["method"]
    seed = _cell_seed(config, 0)
    result = run_jobs(
        gridsearch_job, [{"pool": pool, "oracle": oracle, "config": config, "seed": seed}], max_workers
    )[0]
    if not result.ok:
        return [{"defense": defense, "error": result.error}]
    value = result.value
    r, delta = sweep["r"][0], sweep["delta"][0]
    for cell in value["cells"]:
        row = summary_row(
            "badnets", cell["method"], None, None, resolve_count(r, config["n"]), delta,
            cell["cda"], cell["asr"], None, seed, cell["index"],
        )
        store.append(
            "grid", {**cell, "row": row}, attack="badnets", defense=cell["method"],
            r=resolve_count(r, config["n"]), delta=delta, repeat=cell["index"], seed=seed,
        )
    store.append(
        "metric",
        {
            "best": value["best"],
            "infeasible": value["infeasible"],
            "self_poison_target": value["self_poison_target"],
            "self_poison_asr": value["self_poison_asr"],
        },
        defense=defense, delta=delta,
    )
    (store.directory / "best_config.json").write_text(
        json.dumps(value["best"], sort_keys=True, indent=2), encoding="utf-8"
    )
    if value["infeasible"]:
        logger.warning("Grid search for %s found no config within budget", defense)
    return []


GAME_RUNNERS = {
    "robustness": run_robustness,
    "detectability": run_detectability,
    "detectability-game": run_detectability_game,
    "data-efficiency": run_data_efficiency,
    "gridsearch": run_gridsearch,
}


@dataclass
class RunResult:
    run: ExperimentRun
    cached: bool = False
    failures: list = field(default_factory=list)


def run_experiment(config, force=False, max_workers=None):
    """
    Validate ``config`` and execute its sweep. A complete run with the same
    config hash is returned untouched unless ``force`` is set.
    """
    config = validate_config(config)
    digest = config_hash(config)
    directory = run_directory(digest)

    existing = ExperimentRun.objects.filter(config_hash=digest).first()
    if existing is not None:
        if existing.is_complete and not force:
            logger.info("Run %s is cached", digest[:12])
            return RunResult(existing, cached=True)
        existing.delete()
    for name in ("records", "checkpoints", "figures"):
        shutil.rmtree(directory / name, ignore_errors=True)
        (directory / name).mkdir(parents=True, exist_ok=True)
    (directory / "config").write_bytes(canonical_bytes(config))

    run = ExperimentRun.objects.create(
        config_hash=digest,
        code_hash=code_hash(),
        name=config["name"],
        game=config["game"],
        config=config,
        status=ExperimentRun.STATUS_RUNNING,
        output_dir=str(directory),
        started_at=timezone.now(),
    )
    started = time.monotonic()
    logger.info("Starting %s run %s in %s", config["game"], digest[:12], directory)

    store = RecordStore(run, directory)
    pool, oracle = dataset_for(config)
    failures = GAME_RUNNERS[config["game"]](store, config, pool, oracle, max_workers)

    calculator = RunSummaryCalculator(run)
    write_summary_csv(calculator.calculate_rows(), directory / "summary.csv")
    summary = calculator.calculate_all_statistics()
    summary["failures"] = failures
    run.summary = jsonable(summary)
    run.status = ExperimentRun.STATUS_INCOMPLETE if failures else ExperimentRun.STATUS_COMPLETE
    run.finished_at = timezone.now()
    run.wall_clock_seconds = time.monotonic() - started
    run.save()
    if failures:
        logger.warning("Run %s finished with %d failed job(s)", digest[:12], len(failures))
    else:
        logger.info("Run %s complete in %.1fs", digest[:12], run.wall_clock_seconds)
    return RunResult(run, cached=False, failures=failures)
