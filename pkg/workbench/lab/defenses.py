"""Registry of post-training defenses with a common call signature."""

import logging
from functools import partial

from .detection import DetectionConfig, nc_detect, repair_with_canary
from .repair import (
    RepairEvaluation,
    RepairTrace,
    fine_prune,
    nad,
    nc_repair,
    pivotal_tuning,
    weight_decay_finetune,
)

logger = logging.getLogger(__name__)


def identity_defense(suspect, trust, cfg, evaluation, pre_cda=None):
    pre_cda = evaluation.cda(suspect) if pre_cda is None else pre_cda
    trace = RepairTrace("none", pre_cda, cfg.delta)
    trace.add(0, pre_cda, evaluation.probe_asr(suspect), evaluation.report_asr(suspect))
    return suspect.clone(), trace


def neural_cleanse_defense(suspect, trust, cfg, evaluation, pre_cda=None, detect_on=None):
    """
    Reverse triggers for every class, then unlearn the flagged class's trigger.

    Triggers are reversed on ``detect_on`` when given; a canary copy would
    otherwise offer the defender's own patch as the smallest trigger.
    """
    detect_cfg = DetectionConfig(
        steps_per_class=cfg.nc_steps,
        learning_rate=cfg.nc_learning_rate,
        nc_lambda=cfg.nc_lambda,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
    )
    _, report = nc_detect(suspect if detect_on is None else detect_on, trust, detect_cfg)
    trigger = report.triggers[report.flagged_class]
    model, trace = nc_repair(suspect, trust, trigger, cfg, evaluation, pre_cda)
    trace.meta["flagged_class"] = report.flagged_class
    trace.meta["mask_norms"] = [float(n) for n in report.scores]
    return model, trace


DEFENSES = {
    "none": identity_defense,
    "pivotal-tuning": pivotal_tuning,
    "weight-decay": weight_decay_finetune,
    "fine-pruning": fine_prune,
    "nad": nad,
    "neural-cleanse": neural_cleanse_defense,
}


def run_defense(name, suspect, trust, cfg, evaluation=None, pre_cda=None):
    """
    Run the post-training defense ``name`` on ``suspect``.

    ``evaluation`` defaults to the trusted data itself; the games and the
    harness pass a separate evaluation split. Without a probe in
    ``evaluation`` every defense but ``none`` repairs a canary copy of the
    suspect so checkpoints are selected on the defender's own trigger.
    """
    try:
        defense = DEFENSES[name]
    except KeyError:
        raise ValueError(f"unknown defense {name!r}; choose from {sorted(DEFENSES)}") from None
    evaluation = evaluation or RepairEvaluation(clean=trust)
    if name == "none":
        model, trace = defense(suspect, trust, cfg, evaluation, pre_cda=pre_cda)
    else:
        if name == "neural-cleanse":
            defense = partial(defense, detect_on=suspect)
        model, trace = repair_with_canary(defense, suspect, trust, cfg, evaluation, pre_cda)
    logger.info(
        "Defense %s finished: selected step %d, %s",
        name,
        trace.selected_step,
        trace.halting_reason,
    )
    return model, trace
