"""
Backdoor detection by trigger reversal.

Neural Cleanse reverses a mask/pattern trigger per class and flags the class
whose mask is anomalously small. Calibrated trigger inversion reverses a
trigger per class that flips the suspect model but not a pivotally-tuned
copy of it, and scores the success-rate gap between the two.
"""

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch.nn import functional as F

from .data import LabeledSet, Provenance, holdout_split
from .exceptions import DivergenceError
from .network import accuracy
from .repair import RepairConfig, RepairEvaluation, pivotal_tuning
from .training import BatchSampler, TrainConfig, train
from .triggers import Trigger, apply_trigger, checker_pattern, patch_side

logger = logging.getLogger(__name__)

MAD_SCALE = 1.4826
MAD_FLOOR = 1e-12


@dataclass(frozen=True)
class DetectionConfig:
    steps_per_class: int = 100
    learning_rate: float = 0.1
    nc_lambda: float = 2e-2
    batch_size: int = 64
    self_poison_steps: int = 200
    self_poison_target: int = None
    calibration_pairs: int = 1
    holdout_fraction: float = 0.4
    seed: int = 0
    repair: RepairConfig = field(default_factory=RepairConfig)

    def __post_init__(self):
        if self.steps_per_class < 0:
            raise ValueError("steps_per_class must be non-negative")
        if self.nc_lambda < 0:
            raise ValueError("nc_lambda must be non-negative")
        if self.calibration_pairs < 1:
            raise ValueError("calibration_pairs must be at least 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")

    def as_dict(self):
        return asdict(self)


@dataclass
class AnomalyReport:
    method: str
    scores: list
    flagged_class: int
    headline: float
    triggers: list = field(default_factory=list, repr=False)
    success_rates: list = None
    meta: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "method": self.method,
            "scores": [float(s) for s in self.scores],
            "flagged_class": int(self.flagged_class),
            "headline": float(self.headline),
            "success_rates": None if self.success_rates is None else [float(s) for s in self.success_rates],
            "meta": self.meta,
        }


def _init_trigger_params(image_shape, seed):
    generator = torch.Generator().manual_seed(int(seed))
    height, width, channels = image_shape
    mask = (torch.rand((1, 1, height, width), generator=generator) * 2 - 1).requires_grad_(True)
    pattern = (torch.rand((1, channels, height, width), generator=generator) * 2 - 1).requires_grad_(True)
    return mask, pattern


def stamp_soft(x, mask_param, pattern_param):
    """(1 - m) * x + m * p with m, p squashed to (0, 1)."""
    mask = torch.sigmoid(mask_param)
    pattern = torch.sigmoid(pattern_param)
    return (1 - mask) * x + mask * pattern


def to_trigger(mask_param, pattern_param, name):
    mask = torch.sigmoid(mask_param).detach()[0].permute(1, 2, 0).numpy()
    pattern = torch.sigmoid(pattern_param).detach()[0].permute(1, 2, 0).numpy()
    return Trigger(rule="blend", pattern=pattern, mask=mask, opacity=1.0, name=name)


def nc_objective(module, x, mask_param, pattern_param, target_class, nc_lambda):
    target = torch.full((len(x),), int(target_class), dtype=torch.long)
    ce = F.cross_entropy(module(stamp_soft(x, mask_param, pattern_param)), target)
    return ce + nc_lambda * torch.sigmoid(mask_param).abs().sum()


def cnc_objective(pivot_module, repaired_module, x, y, mask_param, pattern_param,
                  target_class, nc_lambda):
    stamped = stamp_soft(x, mask_param, pattern_param)
    target = torch.full((len(x),), int(target_class), dtype=torch.long)
    flip = F.cross_entropy(pivot_module(stamped), target)
    keep = F.cross_entropy(repaired_module(stamped), y)
    return flip + keep + nc_lambda * torch.sigmoid(mask_param).abs().sum()


def _optimize_trigger(objective, image_shape, steps, lr, seed, name, modules):
    mask_param, pattern_param = _init_trigger_params(image_shape, seed)
    optimizer = torch.optim.Adam([mask_param, pattern_param], lr=lr, betas=(0.5, 0.9))
    for module in modules:
        module.eval()
        module.requires_grad_(False)
    try:
        for step in range(steps):
            optimizer.zero_grad()
            loss = objective(mask_param, pattern_param)
            loss.backward()
            if not (torch.isfinite(loss) and torch.isfinite(mask_param.grad).all()
                    and torch.isfinite(pattern_param.grad).all()):
                raise DivergenceError(f"non-finite trigger gradient at step {step}", step=step)
            optimizer.step()
    finally:
        for module in modules:
            module.requires_grad_(True)
    return to_trigger(mask_param, pattern_param, name)


def _reversal_images(trust, target_class):
    others = trust.labels != target_class
    return trust.subset(np.flatnonzero(others)) if others.any() else trust


def nc_reverse(model, trust, target_class, steps=100, lr=0.1, nc_lambda=2e-2, seed=0, batch_size=64):
    """Reverse a mask/pattern trigger that pushes trusted images into ``target_class``."""
    source = _reversal_images(trust, target_class)
    batches = BatchSampler(source, batch_size, seed)

    def objective(mask_param, pattern_param):
        x, _ = next(batches)
        return nc_objective(model.module, x, mask_param, pattern_param, target_class, nc_lambda)

    return _optimize_trigger(
        objective, trust.image_shape, steps, lr, seed, f"nc-{target_class}", [model.module]
    )


def forced_success_rate(model, images, trigger, target_class):
    stamped = apply_trigger(images, trigger)
    return float(np.mean(model.predict(stamped) == target_class))


def robust_z(norms):
    """(median - min) / (1.4826 * MAD); 0 when every norm is identical."""
    norms = np.asarray(norms, dtype=np.float64)
    median = np.median(norms)
    mad = np.median(np.abs(norms - median))
    spread = MAD_SCALE * max(mad, MAD_FLOOR)
    return float((median - norms.min()) / spread)


def nc_detect(model, trust, cfg=None):
    """Reverse one trigger per class; the headline is the robust z of the smallest mask."""
    cfg = cfg or DetectionConfig()
    triggers, norms, rates = [], [], []
    for target in range(model.class_count):
        trigger = nc_reverse(
            model, trust, target, cfg.steps_per_class, cfg.learning_rate, cfg.nc_lambda,
            seed=cfg.seed + target, batch_size=cfg.batch_size,
        )
        triggers.append(trigger)
        norms.append(trigger.mask_l1())
        rates.append(forced_success_rate(model, _reversal_images(trust, target).images, trigger, target))
    headline = robust_z(norms)
    report = AnomalyReport(
        method="nc",
        scores=norms,
        flagged_class=int(np.argmin(norms)),
        headline=headline,
        triggers=triggers,
        success_rates=rates,
        meta={"steps": cfg.steps_per_class, "lr": cfg.learning_rate, "nc_lambda": cfg.nc_lambda},
    )
    logger.info("Neural Cleanse flagged class %d (z=%.3f)", report.flagged_class, headline)
    return headline, report


def cnc(pivot, trust, test=None, cfg=None, repaired=None, evaluation=None):
    """
    Calibrated trigger inversion.

    ``pivot`` is pivotally tuned once; for every class a trigger is reversed
    that sends images to that class under the pivot while the repaired model
    keeps their true labels. The class score is
    Acc(test + T -> c; pivot) - Acc(test + T -> true label; repaired) and the
    headline is the maximum over classes.

    Without ``test``, ``holdout_fraction`` of every class in ``trust`` is held
    out: it drives the repair budget and the scores, the rest is tuned and
    reversed on.
    """
    cfg = cfg or DetectionConfig()
    fit = trust
    if test is None:
        fit, test = holdout_split(trust, cfg.holdout_fraction, cfg.seed)
        if len(test) == 0:
            logger.warning("%d trusted samples leave nothing to hold out; CNC evaluates on them", len(trust))
            fit, test = trust, trust
    trace = None
    if repaired is None:
        evaluation = evaluation or RepairEvaluation(clean=test)
        repaired, trace = repair_with_canary(pivotal_tuning, pivot, fit, cfg.repair, evaluation)

    batches = BatchSampler(fit, cfg.batch_size, cfg.seed)
    triggers, scores = [], []
    for target in range(pivot.class_count):

        def objective(mask_param, pattern_param, target=target):
            x, y = next(batches)
            return cnc_objective(
                pivot.module, repaired.module, x, y, mask_param, pattern_param, target, cfg.nc_lambda
            )

        trigger = _optimize_trigger(
            objective, fit.image_shape, cfg.steps_per_class, cfg.learning_rate,
            cfg.seed + target, f"cnc-{target}", [pivot.module, repaired.module],
        )
        stamped = apply_trigger(test.images, trigger)
        flipped = accuracy(stamped, np.full(len(test), target), pivot)
        kept = accuracy(stamped, test.labels, repaired)
        triggers.append(trigger)
        scores.append(flipped - kept)
    headline = float(max(scores))
    report = AnomalyReport(
        method="cnc",
        scores=scores,
        flagged_class=int(np.argmax(scores)),
        headline=headline,
        triggers=triggers,
        meta={
            "steps": cfg.steps_per_class,
            "lr": cfg.learning_rate,
            "nc_lambda": cfg.nc_lambda,
            "held_out": len(test),
            "repair_selected_step": None if trace is None else trace.selected_step,
            "repair_halting_reason": None if trace is None else trace.halting_reason,
        },
    )
    logger.info("CNC flagged class %d (score=%.3f)", report.flagged_class, headline)
    return headline, report


def defender_trigger(image_size, channels=3):
    """The defender's own patch: an inverted checker in the bottom-right corner."""
    side = patch_side(image_size)
    return Trigger(
        rule="stamp",
        pattern=1.0 - checker_pattern(side, channels),
        location=(image_size - side, image_size - side),
        name="self-poison",
    )


def self_poison_probe(trust, trigger, target_class):
    """Non-target trusted images stamped with the defender trigger, labelled ``target_class``."""
    source = _reversal_images(trust, target_class)
    return LabeledSet(
        images=apply_trigger(source.images, trigger),
        labels=np.full(len(source), target_class, np.int64),
        class_count=trust.class_count,
        provenance=np.full(len(source), Provenance.PAYLOAD, np.int8),
        source_index=source.source_index,
    )


def self_poison(suspect, trust, steps=200, target_class=None, seed=0, boost=5, learning_rate=0.01):
    """
    Fine-tune ``suspect`` on trusted data plus BadNets samples carrying the
    defender's trigger. Returns the self-poisoned model, the trigger and the
    triggered probe set used to measure its ASR.
    """
    rng = np.random.default_rng(seed)
    target_class = int(rng.integers(trust.class_count)) if target_class is None else int(target_class)
    trigger = defender_trigger(trust.image_size, trust.images.shape[-1])
    candidates = np.flatnonzero(trust.labels != target_class)
    chosen = np.sort(rng.choice(candidates, size=max(1, len(candidates) // 2), replace=False))
    payload = self_poison_probe(trust.subset(chosen), trigger, target_class)
    boosted = payload.subset(np.repeat(np.arange(len(payload)), boost))
    cfg = TrainConfig(
        steps=steps, optimizer="sgd", learning_rate=learning_rate, weight_decay=0.0,
        schedule="constant", batch_size=64, seed=seed,
    )
    model = train(LabeledSet.concatenate(trust, boosted), cfg, init=suspect)
    return model, trigger, self_poison_probe(trust, trigger, target_class)


def self_clean(suspect, trust, steps=200, seed=0, learning_rate=0.01):
    cfg = TrainConfig(
        steps=steps, optimizer="sgd", learning_rate=learning_rate, weight_decay=0.0,
        schedule="constant", batch_size=64, seed=seed,
    )
    return train(trust, cfg, init=suspect)


def canary_evaluation(suspect, trust, evaluation, cfg):
    """
    Plant the defender's trigger in a copy of ``suspect`` with ``cfg.probe_steps``
    self-poisoning steps on ``trust``. Returns the canary, ``evaluation`` with a
    probe of held-out ``evaluation.clean`` images carrying that trigger, and a
    summary for the repair trace.
    """
    target = int(np.random.default_rng(cfg.seed).integers(trust.class_count))
    canary, trigger, _ = self_poison(
        suspect, trust, steps=cfg.probe_steps, target_class=target, seed=cfg.seed, boost=cfg.probe_boost
    )
    probe = self_poison_probe(evaluation.clean, trigger, target)
    evaluation = evaluation.with_probe(probe)
    meta = {
        "target_class": target,
        "steps": cfg.probe_steps,
        "asr": evaluation.probe_asr(canary),
        "cda": evaluation.cda(canary),
    }
    logger.info("Canary for %s: target %d, probe ASR %.3f", cfg.method, target, meta["asr"])
    return canary, evaluation, meta


def repair_with_canary(repair_fn, suspect, trust, cfg, evaluation, pre_cda=None):
    """
    Run ``repair_fn`` under the budget with checkpoint selection on a probe.

    When ``evaluation`` has no probe, the repair runs on a canary copy of
    ``suspect`` (see ``canary_evaluation``) and the budget stays anchored on
    the suspect's CDA. If no checkpoint stays in budget the suspect itself is
    returned.
    """
    pre_cda = evaluation.cda(suspect) if pre_cda is None else pre_cda
    if evaluation.probe is not None or cfg.steps == 0:
        return repair_fn(suspect, trust, cfg, evaluation, pre_cda=pre_cda)
    canary, evaluation, meta = canary_evaluation(suspect, trust, evaluation, cfg)
    model, trace = repair_fn(canary, trust, cfg, evaluation, pre_cda=pre_cda)
    trace.meta["canary"] = meta
    if trace.fallback:
        model = suspect.clone()
    return model, trace


@dataclass
class Calibration:
    threshold: float
    clean_scores: list
    poisoned_scores: list

    def as_dict(self):
        return asdict(self)


def detector_threshold_calibration(suspect, trust, cfg=None):
    """
    Fit a CNC decision threshold from self-built models: ``calibration_pairs``
    self-clean and self-poisoned fine-tunes of ``suspect`` are scored and the
    threshold is the midpoint of the two mean scores.
    """
    cfg = cfg or DetectionConfig()
    clean_scores, poisoned_scores = [], []
    for pair in range(cfg.calibration_pairs):
        seed = cfg.seed + 1000 * (pair + 1)
        clean = self_clean(suspect, trust, cfg.self_poison_steps, seed)
        poisoned, _, _ = self_poison(
            suspect, trust, cfg.self_poison_steps, cfg.self_poison_target, seed
        )
        pair_cfg = replace(cfg, seed=seed)
        clean_scores.append(cnc(clean, trust, cfg=pair_cfg)[0])
        poisoned_scores.append(cnc(poisoned, trust, cfg=pair_cfg)[0])
    threshold = 0.5 * (float(np.mean(clean_scores)) + float(np.mean(poisoned_scores)))
    if np.mean(poisoned_scores) <= np.mean(clean_scores):
        logger.warning(
            "Self-poisoned models do not score above self-clean ones (%.3f <= %.3f)",
            np.mean(poisoned_scores),
            np.mean(clean_scores),
        )
    return Calibration(threshold, clean_scores, poisoned_scores)


class CalibratedDetector:
    """
    Binary detector for the detectability game: 0 means backdoored, 1 clean.

    Without a fixed ``threshold`` each call first calibrates on the model it
    is asked about.
    """

    method = "cnc"

    def __init__(self, cfg=None, threshold=None):
        self.cfg = cfg or DetectionConfig()
        self.threshold = threshold
        self.last_score = None
        self.last_report = None
        self.last_calibration = None

    def score(self, model, trust):
        headline, self.last_report = cnc(model, trust, cfg=self.cfg)
        return headline

    def __call__(self, model, trust):
        threshold = self.threshold
        if threshold is None:
            self.last_calibration = detector_threshold_calibration(model, trust, self.cfg)
            threshold = self.last_calibration.threshold
        self.last_score = self.score(model, trust)
        return 0 if self.last_score > threshold else 1


class ConstantDetector:
    def __init__(self, answer=0):
        self.answer = int(answer)

    def __call__(self, model, trust):
        return self.answer
