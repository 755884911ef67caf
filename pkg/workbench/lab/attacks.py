"""
Data-poisoning attacks and the code-poisoning PCB training loop.

``poison`` returns the clean data joined with ``m * b`` injected samples;
which samples are selected and how they are labelled depends on the
attack's label rule (poison-label attacks relabel non-target samples,
clean-label attacks only trigger samples that already belong to the target
class).
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch.nn import functional as F

from .data import LabeledSet, Provenance
from .exceptions import InsufficientSamplesError
from .network import to_tensor
from .training import (
    BatchSampler,
    TrainConfig,
    build_optimizer,
    build_scheduler,
    check_finite,
)
from .triggers import (
    a_blend_trigger,
    a_patch_side,
    a_patch_trigger,
    apply_trigger,
    badnets_trigger,
    blend,
    craft_adv_trigger,
    make_refool_trigger,
    make_wanet_trigger,
    occlusion_mask,
    stamp_patch,
    tsb_triggers,
)

logger = logging.getLogger(__name__)

POISON_LABEL = "poison-label"
CLEAN_LABEL = "clean-label"
CODE_POISONING = "code-poisoning"


@dataclass(frozen=True)
class AttackInfo:
    name: str
    label_rule: str
    adaptive: bool = False
    description: str = ""


ATTACKS = {
    "badnets": AttackInfo("badnets", POISON_LABEL, description="checker patch stamped top-left"),
    "c-badnets": AttackInfo("c-badnets", CLEAN_LABEL, description="BadNets on target-class samples"),
    "a-blend": AttackInfo("a-blend", POISON_LABEL, True, "occluded full-image blend"),
    "a-patch": AttackInfo("a-patch", POISON_LABEL, True, "occluded patch"),
    "advclean": AttackInfo("advclean", CLEAN_LABEL, description="targeted PGD via a surrogate"),
    "refool": AttackInfo("refool", CLEAN_LABEL, description="reflection ghosting"),
    "wanet": AttackInfo("wanet", CLEAN_LABEL, description="smooth image warping"),
    "tsb": AttackInfo("tsb", POISON_LABEL, True, "scattered trigger segments"),
    "pcb": AttackInfo("pcb", CODE_POISONING, True, "parameter-controlled training loop"),
}


@dataclass(frozen=True)
class AttackSpec:
    attack: str = "badnets"
    target_class: int = 0
    poison_count: int = 0
    boost: int = 1
    occlusion_grid: int = 4
    occlusion_rate: float = 0.5
    conservatism_ratio: float = None
    alpha: float = 0.3
    epsilon: float = 8 / 255
    pgd_steps: int = 4
    refool_intensity: float = 1.0
    wanet_strength: float = 1.5
    tsb_k: int = 8
    pcb_fraction: float = 0.05
    pcb_steps: int = None
    replace: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}; choose from {sorted(ATTACKS)}")
        if self.poison_count < 0:
            raise ValueError("poison_count must be non-negative")
        if self.boost < 1:
            raise ValueError("boost must be at least 1")
        if self.conservatism_ratio is None:
            object.__setattr__(self, "conservatism_ratio", 0.5 if self.adaptive_split else 1.0)
        if not 0.0 <= self.conservatism_ratio <= 1.0:
            raise ValueError("conservatism_ratio must lie in [0, 1]")
        if self.tsb_k < 1:
            raise ValueError("tsb_k must be at least 1")
        if not 0.0 < self.pcb_fraction <= 1.0:
            raise ValueError("pcb_fraction must lie in (0, 1]")

    @property
    def info(self):
        return ATTACKS[self.attack]

    @property
    def label_rule(self):
        return self.info.label_rule

    @property
    def adaptive_split(self):
        return self.attack in ("a-blend", "a-patch")

    def payload_count(self):
        """round(ratio * m), ties rounded up."""
        return int(math.floor(self.conservatism_ratio * self.poison_count + 0.5))

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in values.items() if key in known})


@dataclass
class PoisonResult:
    data: LabeledSet
    triggers: list
    injected_indices: np.ndarray
    selected_indices: np.ndarray
    label_rule: str
    spec: AttackSpec = None
    occlusions: list = field(default_factory=list)

    @property
    def injected(self):
        return self.data.subset(self.injected_indices)


def _streams(seed):
    trigger_seq, select_seq, inject_seq = np.random.SeedSequence(int(seed)).spawn(3)
    return (
        np.random.default_rng(trigger_seq),
        np.random.default_rng(select_seq),
        np.random.default_rng(inject_seq),
    )


def build_triggers(spec, image_size, channels=3, data=None, oracle=None, surrogate=None):
    """The trigger(s) an attack stamps; deterministic in ``spec.seed``."""
    rng, _, _ = _streams(spec.seed)
    seed = int(rng.integers(2**31))
    if spec.attack in ("badnets", "c-badnets", "pcb"):
        return [badnets_trigger(image_size, channels)]
    if spec.attack == "a-blend":
        return [a_blend_trigger(image_size, channels, seed, alpha=spec.alpha)]
    if spec.attack == "a-patch":
        return [a_patch_trigger(image_size, channels, seed)]
    if spec.attack == "tsb":
        return tsb_triggers(image_size, spec.tsb_k, seed, channels)
    if spec.attack == "wanet":
        return [make_wanet_trigger(image_size, seed, spec.wanet_strength)]
    if spec.attack == "advclean":
        if surrogate is None:
            raise ValueError("advclean needs a surrogate model")
        return [craft_adv_trigger(surrogate, spec.target_class, spec.epsilon, spec.pgd_steps)]
    if spec.attack == "refool":
        if data is None or oracle is None:
            raise ValueError("refool draws its reflection from labelled data")
        others = np.flatnonzero(oracle.predict(data) != spec.target_class)
        if len(others) == 0:
            raise InsufficientSamplesError("refool needs one non-target image as reflection")
        reflection = data.images[int(rng.choice(others))]
        return [make_refool_trigger(reflection, spec.refool_intensity)]
    raise ValueError(f"no trigger for attack {spec.attack!r}")


def tsb_poison(image, y_target, triggers, mode, rng=None):
    """
    Inject mode stamps one uniformly chosen segment; exploit mode stamps all
    of them in index order (later segments win where they overlap).
    """
    if mode == "inject":
        rng = np.random.default_rng() if rng is None else rng
        chosen = triggers[int(rng.integers(len(triggers)))]
        return stamp_patch(image, chosen), int(y_target)
    if mode == "exploit":
        out = image
        for trigger in triggers:
            out = stamp_patch(out, trigger)
        return out, int(y_target)
    raise ValueError(f"unknown TSB mode {mode!r}")


def inject(samples, spec, triggers, rng=None, oracle_labels=None):
    """
    Trigger ``samples`` as the attack does at training time.

    Returns the triggered images, their labels, provenance flags and the
    per-sample occlusion masks (adaptive attacks only).
    """
    rng = _streams(spec.seed)[2] if rng is None else rng
    count = len(samples)
    images = samples.images
    oracle_labels = samples.labels if oracle_labels is None else oracle_labels
    occlusions = []
    trigger = triggers[0]

    if spec.attack == "a-patch":
        side = a_patch_side(samples.image_size)
        out = np.empty_like(images)
        for i in range(count):
            mask = occlusion_mask(side, spec.occlusion_grid, spec.occlusion_rate, int(rng.integers(2**31)))
            occlusions.append(mask)
            out[i] = stamp_patch(images[i], trigger, mask=mask)
    elif spec.attack == "a-blend":
        out = np.empty_like(images)
        for i in range(count):
            mask = occlusion_mask(
                samples.image_size, spec.occlusion_grid, spec.occlusion_rate, int(rng.integers(2**31))
            )
            occlusions.append(mask)
            out[i] = blend(images[i], trigger, mask=mask)
    elif spec.attack == "tsb":
        out = np.empty_like(images)
        for i in range(count):
            out[i], _ = tsb_poison(images[i], spec.target_class, triggers, "inject", rng)
    elif count:
        out = apply_trigger(images, trigger)
    else:
        out = images.copy()

    if spec.label_rule == CLEAN_LABEL:
        labels = np.asarray(oracle_labels, dtype=np.int64).copy()
        provenance = np.full(count, Provenance.PAYLOAD, np.int8)
    elif spec.adaptive_split:
        payload = min(spec.payload_count(), count)
        order = rng.permutation(count)
        labels = np.asarray(oracle_labels, dtype=np.int64).copy()
        provenance = np.full(count, Provenance.REGULARIZATION, np.int8)
        labels[order[:payload]] = spec.target_class
        provenance[order[:payload]] = Provenance.PAYLOAD
    else:
        labels = np.full(count, spec.target_class, np.int64)
        provenance = np.full(count, Provenance.PAYLOAD, np.int8)
    return out, labels, provenance, occlusions


def poison(data, oracle, spec, triggers=None, surrogate=None):
    """
    Select ``spec.poison_count`` eligible samples, trigger them and append
    ``boost`` bit-identical copies of each to the data.

    With ``spec.replace`` the selected clean originals are dropped so the
    class histogram of the clean part is unchanged by the attack.
    """
    if triggers is None:
        triggers = build_triggers(spec, data.image_size, data.images.shape[-1], data, oracle, surrogate)
    m = spec.poison_count
    empty = np.zeros(0, np.int64)
    if m == 0 or spec.label_rule == CODE_POISONING:
        return PoisonResult(data, triggers, empty, empty, spec.label_rule, spec)

    _, select_rng, inject_rng = _streams(spec.seed)
    truth = oracle.predict(data)
    if spec.label_rule == CLEAN_LABEL:
        eligible = np.flatnonzero(truth == spec.target_class)
    else:
        eligible = np.flatnonzero(truth != spec.target_class)
    if m > len(eligible):
        raise InsufficientSamplesError(
            f"{spec.attack} needs {m} eligible samples but only {len(eligible)} exist "
            f"({spec.label_rule}, target {spec.target_class})",
            missing=[spec.target_class] if spec.label_rule == CLEAN_LABEL else [],
        )
    selected = np.sort(select_rng.choice(eligible, size=m, replace=False))
    chosen = data.subset(selected)
    images, labels, provenance, occlusions = inject(
        chosen, spec, triggers, inject_rng, oracle_labels=truth[selected]
    )

    repeat = spec.boost
    injected = LabeledSet(
        images=np.repeat(images, repeat, axis=0),
        labels=np.repeat(labels, repeat),
        class_count=data.class_count,
        provenance=np.repeat(provenance, repeat),
        source_index=np.repeat(chosen.source_index, repeat),
    )
    if spec.replace:
        keep = np.setdiff1d(np.arange(len(data)), selected)
        clean = data.subset(keep)
    else:
        clean = data
    result = LabeledSet.concatenate(clean, injected)
    injected_indices = np.arange(len(clean), len(result), dtype=np.int64)
    logger.info(
        "Poisoned %d samples with %s (boost %d, %s)", m, spec.attack, repeat, spec.label_rule
    )
    return PoisonResult(result, triggers, injected_indices, selected, spec.label_rule, spec, occlusions)


def apply_test_trigger(images, spec, triggers):
    """The full trigger used to measure ASR: no occlusion, every TSB segment."""
    if spec.attack == "tsb":
        out = images
        for trigger in triggers:
            out = stamp_patch(out, trigger)
        return out
    return apply_trigger(images, triggers[0])


def triggered_test_set(test, spec, triggers, trigger_fn=None):
    """Every test image triggered and labelled with the target class."""
    trigger_fn = trigger_fn or (lambda images: apply_test_trigger(images, spec, triggers))
    return LabeledSet(
        images=trigger_fn(test.images),
        labels=np.full(len(test), spec.target_class, np.int64),
        class_count=test.class_count,
        provenance=np.full(len(test), Provenance.PAYLOAD, np.int8),
        source_index=test.source_index,
    )


def segment_test_sets(test, spec, triggers):
    """One triggered test set per TSB segment (a single segment stamped)."""
    return [
        triggered_test_set(test, spec, [trigger], trigger_fn=lambda x, t=trigger: stamp_patch(x, t))
        for trigger in triggers
    ]


def sample_parameter_mask(module, fraction, seed):
    """Uniformly choose ``fraction`` of all parameter entries (biases included)."""
    params = list(module.named_parameters())
    total = sum(p.numel() for _, p in params)
    count = max(1, int(round(fraction * total)))
    generator = torch.Generator().manual_seed(int(seed))
    flat = torch.zeros(total, dtype=torch.bool)
    flat[torch.randperm(total, generator=generator)[:count]] = True
    masks, offset = {}, 0
    for name, p in params:
        masks[name] = flat[offset : offset + p.numel()].reshape(p.shape)
        offset += p.numel()
    return masks


def pcb_train(model, data, y_target, p_frac, steps, trigger, cfg=None, poison_lr=1e-3, seed=0):
    """
    Parameter-controlled backdoor training.

    Iterations run i = 1..steps. Even iterations update only the sampled
    parameter subset on triggered images labelled ``y_target``; odd
    iterations update every parameter on clean batches. Returns a new handle
    whose ``trainable_mask`` records the poisoned subset.
    """
    model = model.clone()
    module = model.module
    masks = sample_parameter_mask(module, p_frac, seed)
    model.trainable_mask = masks
    if steps == 0:
        return model

    cfg = cfg or TrainConfig(
        steps=steps, optimizer="adam", learning_rate=1e-3, weight_decay=0.0, schedule="constant"
    )
    named = dict(module.named_parameters())
    clean_optimizer = build_optimizer(
        named.values(), cfg.optimizer, cfg.learning_rate, cfg.momentum, cfg.weight_decay
    )
    scheduler = build_scheduler(clean_optimizer, cfg.schedule, (steps + 1) // 2)
    poison_optimizer = torch.optim.Adam(named.values(), lr=poison_lr)
    clean_batches = BatchSampler(data, cfg.batch_size, seed)
    poison_batches = BatchSampler(data, cfg.batch_size, seed + 1)

    module.train()
    for i in range(1, steps + 1):
        if i % 2 == 0:
            x, _ = next(poison_batches)
            stamped = apply_trigger(x.numpy().transpose(0, 2, 3, 1), trigger)
            x = to_tensor(stamped)
            y = torch.full((len(x),), int(y_target), dtype=torch.long)
            snapshot = {name: p.detach().clone() for name, p in named.items()}
            poison_optimizer.zero_grad()
            loss = F.cross_entropy(module(x), y)
            loss.backward()
            for name, p in named.items():
                if p.grad is not None:
                    p.grad.mul_(masks[name])
            check_finite(loss, module, i)
            poison_optimizer.step()
            with torch.no_grad():
                for name, p in named.items():
                    p.copy_(torch.where(masks[name], p, snapshot[name]))
        else:
            x, y = next(clean_batches)
            clean_optimizer.zero_grad()
            loss = F.cross_entropy(module(x), y)
            loss.backward()
            check_finite(loss, module, i)
            clean_optimizer.step()
            if scheduler is not None:
                scheduler.step()
    module.eval()
    model.attack = {"attack": "pcb", "p_frac": p_frac, "steps": steps, "target_class": int(y_target)}
    logger.info("PCB trained %d steps on %.3f of the parameters", steps, p_frac)
    return model
