"""
Model repair: Pivotal Tuning with the soft latent orthogonalization loss,
and the fine-tuning baselines (weight decay, fine-pruning, attention
distillation, Neural Cleanse unlearning).

Every method fine-tunes a clone of the suspect model under the same budget
loop: the clean accuracy on an evaluation split is checked every
``eval_every`` steps, the run halts the first time it drops more than
``delta`` below the pre-defense accuracy, and the returned parameters are
the in-budget checkpoint with the lowest probe ASR.
"""

import copy
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch.nn import functional as F

from .exceptions import InsufficientSamplesError, MissingProbeError
from .network import ModelHandle, accuracy, to_images, to_tensor
from .training import BatchSampler, StratifiedBatchSampler, build_optimizer, check_finite
from .triggers import apply_trigger

logger = logging.getLogger(__name__)

STEPS_EXHAUSTED = "steps-exhausted"
BUDGET_HIT = "delta-budget-hit"


@dataclass(frozen=True)
class RepairConfig:
    method: str = "pivotal-tuning"
    steps: int = 300
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    momentum: float = 0.9
    batch_size: int = 64
    slol_lambda: float = 0.05
    param_lambda: float = 1.0
    weight_decay: float = 0.01
    prune_rate: float = 0.9
    teacher_steps: int = 200
    attention_power: int = 2
    attention_lambda: float = 1000.0
    nc_steps: int = 100
    nc_lambda: float = 2e-2
    nc_learning_rate: float = 0.1
    delta: float = 0.02
    eval_every: int = 25
    probe_steps: int = 100
    probe_boost: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in (
            "slol_lambda",
            "param_lambda",
            "weight_decay",
            "attention_lambda",
            "nc_lambda",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.prune_rate <= 1.0:
            raise ValueError("prune_rate must lie in [0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if min(self.steps, self.teacher_steps, self.nc_steps, self.probe_steps) < 0:
            raise ValueError("step counts must be non-negative")
        if self.probe_boost < 1:
            raise ValueError("probe_boost must be at least 1")

    def as_dict(self):
        return asdict(self)

    def with_values(self, **values):
        return replace(self, **values)


# Full-scale operating points; a defense section opts in with "reference": true.
REFERENCE_CONFIGS = {
    "pivotal-tuning": RepairConfig(
        method="pivotal-tuning", steps=2000, learning_rate=0.01, slol_lambda=0.05,
        param_lambda=20000, batch_size=128,
    ),
    "weight-decay": RepairConfig(method="weight-decay", weight_decay=0.01),
    "fine-pruning": RepairConfig(method="fine-pruning", prune_rate=0.96),
    "nad": RepairConfig(
        method="nad", teacher_steps=1000, attention_power=2, attention_lambda=1000
    ),
    "neural-cleanse": RepairConfig(method="neural-cleanse", nc_steps=100, nc_lambda=2e-2),
}


@dataclass
class RepairEvaluation:
    """
    What the budget loop measures: ``clean`` drives the CDA budget, ``probe``
    (a self-poisoned set) drives checkpoint selection and ``report`` (the
    attacker's true trigger) is recorded for reporting only.
    """

    clean: object
    probe: object = None
    report: object = None

    def cda(self, model):
        return accuracy(self.clean, self.clean.labels, model)

    def probe_asr(self, model):
        if self.probe is None:
            return None
        return accuracy(self.probe, self.probe.labels, model)

    def report_asr(self, model):
        if self.report is None:
            return None
        return accuracy(self.report, self.report.labels, model)

    def with_probe(self, probe):
        return replace(self, probe=probe)


@dataclass
class RepairTrace:
    method: str
    pre_cda: float
    delta: float
    records: list = field(default_factory=list)
    halting_reason: str = STEPS_EXHAUSTED
    selected_step: int = 0
    fallback: bool = False
    meta: dict = field(default_factory=dict)

    def add(self, step, cda, asr_probe=None, asr=None, **losses):
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("trace steps must increase")
        record = {
            "step": int(step),
            "cda": float(cda),
            "asr_probe": None if asr_probe is None else float(asr_probe),
            "asr": None if asr is None else float(asr),
            "in_budget": bool(cda >= self.pre_cda - self.delta - 1e-12),
        }
        record.update({key: float(value) for key, value in losses.items()})
        self.records.append(record)
        return record

    @property
    def selected(self):
        for record in self.records:
            if record["step"] == self.selected_step:
                return record
        return None

    def to_records(self):
        return [
            {**record, "method": self.method, "selected": record["step"] == self.selected_step}
            for record in self.records
        ]

    def as_dict(self):
        return {
            "method": self.method,
            "pre_cda": self.pre_cda,
            "delta": self.delta,
            "halting_reason": self.halting_reason,
            "selected_step": self.selected_step,
            "fallback": self.fallback,
            "meta": self.meta,
            "records": self.records,
        }


def _better(candidate, incumbent):
    """Lower probe ASR wins; ties go to the later step."""
    if incumbent is None:
        return True
    return candidate["asr_probe"] <= incumbent["asr_probe"]


def budgeted_finetune(model, pre_cda, cfg, evaluation, objective, method,
                      after_step=None, armed=True, meta=None):
    """
    Minimize ``objective(step)`` on ``model`` in place under the CDA budget.

    ``objective`` returns a dict of scalar tensors with a ``total`` entry;
    ``after_step`` runs after every optimizer step. With ``armed=False`` the
    budget only starts halting once an in-budget evaluation has been seen.
    Returns ``(trace, ok)``; ``model`` holds the selected parameters
    afterwards and ``ok`` is False when no evaluation was in budget.
    """
    if evaluation.probe is None:
        raise MissingProbeError(f"{method} needs a self-poison probe set to select a checkpoint")
    module = model.module
    trace = RepairTrace(method, pre_cda, cfg.delta, meta=dict(meta or {}))
    best_record, best_state = None, None

    def evaluate(step, losses):
        nonlocal best_record, best_state, armed
        module.eval()
        record = trace.add(
            step,
            evaluation.cda(model),
            evaluation.probe_asr(model),
            evaluation.report_asr(model),
            **{f"loss_{k}": v.item() for k, v in losses.items()},
        )
        module.train()
        if record["in_budget"]:
            armed = True
            if _better(record, best_record):
                best_record = record
                best_state = copy.deepcopy(module.state_dict())
            return False
        return armed

    with torch.no_grad():
        module.eval()
        initial = objective(0)
    evaluate(0, initial)

    optimizer = build_optimizer(module.parameters(), cfg.optimizer, cfg.learning_rate, cfg.momentum)
    module.train()
    for step in range(1, cfg.steps + 1):
        optimizer.zero_grad()
        losses = objective(step)
        losses["total"].backward()
        check_finite(losses["total"], module, step, trace=trace)
        optimizer.step()
        if after_step is not None:
            after_step()
        if step % cfg.eval_every == 0 or step == cfg.steps:
            if evaluate(step, losses):
                trace.halting_reason = BUDGET_HIT
                logger.info(
                    "%s halted at step %d: CDA %.4f below budget %.4f",
                    method, step, trace.records[-1]["cda"], pre_cda - cfg.delta,
                )
                break
    module.eval()

    if best_record is None:
        trace.fallback = True
        logger.warning("%s never stayed within the CDA budget; keeping the suspect model", method)
        return trace, False
    module.load_state_dict(best_state)
    trace.selected_step = best_record["step"]
    return trace, True


def _finish(pivot, model, trace, ok):
    if not ok:
        return pivot.clone(), trace
    return model, trace


def _identity(pivot, cfg, evaluation, method, pre_cda):
    trace = RepairTrace(method, pre_cda, cfg.delta)
    trace.add(
        0,
        pre_cda,
        evaluation.probe_asr(pivot),
        evaluation.report_asr(pivot),
    )
    return pivot.clone(), trace


def _module(model):
    return model.module if isinstance(model, ModelHandle) else model


def centroids(model, images, labels, class_count=None):
    """
    Per-class mean latent vectors, shape (classes, latent_dim).

    Gradients flow through the latents when called with grad enabled.
    """
    module = _module(model)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    class_count = class_count or getattr(model, "class_count", None) or int(labels.max()) + 1
    latent = module.latents(to_tensor(images))
    return latent_centroids(latent, labels, class_count)


def latent_centroids(latent, labels, class_count):
    counts = torch.bincount(labels, minlength=class_count)
    missing = torch.nonzero(counts == 0).flatten().tolist()
    if missing:
        raise InsufficientSamplesError(f"no samples for classes {missing}", missing=missing)
    one_hot = F.one_hot(labels, class_count).to(latent.dtype)
    return (one_hot.T @ latent) / counts.to(latent.dtype)[:, None]


def _cosine(a, b):
    zero = (a.norm(dim=-1) == 0) | (b.norm(dim=-1) == 0)
    if bool(zero.any()):
        logger.warning("zero-norm vector in SLOL cosine; treating %d term(s) as 0", int(zero.sum()))
    return torch.where(zero, torch.zeros_like(zero, dtype=a.dtype), F.cosine_similarity(a, b, dim=-1))


def orthogonality(frozen_centroids, repaired_centroids):
    """
    Sum over class pairs i < j of cos(C_i - C_j, C'_i - C'_j) + cos(C'_i, C'_j),
    where C are the frozen and C' the repaired centroids.
    """
    frozen = torch.as_tensor(frozen_centroids)
    repaired = torch.as_tensor(repaired_centroids)
    if frozen.shape != repaired.shape:
        raise ValueError(f"centroid shapes differ: {tuple(frozen.shape)} vs {tuple(repaired.shape)}")
    i, j = torch.triu_indices(len(frozen), len(frozen), offset=1)
    direction = _cosine(frozen[i] - frozen[j], repaired[i] - repaired[j])
    within = _cosine(repaired[i], repaired[j])
    return direction.sum() + within.sum()


def slol(frozen, trainable, images, labels, class_count=None):
    """Orthogonality between the frozen and trainable centroids; grads reach ``trainable`` only."""
    class_count = class_count or getattr(frozen, "class_count", None)
    with torch.no_grad():
        frozen_c = centroids(frozen, images, labels, class_count)
    return orthogonality(frozen_c, centroids(trainable, images, labels, class_count))


def parameter_distance(frozen, trainable):
    """L2 norm of the difference of all parameters flattened into one vector."""
    squared = sum(
        (p - q.detach()).pow(2).sum()
        for p, q in zip(_module(trainable).parameters(), _module(frozen).parameters())
    )
    # clamp keeps the sqrt gradient finite where the two models coincide
    return torch.where(squared > 0, torch.sqrt(squared.clamp(min=1e-30)), torch.zeros_like(squared))


def _evaluation_baseline(pivot, evaluation):
    return evaluation.cda(pivot)


def pivotal_tuning(pivot, trust, cfg, evaluation, pre_cda=None):
    """
    Fine-tune a clone of ``pivot`` on trusted data with
    CE + slol_lambda * SLOL + param_lambda * ||pivot - model||.
    """
    pre_cda = _evaluation_baseline(pivot, evaluation) if pre_cda is None else pre_cda
    if cfg.steps == 0:
        return _identity(pivot, cfg, evaluation, "pivotal-tuning", pre_cda)
    model = pivot.clone()
    module = model.module
    batches = StratifiedBatchSampler(trust, cfg.batch_size, cfg.seed)
    class_count = trust.class_count

    def objective(step):
        x, y = next(batches)
        ce = F.cross_entropy(module(x), y)
        loss_slol = slol(pivot, model, x, y, class_count)
        loss_param = parameter_distance(pivot, model)
        total = ce + cfg.slol_lambda * loss_slol + cfg.param_lambda * loss_param
        return {"total": total, "ce": ce, "slol": loss_slol, "param": loss_param}

    trace, ok = budgeted_finetune(model, pre_cda, cfg, evaluation, objective, "pivotal-tuning")
    return _finish(pivot, model, trace, ok)


def weight_decay_finetune(pivot, trust, cfg, evaluation, pre_cda=None):
    """Fine-tune with CE + weight_decay * sum of squared parameters."""
    pre_cda = _evaluation_baseline(pivot, evaluation) if pre_cda is None else pre_cda
    if cfg.steps == 0:
        return _identity(pivot, cfg, evaluation, "weight-decay", pre_cda)
    model = pivot.clone()
    module = model.module
    batches = BatchSampler(trust, cfg.batch_size, cfg.seed)

    def objective(step):
        x, y = next(batches)
        ce = F.cross_entropy(module(x), y)
        decay = sum(p.pow(2).sum() for p in module.parameters())
        return {"total": ce + cfg.weight_decay * decay, "ce": ce, "wd": decay}

    trace, ok = budgeted_finetune(model, pre_cda, cfg, evaluation, objective, "weight-decay")
    return _finish(pivot, model, trace, ok)


def channel_activations(model, images, batch_size=256):
    """Mean absolute activation of every channel of the last conv layer."""
    module = _module(model)
    captured = []
    hook = module.last_conv.register_forward_hook(
        lambda _module, _inputs, output: captured.append(
            output.detach().abs().mean(dim=(0, 2, 3)) * len(output)
        )
    )
    tensor = to_tensor(images)
    try:
        module.eval()
        with torch.no_grad():
            for start in range(0, len(tensor), batch_size):
                module(tensor[start : start + batch_size])
    finally:
        hook.remove()
    return (torch.stack(captured).sum(dim=0) / len(tensor)).numpy()


def select_prune_channels(activations, rate):
    """Indices of the ``floor(rate * channels)`` channels with the lowest activation."""
    activations = np.asarray(activations)
    count = int(rate * len(activations))
    return np.sort(np.argsort(activations, kind="stable")[:count])


def prune_channels(model, channels):
    conv = _module(model).last_conv
    with torch.no_grad():
        conv.weight[channels] = 0.0
        conv.bias[channels] = 0.0


def fine_prune(pivot, trust, cfg, evaluation, pre_cda=None):
    """
    Zero the ``prune_rate`` fraction of last-conv channels with the lowest
    mean activation on trusted data, then fine-tune with the channels held at
    zero. The budget arms at the first in-budget evaluation.
    """
    pre_cda = _evaluation_baseline(pivot, evaluation) if pre_cda is None else pre_cda
    if cfg.steps == 0:
        return _identity(pivot, cfg, evaluation, "fine-pruning", pre_cda)
    model = pivot.clone()
    module = model.module
    pruned = select_prune_channels(channel_activations(model, trust.images), cfg.prune_rate)
    index = torch.as_tensor(pruned, dtype=torch.long)
    prune_channels(model, index)
    batches = BatchSampler(trust, cfg.batch_size, cfg.seed)

    def objective(step):
        x, y = next(batches)
        ce = F.cross_entropy(module(x), y)
        return {"total": ce, "ce": ce}

    trace, ok = budgeted_finetune(
        model,
        pre_cda,
        cfg,
        evaluation,
        objective,
        "fine-pruning",
        after_step=lambda: prune_channels(model, index),
        armed=False,
        meta={"pruned_channels": pruned.tolist()},
    )
    return _finish(pivot, model, trace, ok)


def attention_map(features, power=2):
    """L2-normalized map of sum over channels of |F|^p, flattened per sample."""
    return F.normalize(features.abs().pow(power).sum(dim=1).flatten(1), dim=1)


def attention_loss(student_blocks, teacher_blocks, power=2):
    """Sum over blocks of the batch-mean L2 distance between attention maps."""
    return sum(
        (attention_map(s, power) - attention_map(t, power)).norm(dim=1).mean()
        for s, t in zip(student_blocks, teacher_blocks)
    )


def nad(pivot, trust, cfg, evaluation, pre_cda=None):
    """
    Attention distillation: a teacher cloned from ``pivot`` is fine-tuned for
    ``teacher_steps`` on trusted data, then the student is fine-tuned with
    CE + attention_lambda * attention alignment to the teacher.
    """
    pre_cda = _evaluation_baseline(pivot, evaluation) if pre_cda is None else pre_cda
    if cfg.steps == 0:
        return _identity(pivot, cfg, evaluation, "nad", pre_cda)
    teacher = pivot.clone()
    teacher_module = teacher.module
    teacher_batches = BatchSampler(trust, cfg.batch_size, cfg.seed + 1)
    optimizer = build_optimizer(
        teacher_module.parameters(), cfg.optimizer, cfg.learning_rate, cfg.momentum
    )
    teacher_module.train()
    for step in range(cfg.teacher_steps):
        x, y = next(teacher_batches)
        optimizer.zero_grad()
        loss = F.cross_entropy(teacher_module(x), y)
        loss.backward()
        check_finite(loss, teacher_module, step)
        optimizer.step()
    teacher_module.eval()

    model = pivot.clone()
    module = model.module
    batches = BatchSampler(trust, cfg.batch_size, cfg.seed)

    def objective(step):
        x, y = next(batches)
        blocks = module.feature_blocks(x)
        ce = F.cross_entropy(module.head(module.latent(blocks[-1])), y)
        if cfg.attention_lambda == 0:
            return {"total": ce, "ce": ce, "at": torch.zeros(())}
        with torch.no_grad():
            teacher_blocks = teacher_module.feature_blocks(x)
        at = attention_loss(blocks, teacher_blocks, cfg.attention_power)
        return {"total": ce + cfg.attention_lambda * at, "ce": ce, "at": at}

    trace, ok = budgeted_finetune(
        model, pre_cda, cfg, evaluation, objective, "nad", meta={"teacher_steps": cfg.teacher_steps}
    )
    return _finish(pivot, model, trace, ok)


def nc_repair(pivot, trust, trigger, cfg, evaluation, pre_cda=None):
    """
    Unlearning with a reversed trigger: steps 1, 3, 5, ... train on triggered
    trusted images with their true labels, the others on clean images.
    """
    pre_cda = _evaluation_baseline(pivot, evaluation) if pre_cda is None else pre_cda
    if cfg.steps == 0:
        return _identity(pivot, cfg, evaluation, "neural-cleanse", pre_cda)
    model = pivot.clone()
    module = model.module
    batches = BatchSampler(trust, cfg.batch_size, cfg.seed)
    triggered = {"count": 0}

    def objective(step):
        x, y = next(batches)
        if step > 0 and (step - 1) % 2 == 0:
            x = to_tensor(apply_trigger(to_images(x), trigger))
            triggered["count"] += 1
        ce = F.cross_entropy(module(x), y)
        return {"total": ce, "ce": ce}

    trace, ok = budgeted_finetune(model, pre_cda, cfg, evaluation, objective, "neural-cleanse")
    trace.meta["triggered_batches"] = triggered["count"]
    return _finish(pivot, model, trace, ok)
