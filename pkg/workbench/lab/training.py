"""Seeded training loop, batch samplers and trainer presets."""

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch.nn import functional as F

from .exceptions import (
    ArchitectureMismatchError,
    DivergenceError,
    EmptyInputError,
    InsufficientSamplesError,
)
from .network import build_model, to_tensor

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    epochs: int = None
    optimizer: str = "sgd"
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    schedule: str = "cosine"
    seed: int = 0
    loss: str = "ce"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.loss != "ce":
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.steps < 0 or (self.epochs is not None and self.epochs < 0):
            raise ValueError("steps and epochs must be non-negative")

    def total_steps(self, sample_count):
        if self.epochs is None:
            return self.steps
        return self.epochs * math.ceil(sample_count / self.batch_size)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def as_dict(self):
        return asdict(self)


# Reference regimes: training from scratch on a CIFAR-10-sized task and
# fine-tuning a pre-trained ImageNet model. "desk" is what the games use.
PRESETS = {
    "cifar10": TrainConfig(
        epochs=120,
        optimizer="sgd",
        learning_rate=0.1,
        momentum=0.9,
        weight_decay=5e-4,
        batch_size=128,
        schedule="cosine",
    ),
    "imagenet-finetune": TrainConfig(
        epochs=10,
        optimizer="sgd",
        learning_rate=1e-4,
        momentum=0.9,
        weight_decay=1e-4,
        batch_size=128,
        schedule="constant",
    ),
    "desk": TrainConfig(),
}


def preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown trainer preset {name!r}; choose from {sorted(PRESETS)}"
        ) from None
    return replace(base, **overrides)


class BatchSampler:
    """Endless shuffled mini-batches, reshuffled every epoch from one generator."""

    def __init__(self, data, batch_size, seed):
        if len(data) == 0:
            raise EmptyInputError("cannot sample batches from an empty set")
        self.images = to_tensor(data)
        self.labels = torch.as_tensor(data.labels, dtype=torch.long)
        self.batch_size = min(batch_size, len(data))
        self.generator = torch.Generator().manual_seed(int(seed))
        self._order = None
        self._cursor = 0

    def __iter__(self):
        return self

    def __next__(self):
        if self._order is None or self._cursor + self.batch_size > len(self._order):
            self._order = torch.randperm(len(self.labels), generator=self.generator)
            self._cursor = 0
        index = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self.images[index], self.labels[index]


class StratifiedBatchSampler:
    """
    Mini-batches that contain at least one sample of every class.

    Each batch takes ``per_class`` random samples of every class (with
    replacement inside a class when it is smaller than ``per_class``).
    """

    def __init__(self, data, batch_size, seed):
        if len(data) == 0:
            raise EmptyInputError("cannot sample batches from an empty set")
        missing = [c for c in range(data.class_count) if not np.any(data.labels == c)]
        if missing:
            raise InsufficientSamplesError(
                f"classes {missing} have no trusted samples", missing=missing
            )
        self.images = to_tensor(data)
        self.labels = torch.as_tensor(data.labels, dtype=torch.long)
        self.per_class = max(1, batch_size // data.class_count)
        self.by_class = [torch.nonzero(self.labels == c).flatten() for c in range(data.class_count)]
        self.generator = torch.Generator().manual_seed(int(seed))

    def __iter__(self):
        return self

    def __next__(self):
        picks = []
        for members in self.by_class:
            if len(members) >= self.per_class:
                chosen = torch.randperm(len(members), generator=self.generator)[: self.per_class]
            else:
                chosen = torch.randint(len(members), (self.per_class,), generator=self.generator)
            picks.append(members[chosen])
        index = torch.cat(picks)
        return self.images[index], self.labels[index]


def build_optimizer(parameters, optimizer, learning_rate, momentum=0.9, weight_decay=0.0):
    parameters = list(parameters)
    if optimizer == "adam":
        return torch.optim.Adam(parameters, lr=learning_rate, weight_decay=weight_decay)
    return torch.optim.SGD(
        parameters, lr=learning_rate, momentum=momentum, weight_decay=weight_decay
    )


def build_scheduler(optimizer, schedule, total_steps):
    if schedule == "cosine" and total_steps > 0:
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)
    return None


def check_finite(loss, module, step, trace=None):
    """Raise DivergenceError if the loss or any gradient is not finite."""
    if not torch.isfinite(loss).all():
        raise DivergenceError(f"non-finite loss at step {step}", step=step, trace=trace)
    norms = [p.grad.detach().norm() for p in module.parameters() if p.grad is not None]
    if norms and not torch.isfinite(torch.stack(norms)).all():
        raise DivergenceError(f"non-finite gradient at step {step}", step=step, trace=trace)


def train(data, cfg, init=None, init_seed=None):
    """
    Train a classifier on ``data`` and return a new ModelHandle.

    With ``init`` the model is fine-tuned from a copy of it (the handle itself
    is never modified); otherwise a fresh model is built from ``init_seed``
    (defaults to ``cfg.seed``).
    """
    if len(data) == 0:
        raise EmptyInputError("cannot train on an empty set")
    if init is None:
        model = build_model(
            data.class_count,
            data.image_size,
            cfg.seed if init_seed is None else init_seed,
            channels=data.images.shape[-1],
        )
    else:
        if init.class_count != data.class_count or init.image_size != data.image_size:
            raise ArchitectureMismatchError(
                f"init model ({init.class_count} classes, {init.image_size}px) does not "
                f"match data ({data.class_count} classes, {data.image_size}px)"
            )
        model = init.clone()
    model.seeds["training"] = int(cfg.seed)

    total = cfg.total_steps(len(data))
    if total == 0:
        return model

    module = model.module
    optimizer = build_optimizer(
        module.parameters(), cfg.optimizer, cfg.learning_rate, cfg.momentum, cfg.weight_decay
    )
    scheduler = build_scheduler(optimizer, cfg.schedule, total)
    batches = BatchSampler(data, cfg.batch_size, cfg.seed)

    module.train()
    for step in range(total):
        x, y = next(batches)
        optimizer.zero_grad()
        loss = F.cross_entropy(module(x), y)
        loss.backward()
        check_finite(loss, module, step)
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
        if step % 500 == 0:
            logger.debug("train step %d/%d loss=%.4f", step, total, loss.item())
    module.eval()
    logger.info("Trained %d steps on %d samples", total, len(data))
    return model
