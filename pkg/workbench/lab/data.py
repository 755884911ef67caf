"""
Datasets, ground-truth oracle and seeded sampling.

Images are float32 arrays of shape (N, H, W, C) in [0, 1]. Every sample keeps
the index of the pool image it was generated from (``source_index``), which
is how the oracle recovers the generating label even after a trigger has been
stamped on a copy.
"""

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import InsufficientSamplesError, InvalidDatasetError

logger = logging.getLogger(__name__)

# Smallest image that still hosts a 3-pixel patch with room around it.
MIN_IMAGE_SIZE = 8


class Provenance(enum.IntEnum):
    CLEAN = 0
    PAYLOAD = 1
    REGULARIZATION = 2


@dataclass
class LabeledSet:
    """Images with labels, provenance flags and pool lineage."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: np.ndarray = None
    source_index: np.ndarray = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.provenance is None:
            self.provenance = np.full(len(self.labels), Provenance.CLEAN, np.int8)
        else:
            self.provenance = np.asarray(self.provenance, dtype=np.int8)
        if self.source_index is None:
            self.source_index = np.arange(len(self.labels), dtype=np.int64)
        else:
            self.source_index = np.asarray(self.source_index, dtype=np.int64)
        self.validate()

    def validate(self):
        n = len(self.images)
        if self.images.ndim != 4:
            raise InvalidDatasetError("images must have shape (N, H, W, C)")
        if len(self.labels) != n or len(self.provenance) != n:
            raise InvalidDatasetError(
                "labels and provenance must align with images "
                f"({len(self.labels)}/{len(self.provenance)} vs {n})"
            )
        if len(self.source_index) != n:
            raise InvalidDatasetError("source_index must align with images")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise InvalidDatasetError("pixel values must lie in [0, 1]")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidDatasetError(
                f"labels must lie in [0, {self.class_count - 1}]"
            )

    def __len__(self):
        return len(self.labels)

    @property
    def image_size(self):
        return self.images.shape[1]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def poisoned(self):
        return self.provenance != Provenance.CLEAN

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledSet(
            images=self.images[indices],
            labels=self.labels[indices],
            class_count=self.class_count,
            provenance=self.provenance[indices],
            source_index=self.source_index[indices],
        )

    def with_labels(self, labels):
        return LabeledSet(
            images=self.images,
            labels=labels,
            class_count=self.class_count,
            provenance=self.provenance,
            source_index=self.source_index,
        )

    def with_images(self, images):
        return LabeledSet(
            images=images,
            labels=self.labels,
            class_count=self.class_count,
            provenance=self.provenance,
            source_index=self.source_index,
        )

    def class_indices(self, label):
        return np.flatnonzero(self.labels == label)

    @classmethod
    def concatenate(cls, *parts):
        parts = [part for part in parts if part is not None]
        if not parts:
            raise InvalidDatasetError("nothing to concatenate")
        class_count = parts[0].class_count
        if any(part.class_count != class_count for part in parts):
            raise InvalidDatasetError("cannot mix datasets with different classes")
        return cls(
            images=np.concatenate([part.images for part in parts]),
            labels=np.concatenate([part.labels for part in parts]),
            class_count=class_count,
            provenance=np.concatenate([part.provenance for part in parts]),
            source_index=np.concatenate([part.source_index for part in parts]),
        )

    @classmethod
    def empty_like(cls, other):
        return cls(
            images=np.zeros((0, *other.image_shape), np.float32),
            labels=np.zeros(0, np.int64),
            class_count=other.class_count,
        )


@dataclass
class Oracle:
    """Ground-truth labelling function over the generating pool."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.int64)

    def predict(self, data):
        return self.table[data.source_index]

    def __call__(self, data):
        return self.predict(data)


@dataclass(frozen=True)
class SeedBundle:
    master: int
    data: int
    init: int
    training: int
    attack: int
    defense: int

    def as_dict(self):
        return {
            "master": self.master,
            "data": self.data,
            "init": self.init,
            "training": self.training,
            "attack": self.attack,
            "defense": self.defense,
        }


def derive_seeds(master):
    """Split one master seed into independent per-stage sub-seeds."""
    children = np.random.SeedSequence(int(master)).spawn(5)
    data, init, training, attack, defense = (
        int(child.generate_state(1)[0]) for child in children
    )
    return SeedBundle(int(master), data, init, training, attack, defense)


def generate_synthetic_dataset(classes, per_class, image_size, seed, channels=3,
                               noise=0.08, grid=4):
    """
    Draw a balanced synthetic classification set.

    Each class owns a fixed random low-frequency pattern (a ``grid`` x ``grid``
    colour field upsampled bilinearly); samples add Gaussian pixel noise and
    are clipped to [0, 1].
    """
    if classes < 2:
        raise InvalidDatasetError("need at least two classes")
    if image_size < MIN_IMAGE_SIZE:
        raise InvalidDatasetError(
            f"image_size={image_size} is too small to host a 3-pixel patch "
            f"trigger (minimum {MIN_IMAGE_SIZE})"
        )
    if per_class < 1:
        raise InvalidDatasetError("per_class must be positive")

    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.1, 0.9, size=(classes, grid, grid, channels))
    zoom = image_size / grid
    signatures = np.clip(
        ndimage.zoom(coarse, (1, zoom, zoom, 1), order=1, mode="nearest"), 0.0, 1.0
    )

    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = signatures[labels] + rng.normal(0.0, noise, size=(len(labels),) + signatures.shape[1:])
    images = np.clip(images, 0.0, 1.0).astype(np.float32)

    data = LabeledSet(images=images, labels=labels, class_count=classes)
    logger.debug(
        "Generated synthetic set: %d classes x %d, %dpx, seed=%s",
        classes,
        per_class,
        image_size,
        seed,
    )
    return data, Oracle(labels.copy())


@dataclass
class Distribution:
    """
    A finite pool sampled without replacement within one game.

    ``draw`` never returns an index that was handed out before, which keeps
    training, trusted, evaluation and test draws disjoint.
    """

    pool: LabeledSet
    oracle: Oracle
    seed: int
    used: set = field(default_factory=set)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    @property
    def class_count(self):
        return self.pool.class_count

    def available(self, classes=None):
        mask = np.ones(len(self.pool), dtype=bool)
        if self.used:
            mask[np.fromiter(self.used, dtype=np.int64)] = False
        if classes is not None:
            mask &= np.isin(self.oracle.table[self.pool.source_index], list(classes))
        return np.flatnonzero(mask)

    def _take(self, indices):
        self.used.update(int(i) for i in indices)
        return self.pool.subset(indices)

    def draw(self, n, classes=None):
        """Draw ``n`` unused samples, optionally restricted to oracle classes."""
        candidates = self.available(classes)
        if n > len(candidates):
            raise InsufficientSamplesError(
                f"requested {n} samples but only {len(candidates)} remain"
                + (f" in classes {sorted(classes)}" if classes is not None else "")
            )
        chosen = np.sort(self.rng.choice(candidates, size=n, replace=False))
        return self._take(chosen)

    def draw_stratified(self, n):
        """Draw ``n`` samples spread as evenly as possible over all classes."""
        classes = self.class_count
        base, extra = divmod(int(n), classes)
        order = self.rng.permutation(classes)
        chosen = []
        for rank, label in enumerate(order):
            count = base + (1 if rank < extra else 0)
            if count == 0:
                continue
            candidates = self.available([int(label)])
            if count > len(candidates):
                raise InsufficientSamplesError(
                    f"class {label} has only {len(candidates)} unused samples",
                    missing=[int(label)],
                )
            chosen.append(self.rng.choice(candidates, size=count, replace=False))
        indices = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)
        return self._take(indices)


def resolve_count(value, total):
    """Interpret ``value`` as a fraction of ``total`` when it is below one."""
    if isinstance(value, float) and 0 < value < 1:
        return max(1, int(round(value * total)))
    return int(value)


def holdout_split(data, fraction, seed):
    """
    Split ``data`` per class into ``(fit, held)``. Each class gives
    ``floor(fraction * count)`` samples to ``held`` but keeps at least one in
    ``fit``; ``held`` is empty when the set is too small to spare any.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    held = []
    for label in range(data.class_count):
        members = np.flatnonzero(data.labels == label)
        count = min(int(fraction * len(members)), len(members) - 1)
        if count > 0:
            held.append(rng.choice(members, size=count, replace=False))
    held = np.sort(np.concatenate(held)) if held else np.zeros(0, np.int64)
    keep = np.setdiff1d(np.arange(len(data)), held)
    return data.subset(keep), data.subset(held)


def save_dataset(data, path, meta=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "images.npy", data.images)
    np.save(path / "labels.npy", data.labels)
    np.save(path / "provenance.npy", data.provenance)
    np.save(path / "source_index.npy", data.source_index)
    payload = {"class_count": data.class_count, **(meta or {})}
    (path / "meta.json").write_text(json.dumps(payload, sort_keys=True, indent=2))
    return path


def load_dataset(path):
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    data = LabeledSet(
        images=np.load(path / "images.npy"),
        labels=np.load(path / "labels.npy"),
        class_count=meta["class_count"],
        provenance=np.load(path / "provenance.npy"),
        source_index=np.load(path / "source_index.npy"),
    )
    return data, meta
