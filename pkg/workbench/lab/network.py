"""
The desk-scale classifier and the handle the rest of the workbench passes around.

The network splits into a latent extractor (everything up to the penultimate
layer) and a linear head, so ``head(latents(x))`` is the full forward pass.
"""

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import LabeledSet, Oracle
from .exceptions import ArchitectureMismatchError, EmptyInputError

logger = logging.getLogger(__name__)

ARCHITECTURE_ID = "smallconv-v1"
LATENT_DIM = 64
EVAL_BATCH_SIZE = 256


class SmallConvNet(nn.Module):
    """Four conv layers in two pooled blocks, a latent layer and a linear head."""

    def __init__(self, class_count=10, image_size=16, channels=3, latent_dim=LATENT_DIM):
        super().__init__()
        self.block1 = nn.Sequential(
            nn.Conv2d(channels, 16, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(32, 64, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, 64, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        pooled = image_size // 4
        self.latent = nn.Sequential(
            nn.Flatten(),
            nn.Linear(64 * pooled * pooled, latent_dim),
            nn.ReLU(),
        )
        self.head = nn.Linear(latent_dim, class_count)

    @property
    def last_conv(self):
        return self.block2[2]

    def feature_blocks(self, x):
        first = self.block1(x)
        second = self.block2(first)
        return [first, second]

    def latents(self, x):
        return self.latent(self.block2(self.block1(x)))

    def forward(self, x):
        return self.head(self.latents(x))


def to_tensor(images):
    """NHWC numpy images to an NCHW float tensor."""
    if isinstance(images, LabeledSet):
        images = images.images
    if isinstance(images, torch.Tensor):
        return images
    array = np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2))
    return torch.from_numpy(array)


def to_images(tensor):
    return tensor.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)


@dataclass
class ModelHandle:
    """
    A classifier with the metadata needed to rebuild, compare and checkpoint it.

    ``trainable_mask`` optionally restricts updates to a subset of parameter
    entries (name -> boolean tensor of the parameter's shape).
    """

    module: SmallConvNet
    class_count: int
    image_size: int
    channels: int = 3
    latent_dim: int = LATENT_DIM
    architecture: str = ARCHITECTURE_ID
    seeds: dict = field(default_factory=dict)
    attack: dict = None
    trainable_mask: dict = None

    def __post_init__(self):
        self.module.eval()

    def clone(self):
        return ModelHandle(
            module=copy.deepcopy(self.module),
            class_count=self.class_count,
            image_size=self.image_size,
            channels=self.channels,
            latent_dim=self.latent_dim,
            architecture=self.architecture,
            seeds=dict(self.seeds),
            attack=copy.deepcopy(self.attack),
            trainable_mask=copy.deepcopy(self.trainable_mask),
        )

    def named_parameters(self):
        return self.module.named_parameters()

    def parameter_count(self):
        return sum(p.numel() for p in self.module.parameters())

    def flat_parameters(self):
        return torch.cat([p.detach().reshape(-1) for p in self.module.parameters()])

    def check_compatible(self, other):
        mine = (self.architecture, self.class_count, self.image_size, self.channels)
        theirs = (other.architecture, other.class_count, other.image_size, other.channels)
        if mine != theirs:
            raise ArchitectureMismatchError(
                f"architecture {theirs} does not match expected {mine}"
            )

    @torch.no_grad()
    def _batched(self, images, fn):
        tensor = to_tensor(images)
        self.module.eval()
        outputs = [fn(tensor[i : i + EVAL_BATCH_SIZE]) for i in range(0, len(tensor), EVAL_BATCH_SIZE)]
        if not outputs:
            return torch.zeros((0,))
        return torch.cat(outputs)

    def logits(self, images):
        return self._batched(images, self.module).numpy()

    def latents(self, images):
        return self._batched(images, self.module.latents).numpy()

    def head(self, latents):
        with torch.no_grad():
            return self.module.head(torch.as_tensor(latents, dtype=torch.float32)).numpy()

    def predict(self, images):
        if len(images) == 0:
            return np.zeros(0, dtype=np.int64)
        return self._batched(images, lambda x: self.module(x).argmax(dim=1)).numpy().astype(np.int64)


def build_model(class_count, image_size, seed, channels=3, latent_dim=LATENT_DIM):
    """Build a freshly initialized model; the init depends only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        module = SmallConvNet(class_count, image_size, channels, latent_dim)
    handle = ModelHandle(
        module=module,
        class_count=class_count,
        image_size=image_size,
        channels=channels,
        latent_dim=latent_dim,
        seeds={"init": int(seed)},
    )
    logger.debug("Built %s with %d parameters", ARCHITECTURE_ID, handle.parameter_count())
    return handle


def latents(images, model):
    return model.latents(images)


def predict(images, model_or_oracle):
    if isinstance(model_or_oracle, Oracle):
        if not isinstance(images, LabeledSet):
            raise TypeError("the oracle labels LabeledSet samples, not bare arrays")
        return model_or_oracle.predict(images)
    if isinstance(images, LabeledSet) and not isinstance(model_or_oracle, ModelHandle):
        return np.asarray(model_or_oracle.predict(images.images))
    return np.asarray(model_or_oracle.predict(images))


def accuracy(images, labels, model_or_oracle):
    """Exact fraction of predictions that equal ``labels``."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyInputError("accuracy of an empty set is undefined")
    if len(images) != len(labels):
        raise ValueError(f"{len(labels)} labels for {len(images)} images")
    predictions = predict(images, model_or_oracle)
    return float(np.mean(predictions == labels))
