"""Checkpoint files: a torch-saved dict of ``state_dict`` plus a metadata block."""

import json
import logging
from pathlib import Path

import torch

from .exceptions import ArchitectureMismatchError
from .network import ARCHITECTURE_ID, SmallConvNet, ModelHandle

logger = logging.getLogger(__name__)


def checkpoint_metadata(model):
    return {
        "architecture": model.architecture,
        "class_count": model.class_count,
        "image_size": model.image_size,
        "channels": model.channels,
        "latent_dim": model.latent_dim,
        "seeds": dict(model.seeds),
        "attack": json.dumps(model.attack, sort_keys=True) if model.attack else None,
    }


def save_checkpoint(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "state_dict": model.module.state_dict(),
            "metadata": checkpoint_metadata(model),
        },
        path,
    )
    logger.debug("Saved checkpoint to %s", path)
    return path


def load_checkpoint(path, architecture=ARCHITECTURE_ID):
    """
    Load a checkpoint written by ``save_checkpoint``.

    Raises ArchitectureMismatchError when the file was written for a different
    architecture id than the one requested.
    """
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    meta = payload["metadata"]
    if meta["architecture"] != architecture:
        raise ArchitectureMismatchError(
            f"checkpoint {path} holds {meta['architecture']!r}, expected {architecture!r}"
        )
    module = SmallConvNet(
        meta["class_count"], meta["image_size"], meta["channels"], meta["latent_dim"]
    )
    try:
        module.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise ArchitectureMismatchError(f"checkpoint {path} does not fit: {exc}") from exc
    return ModelHandle(
        module=module,
        class_count=meta["class_count"],
        image_size=meta["image_size"],
        channels=meta["channels"],
        latent_dim=meta["latent_dim"],
        architecture=meta["architecture"],
        seeds=dict(meta["seeds"]),
        attack=json.loads(meta["attack"]) if meta["attack"] else None,
    )
