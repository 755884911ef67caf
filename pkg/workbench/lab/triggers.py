"""
Trigger patterns and the rules that apply them to images.

All functions take a single (H, W, C) image or an (N, H, W, C) batch in
[0, 1] and return a new array of the same shape in [0, 1]; inputs are never
modified in place.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from torch.nn import functional as F

from .exceptions import DivergenceError, TriggerPlacementError

logger = logging.getLogger(__name__)

RULES = ("stamp", "blend", "additive", "warp")

TSB_GRID = 4
REFOOL_SHIFT = 2
REFOOL_SIGMA = 1.0
WANET_GRID = 4


@dataclass
class Trigger:
    """
    A trigger pattern plus its application rule.

    ``stamp`` patterns are patch-sized and placed at ``location``; ``blend``
    and ``additive`` patterns are image-sized. ``warp`` triggers carry a
    normalized displacement ``warp_field`` instead of a pattern. An additive
    trigger with a ``surrogate`` model computes a per-image adversarial
    perturbation at application time.
    """

    rule: str
    pattern: np.ndarray = None
    mask: np.ndarray = None
    location: tuple = (0, 0)
    opacity: float = 1.0
    warp_field: np.ndarray = None
    strength: float = 0.0
    name: str = ""
    epsilon: float = 0.0
    steps: int = 0
    target_class: int = None
    surrogate: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown trigger rule {self.rule!r}")
        if self.pattern is not None:
            self.pattern = np.asarray(self.pattern, dtype=np.float32)
            if self.mask is None:
                self.mask = np.ones(self.pattern.shape[:2] + (1,), dtype=np.float32)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float32)
        self.location = tuple(int(v) for v in self.location)

    def metadata(self):
        return {
            "rule": self.rule,
            "location": list(self.location),
            "opacity": self.opacity,
            "strength": self.strength,
            "name": self.name,
            "epsilon": self.epsilon,
            "steps": self.steps,
            "target_class": self.target_class,
        }

    def mask_l1(self):
        return float(np.abs(self.mask).sum()) if self.mask is not None else 0.0


def patch_side(image_size):
    """Side of the BadNets patch: 3/32 of the image width, at least 3 pixels."""
    return max(3, (3 * image_size) // 32)


def checker_pattern(side, channels=3):
    rows, cols = np.indices((side, side))
    checker = ((rows + cols) % 2).astype(np.float32)
    return np.repeat(checker[:, :, None], channels, axis=2)


def badnets_trigger(image_size, channels=3, location=(0, 0)):
    side = patch_side(image_size)
    return Trigger(
        rule="stamp",
        pattern=checker_pattern(side, channels),
        mask=np.ones((side, side, 1), np.float32),
        location=location,
        name="badnets",
    )


def _as_batch(images):
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        return images[None], True
    return images, False


def _restore(batch, single):
    return batch[0] if single else batch


def stamp_patch(images, trigger, mask=None):
    """Replace the masked patch region at ``trigger.location`` by the pattern."""
    batch, single = _as_batch(images)
    height, width = trigger.pattern.shape[:2]
    row, col = trigger.location
    if row < 0 or col < 0 or row + height > batch.shape[1] or col + width > batch.shape[2]:
        raise TriggerPlacementError(
            f"{height}x{width} patch at {trigger.location} does not fit a "
            f"{batch.shape[1]}x{batch.shape[2]} image"
        )
    keep = (trigger.mask if mask is None else mask) > 0.5
    out = batch.copy()
    region = out[:, row : row + height, col : col + width, :]
    out[:, row : row + height, col : col + width, :] = np.where(keep, trigger.pattern, region)
    return _restore(out, single)


def blend(images, trigger, alpha=None, mask=None):
    """out = (1 - a) * x + a * pattern with a = alpha * mask, clipped to [0, 1]."""
    batch, single = _as_batch(images)
    if trigger.pattern.shape != batch.shape[1:]:
        raise TriggerPlacementError(
            f"blend pattern {trigger.pattern.shape} does not match images {batch.shape[1:]}"
        )
    alpha = trigger.opacity if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("blend opacity must lie in [0, 1]")
    weight = np.float32(alpha) * (trigger.mask if mask is None else mask)
    out = (1.0 - weight) * batch + weight * trigger.pattern
    return _restore(np.clip(out, 0.0, 1.0).astype(np.float32), single)


def occlusion_mask(size, s, rate, seed):
    """
    A (size, size, 1) mask made of an ``s`` x ``s`` grid of cells, each kept
    with probability ``1 - rate``. Pixel ``i`` belongs to cell ``i * s // size``.
    """
    if s < 1:
        raise ValueError("occlusion grid must have at least one cell")
    if not 0.0 <= rate <= 1.0:
        raise ValueError("occlusion rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    kept = (rng.random((s, s)) >= rate).astype(np.float32)
    cells = (np.arange(size) * s) // size
    return kept[np.ix_(cells, cells)][:, :, None]


def a_blend_trigger(image_size, channels, seed, alpha=0.3):
    rng = np.random.default_rng(seed)
    return Trigger(
        rule="blend",
        pattern=rng.random((image_size, image_size, channels), dtype=np.float32),
        opacity=alpha,
        name="a-blend",
    )


def a_patch_side(image_size):
    return max(4, image_size // 4)


def a_patch_trigger(image_size, channels, seed, location=(0, 0)):
    side = a_patch_side(image_size)
    rng = np.random.default_rng(seed)
    return Trigger(
        rule="stamp",
        pattern=rng.random((side, side, channels), dtype=np.float32),
        location=location,
        name="a-patch",
    )


def ghost_layer(reflection, intensity, shift=REFOOL_SHIFT, sigma=REFOOL_SIGMA):
    """Blurred double image of ``reflection`` scaled by ``intensity``."""
    reflection = np.asarray(reflection, dtype=np.float32)
    shifted = ndimage.shift(reflection, (shift, shift, 0), order=0, mode="constant")
    ghost = ndimage.gaussian_filter(0.5 * (reflection + shifted), sigma=(sigma, sigma, 0))
    return (np.float32(intensity) * ghost).astype(np.float32)


def refool_trigger(images, reflection_image, intensity=1.0):
    if intensity < 0:
        raise ValueError("reflection intensity must be non-negative")
    batch, single = _as_batch(images)
    if intensity == 0:
        return _restore(batch.copy(), single)
    out = np.clip(batch + ghost_layer(reflection_image, intensity), 0.0, 1.0)
    return _restore(out.astype(np.float32), single)


def make_refool_trigger(reflection_image, intensity=1.0):
    return Trigger(
        rule="additive",
        pattern=ghost_layer(reflection_image, intensity),
        opacity=float(intensity),
        name="refool",
    )


def make_warp_field(image_size, seed, grid=WANET_GRID):
    """
    A smooth (H, W, 2) displacement field with max magnitude 1, upsampled
    bilinearly from a random ``grid`` x ``grid`` control grid.
    """
    rng = np.random.default_rng(seed)
    control = rng.uniform(-1.0, 1.0, size=(1, 2, grid, grid)).astype(np.float32)
    control /= np.abs(control).max()
    upsampled = F.interpolate(
        torch.from_numpy(control), size=(image_size, image_size), mode="bilinear", align_corners=True
    )
    return upsampled[0].permute(1, 2, 0).numpy()


def wanet_trigger(images, warp_field, strength):
    """Resample the images along the field; ``strength`` is the max shift in pixels."""
    if strength < 0:
        raise ValueError("warp strength must be non-negative")
    batch, single = _as_batch(images)
    if strength == 0:
        return _restore(batch.copy(), single)
    height, width = batch.shape[1:3]
    ys, xs = torch.meshgrid(
        torch.linspace(-1, 1, height), torch.linspace(-1, 1, width), indexing="ij"
    )
    identity = torch.stack([xs, ys], dim=-1)
    scale = torch.tensor([2.0 / (width - 1), 2.0 / (height - 1)])
    grid = identity + float(strength) * torch.as_tensor(warp_field) * scale
    tensor = torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))
    warped = F.grid_sample(
        tensor,
        grid.unsqueeze(0).expand(len(batch), -1, -1, -1),
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )
    out = np.clip(warped.numpy().transpose(0, 2, 3, 1), 0.0, 1.0).astype(np.float32)
    return _restore(out, single)


def make_wanet_trigger(image_size, seed, strength):
    return Trigger(
        rule="warp",
        warp_field=make_warp_field(image_size, seed),
        strength=float(strength),
        name="wanet",
    )


def tsb_triggers(image_size, k, seed, channels=3):
    """
    ``k`` pairwise distinct binary patches placed in distinct cells of a
    4x4 grid over the image.
    """
    cells = TSB_GRID * TSB_GRID
    if not 1 <= k <= cells:
        raise TriggerPlacementError(f"cannot scatter {k} segments over {cells} cells")
    side = patch_side(image_size)
    cell = image_size // TSB_GRID
    if side > cell:
        raise TriggerPlacementError(
            f"{side}px segments do not fit {cell}px cells of a {image_size}px image"
        )
    rng = np.random.default_rng(seed)
    positions = rng.choice(cells, size=k, replace=False)
    patterns = []
    while len(patterns) < k:
        candidate = (rng.random((side, side, channels)) > 0.5).astype(np.float32)
        if any(np.array_equal(candidate, other) for other in patterns):
            continue
        patterns.append(candidate)
    return [
        Trigger(
            rule="stamp",
            pattern=pattern,
            location=((pos // TSB_GRID) * cell, (pos % TSB_GRID) * cell),
            name=f"tsb-{index}",
        )
        for index, (pattern, pos) in enumerate(zip(patterns, positions))
    ]


def pgd_perturb(images, model, target_class, epsilon, steps, step_size=None):
    """
    Targeted L-inf PGD: move each image toward ``target_class`` under
    ``model`` while staying within ``epsilon`` of the input and inside [0, 1].
    """
    batch, single = _as_batch(images)
    if steps == 0 or epsilon == 0:
        return _restore(batch.copy(), single)
    step_size = 2.5 * epsilon / steps if step_size is None else step_size
    module = model.module
    module.eval()
    x = torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))
    target = torch.full((len(batch),), int(target_class), dtype=torch.long)
    x_adv = x.clone()
    for step in range(steps):
        x_adv = x_adv.clone().detach().requires_grad_(True)
        loss = F.cross_entropy(module(x_adv), target)
        (grad,) = torch.autograd.grad(loss, x_adv)
        if not torch.isfinite(grad).all():
            raise DivergenceError(f"non-finite PGD gradient at step {step}", step=step)
        x_adv = x_adv.detach() - step_size * grad.sign()
        x_adv = torch.min(torch.max(x_adv, x - epsilon), x + epsilon).clamp(0.0, 1.0)
    out = x_adv.detach().numpy().transpose(0, 2, 3, 1).astype(np.float32)
    return _restore(out, single)


def craft_adv_trigger(base_model, target_class, epsilon=8 / 255, steps=4):
    return Trigger(
        rule="additive",
        name="advclean",
        epsilon=float(epsilon),
        steps=int(steps),
        target_class=int(target_class),
        surrogate=base_model,
    )


def apply_trigger(images, trigger, mask=None):
    """Apply ``trigger`` by its rule; ``mask`` overrides the stored mask."""
    if trigger.rule == "stamp":
        return stamp_patch(images, trigger, mask=mask)
    if trigger.rule == "blend":
        return blend(images, trigger, mask=mask)
    if trigger.rule == "warp":
        return wanet_trigger(images, trigger.warp_field, trigger.strength)
    if trigger.surrogate is not None:
        return pgd_perturb(
            images, trigger.surrogate, trigger.target_class, trigger.epsilon, trigger.steps
        )
    batch, single = _as_batch(images)
    out = np.clip(batch + trigger.pattern, 0.0, 1.0).astype(np.float32)
    return _restore(out, single)


def save_trigger(trigger, path):
    path = Path(path).with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"metadata": np.array(json.dumps(trigger.metadata(), sort_keys=True))}
    for name in ("pattern", "mask", "warp_field"):
        value = getattr(trigger, name)
        if value is not None:
            arrays[name] = value
    np.savez(path, **arrays)
    return path


def load_trigger(path):
    with np.load(Path(path)) as archive:
        meta = json.loads(str(archive["metadata"]))
        arrays = {name: archive[name] for name in ("pattern", "mask", "warp_field") if name in archive}
    if meta["rule"] == "additive" and meta["steps"] and "pattern" not in arrays:
        logger.warning("Trigger %s needs a surrogate model to be applied", path)
    return Trigger(
        rule=meta["rule"],
        location=tuple(meta["location"]),
        opacity=meta["opacity"],
        strength=meta["strength"],
        name=meta["name"],
        epsilon=meta["epsilon"],
        steps=meta["steps"],
        target_class=meta["target_class"],
        **arrays,
    )
