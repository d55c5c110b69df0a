"""
Source training with photometric augmentation and polynomial LR decay.

Augmentation per sample (all draws keyed by (seed, epoch, index)):

    random resized crop (area scale and aspect ratio), back to full size
    horizontal flip
    color jitter: brightness, contrast, saturation, hue
    Gaussian blur
    grayscale
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np
from scipy import ndimage

from .augment import hflip, nearest_resize, to_grayscale
from .config import TrainRecipe
from .exceptions import SadaContractError, SadaTrainingError
from .model import Checkpoint, TinySegNet, decode_checkpoint, encode_checkpoint
from .optim import SGD, poly_lr
from .rng import keyed_rng
from .synth import Dataset, rotate_hue
from .tensor import Tensor, bilinear_resize, cross_entropy

logger = logging.getLogger(__name__)

CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)
HUE_DEGREES_PER_UNIT = 90.0
CROP_ATTEMPTS = 10

__all__ = ["TrainRecipe", "TrainResult", "augment_sample", "train_source"]


# ============================================
# Augmentation
# ============================================

def random_resized_crop(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float],
    ratio: tuple[float, float] = CROP_RATIO,
) -> tuple[np.ndarray, np.ndarray]:
    """Crop a random region (area fraction in ``scale``) and resize it back."""
    _, h, w = image.shape
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(CROP_ATTEMPTS):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 2 <= cw <= w and 2 <= ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            patch = image[:, top:top + ch, left:left + cw]
            labels = mask[top:top + ch, left:left + cw]
            return bilinear_resize(Tensor(patch), h, w).data, nearest_resize(labels, h, w)
    return image, mask


def color_jitter(
    image: np.ndarray,
    rng: np.random.Generator,
    factor_range: tuple[float, float],
    hue_range: tuple[float, float],
) -> np.ndarray:
    """Brightness, contrast and saturation scaled by factors in ``factor_range``; hue rotated."""
    x = image.astype(np.float64)
    x = x * rng.uniform(*factor_range)
    gray_mean = to_grayscale(x.astype(np.float32)).mean()
    x = (x - gray_mean) * rng.uniform(*factor_range) + gray_mean
    gray = to_grayscale(x.astype(np.float32)).astype(np.float64)
    x = gray + (x - gray) * rng.uniform(*factor_range)
    x = rotate_hue(x, (rng.uniform(*hue_range) - 1.0) * HUE_DEGREES_PER_UNIT)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image, sigma=(0.0, sigma, sigma), mode="nearest").astype(np.float32)


def augment_sample(
    image: np.ndarray,
    mask: np.ndarray,
    recipe: TrainRecipe,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One randomly augmented copy of (image, mask)."""
    image, mask = random_resized_crop(image, mask, rng, recipe.crop_scale)
    if rng.random() < recipe.flip_p:
        image, mask = hflip(image), hflip(mask)
    if rng.random() < recipe.jitter_p:
        image = color_jitter(image, rng, recipe.jitter_range, recipe.hue_range)
    if rng.random() < recipe.blur_p:
        image = gaussian_blur(image, rng.uniform(*recipe.blur_sigma))
    if rng.random() < recipe.gray_p:
        image = to_grayscale(image)
    return np.clip(image, 0.0, 1.0).astype(np.float32), np.ascontiguousarray(mask)


# ============================================
# Training loop
# ============================================

@dataclass
class TrainResult:
    """Trained network plus the per-step log (epoch, step, lr, loss)."""

    net: TinySegNet
    log: list[dict[str, Any]] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.log]

    def checkpoint(self) -> Checkpoint:
        return decode_checkpoint(encode_checkpoint(self.net))


def _params_finite(net: TinySegNet) -> bool:
    return all(np.isfinite(t.data).all() for t in net.parameters())


def train_source(
    net: TinySegNet,
    dataset: Dataset,
    recipe: TrainRecipe,
    seed: int = 0,
    on_step: Optional[Callable[[dict[str, Any]], None]] = None,
) -> TrainResult:
    """Train ``net`` on ``dataset`` with SGD, momentum, weight decay and poly decay.

    Raises:
        SadaContractError: If the dataset is empty
        SadaTrainingError: If the loss or any parameter stops being finite
    """
    n = len(dataset)
    if n == 0:
        raise SadaContractError("cannot train on an empty dataset", parameter="dataset")
    if net.num_classes != recipe.num_classes:
        raise SadaContractError(
            f"network has {net.num_classes} classes, recipe expects {recipe.num_classes}",
            parameter="num_classes",
        )

    steps_per_epoch = math.ceil(n / recipe.batch_size)
    total_steps = recipe.epochs * steps_per_epoch
    opt = SGD(net.parameters(), lr=recipe.base_lr, momentum=recipe.momentum, weight_decay=recipe.weight_decay)
    result = TrainResult(net=net)
    net.train()
    logger.info(f"Training on {n} images: {recipe.epochs} epochs x {steps_per_epoch} steps")

    step = 0
    for epoch in range(recipe.epochs):
        order = keyed_rng("train-order", seed, epoch).permutation(n)
        for b in range(steps_per_epoch):
            images, masks = [], []
            for i in order[b * recipe.batch_size:(b + 1) * recipe.batch_size]:
                image, mask = dataset.load(dataset.entries[int(i)])
                if recipe.augment:
                    image, mask = augment_sample(image, mask, recipe, keyed_rng("train-aug", seed, epoch, int(i)))
                images.append(image)
                masks.append(mask)

            lr = poly_lr(recipe.base_lr, step / total_steps, recipe.poly_power)
            opt.set_lr(lr)
            opt.zero_grad()
            loss = cross_entropy(net(Tensor(np.stack(images))), np.stack(masks))
            value = loss.item()
            if not math.isfinite(value):
                raise SadaTrainingError(f"loss became {value} at step {step}", step=step, last_loss=value, lr=lr)
            loss.backward()
            opt.step()
            if not _params_finite(net):
                raise SadaTrainingError(
                    f"parameters became non-finite at step {step}", step=step, last_loss=value, lr=lr
                )

            row = {"epoch": epoch, "step": step, "lr": lr, "loss": value}
            result.log.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
        logger.info(f"epoch {epoch + 1}/{recipe.epochs}: last loss {result.log[-1]['loss']:.4f}")

    net.eval()
    net.meta = {
        "epochs": recipe.epochs,
        "seed": seed,
        "source_domain": sorted(dataset.domains),
        "n_images": n,
        "recipe": dataclasses.asdict(recipe),
    }
    return result
