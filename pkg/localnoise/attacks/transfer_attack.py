"""Transferable ("universal") patch training.

Every iteration draws one training image and one location uniformly, takes an
ascent step on the patch there, and then checks the post-update target
probability on that same (image, location). Training stops after
`consecutive_successes` checks in a row reach `success_confidence`.
"""

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from localnoise.attacks.patch_attack import (
    Patch,
    PatchLocation,
    apply_patch,
    checked_gradient,
    init_patch,
    objective_weights,
    select_reference,
    update_values,
)
from localnoise.diffnet.dataset import Dataset
from localnoise.diffnet.network import Network, forward, forward_with_cache, gradient_from_cache, predict, softmax
from localnoise.errors import AttackError, DatasetSplitError, ShapeMismatchError
from localnoise.helpers.general_utils import substream
from localnoise.pipeline.schemas import NoiseDomain, PatchSidecar, TransferConfig

LOGGER = logging.getLogger(__name__)


class TransferResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    patch: Patch
    target: int
    converged: bool
    iterations: int
    training_images: int
    filtered_images: int
    seed: int

    def sidecar(self) -> PatchSidecar:
        return PatchSidecar(
            target=self.target,
            domain=self.patch.domain,
            seed=self.seed,
            iterations=self.iterations,
            converged=self.converged,
            size=self.patch.size,
            filtered_images=self.filtered_images,
            training_images=self.training_images,
        )


def sample_location(height: int, width: int, size: int, rng: np.random.Generator) -> PatchLocation:
    """Uniform over the (h - s + 1)(w - s + 1) valid top-left positions."""
    if size > min(height, width) or size < 1:
        raise ShapeMismatchError(f"patch size {size} does not fit a {height}x{width} image", field="patch_size")
    row = int(rng.integers(0, height - size + 1))
    col = int(rng.integers(0, width - size + 1))
    return PatchLocation(row=row, col=col)


def train_transfer_patch(
    net: Network,
    train_set: Dataset,
    target: int,
    domain: NoiseDomain,
    cfg: Optional[TransferConfig] = None,
    size: int = 5,
    initial_patch: Optional[Patch] = None,
    progress: bool = False,
) -> TransferResult:
    cfg = cfg or TransferConfig()
    if train_set.split != "train":
        raise DatasetSplitError(f"transfer patches train on the train split, got {train_set.split!r}", field="split")
    if len(train_set) == 0:
        raise AttackError("empty training set", field="train_set")
    if not 0 <= target < net.num_classes:
        raise AttackError(f"target class {target} outside [0, {net.num_classes})", field="target")

    # images the net already assigns to the target make the objective degenerate
    candidates = train_set.images[: cfg.train_image_count]
    images, sources = [], []
    for image in candidates:
        source, _ = predict(net, image)
        if source != target:
            images.append(image)
            sources.append(source)
    filtered = len(candidates) - len(images)
    if not images:
        raise AttackError(f"every training image is already classified as target {target}", field="target")
    if filtered:
        LOGGER.info("excluded %d training images already classified as %d", filtered, target)

    h, w, c = net.input_shape
    if initial_patch is not None:
        if initial_patch.domain != domain or initial_patch.values.shape != (size, size, c):
            raise ShapeMismatchError("initial patch does not match the requested size/domain", field="initial_patch")
        values = initial_patch.values.astype(net.dtype)
    else:
        values = init_patch(domain, size, seed=cfg.seed, random=cfg.random_init, channels=c, dtype=net.dtype).values
    step_size = cfg.resolved_step_size(domain)
    rng = substream(cfg.seed, "transfer/sampling")

    streak = 0
    iterations = 0
    converged = False
    bar = tqdm(total=cfg.max_total_iterations, desc=f"transfer->{target}", disable=not progress)
    while iterations < cfg.max_total_iterations:
        pick = int(rng.integers(0, len(images)))
        image, source = images[pick], sources[pick]
        loc = sample_location(h, w, size, rng)

        for _ in range(cfg.inner_steps):
            noised = apply_patch(image, Patch(values=values, domain=domain), loc)
            logits, caches = forward_with_cache(net, noised)
            reference = select_reference(softmax(logits), target, source, cfg.pin_reference_to_source)
            grad = checked_gradient(gradient_from_cache(net, caches, objective_weights(net, target, reference)))
            values = update_values(values, grad, loc, domain, step_size)
        iterations += 1
        bar.update(1)

        noised = apply_patch(image, Patch(values=values, domain=domain), loc)
        p_target = float(softmax(forward(net, noised))[target])
        streak = streak + 1 if p_target >= cfg.success_confidence else 0
        if streak >= cfg.consecutive_successes:
            converged = True
            break
    bar.close()

    if converged:
        LOGGER.info("transfer patch for %d converged after %d iterations", target, iterations)
    else:
        LOGGER.warning("transfer patch for %d hit the %d-iteration cap", target, cfg.max_total_iterations)
    return TransferResult(
        patch=Patch(values=values, domain=domain),
        target=target,
        converged=converged,
        iterations=iterations,
        training_images=len(images),
        filtered_images=filtered,
        seed=cfg.seed,
    )
