"""Single-image, single-location localized noise.

The noised image replaces an s x s window with the patch,
x' = (1 - m) * x + m * delta, and the patch climbs the logit difference
M(target | x') - M(reference | x') one gradient step at a time.
"""

import logging
from typing import Callable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from localnoise.diffnet.network import (
    Network,
    forward,
    forward_with_cache,
    gradient_from_cache,
    input_gradient,
    predict,
    softmax,
)
from localnoise.errors import AttackError, ShapeMismatchError
from localnoise.helpers.general_utils import rescale_for_display, substream
from localnoise.pipeline.schemas import AttackConfig, NoiseDomain, Outcome

LOGGER = logging.getLogger(__name__)


class Patch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    domain: NoiseDomain

    @model_validator(mode="after")
    def _bounded(self) -> "Patch":
        v = self.values
        if v.ndim != 3 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
            raise ValueError(f"patch values must be [s, s, c], got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("patch values must be finite")
        if self.domain == NoiseDomain.IMAGE and (v.min() < 0 or v.max() > 1):
            raise ValueError("image-domain patch values must lie in [0, 1]")
        return self

    @property
    def size(self) -> int:
        return int(self.values.shape[0])


class PatchLocation(BaseModel):
    model_config = ConfigDict(frozen=True)

    row: int = Field(ge=0)
    col: int = Field(ge=0)

    def check(self, height: int, width: int, size: int) -> None:
        if self.row > height - size or self.col > width - size:
            raise ShapeMismatchError(
                f"patch of size {size} at ({self.row}, {self.col}) leaves the {height}x{width} image",
                field="location",
            )

    def window(self, size: int) -> Tuple[slice, slice]:
        return slice(self.row, self.row + size), slice(self.col, self.col + size)


class AttackResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    patch: Patch
    location: PatchLocation
    noised: np.ndarray
    source: int
    target: int
    iterations: int
    target_prob: float
    source_prob: float
    predicted: int
    outcome: Outcome


def init_patch(
    domain: NoiseDomain, size: int, seed: int = 0, random: bool = False, channels: int = 3, dtype=np.float32
) -> Patch:
    """All-zero patch, or uniform in [0, 1] drawn from the seed's "patch/init" stream."""
    if random:
        values = substream(seed, "patch/init").uniform(0.0, 1.0, size=(size, size, channels)).astype(dtype)
    else:
        values = np.zeros((size, size, channels), dtype=dtype)
    return Patch(values=values, domain=domain)


def apply_patch(image: np.ndarray, patch: Patch, loc: PatchLocation) -> np.ndarray:
    """Replace the window at `loc` with the patch; network-domain values are not clipped."""
    h, w = image.shape[:2]
    loc.check(h, w, patch.size)
    if patch.values.shape[2] != image.shape[2]:
        raise ShapeMismatchError(
            f"patch has {patch.values.shape[2]} channels, image has {image.shape[2]}", field="patch"
        )
    # result carries the wider of the two precisions
    noised = np.array(image, dtype=np.result_type(image.dtype, patch.values.dtype), copy=True)
    rows, cols = loc.window(patch.size)
    noised[rows, cols, :] = patch.values
    return noised


def _check_class(net: Network, index: int, name: str) -> None:
    if not 0 <= index < net.num_classes:
        raise AttackError(f"{name} class {index} outside [0, {net.num_classes})", field=name)


def objective(net: Network, noised: np.ndarray, target: int, reference: int) -> float:
    """M(target | x') - M(reference | x') on pre-softmax logits."""
    _check_class(net, target, "target")
    _check_class(net, reference, "reference")
    if target == reference:
        raise AttackError("target and reference classes must differ", field="reference")
    logits = forward(net, noised)
    return float(logits[target]) - float(logits[reference])


def select_reference(probs: np.ndarray, target: int, source: Optional[int] = None, pin_to_source: bool = False) -> int:
    """Current argmax, or the runner-up when the target already leads."""
    probs = np.asarray(probs)
    if probs.shape[0] < 2:
        raise AttackError("reference selection needs at least two classes", field="probs")
    if pin_to_source and source is not None and source != target:
        return int(source)
    top = int(np.argmax(probs))
    if top != target:
        return top
    masked = np.array(probs, dtype=np.float64, copy=True)
    masked[target] = -np.inf
    return int(np.argmax(masked))


def classify_outcome(probs: np.ndarray, source: int, target: int, confidence: float) -> Outcome:
    top = int(np.argmax(probs))
    if top == target:
        # confident implies the target leads
        return Outcome.CONFIDENT if probs[target] >= confidence else Outcome.ARGMAX
    if top != source:
        return Outcome.MISCLASSIFIED
    return Outcome.FAILED


def objective_weights(net: Network, target: int, reference: int) -> np.ndarray:
    """+1 at the target, -1 at the reference: one backward pass gives grad_target - grad_reference."""
    weights = np.zeros(net.num_classes, dtype=net.dtype)
    weights[target] = 1
    weights[reference] = -1
    return weights


def checked_gradient(grad: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite gradient during patch optimisation", field="step_size")
    return grad


def ascent_direction(net: Network, noised: np.ndarray, target: int, reference: int) -> np.ndarray:
    """Gradient of the target-minus-reference logit difference with respect to the pixels."""
    return checked_gradient(input_gradient(net, noised, objective_weights(net, target, reference)))


def update_values(
    values: np.ndarray, grad: np.ndarray, loc: PatchLocation, domain: NoiseDomain, step_size: float
) -> np.ndarray:
    """delta <- delta + step * grad restricted to the window; clipped to [0, 1] in the image domain.

    The patch keeps its own precision.
    """
    rows, cols = loc.window(values.shape[0])
    dtype = values.dtype
    updated = values + dtype.type(step_size) * grad[rows, cols, :].astype(dtype)
    if domain == NoiseDomain.IMAGE:
        updated = np.clip(updated, 0.0, 1.0)
    return updated.astype(dtype)


def attack_single(
    net: Network,
    image: np.ndarray,
    target: int,
    loc: PatchLocation,
    domain: NoiseDomain,
    cfg: Optional[AttackConfig] = None,
    size: int = 5,
    on_step: Optional[Callable[[int, Patch], None]] = None,
) -> AttackResult:
    """Iterate ascent steps until p(target) reaches the confidence or the cap.

    Reports the best tier reached at any iterate together with the patch that
    reached it; `on_step(iteration, patch)` sees the patch after every step.
    """
    cfg = cfg or AttackConfig()
    net.check_input(image)
    _check_class(net, target, "target")
    h, w = image.shape[:2]
    loc.check(h, w, size)
    source, _ = predict(net, image)
    if target == source:
        raise AttackError(f"target {target} equals the clean prediction", field="target")

    step_size = cfg.resolved_step_size(domain)
    values = init_patch(
        domain, size, seed=cfg.seed, random=cfg.random_init, channels=image.shape[2], dtype=net.dtype
    ).values

    best = None
    iterations = 0
    while True:
        noised = apply_patch(image, Patch(values=values, domain=domain), loc)
        logits, caches = forward_with_cache(net, noised)
        probs = softmax(logits)
        outcome = classify_outcome(probs, source, target, cfg.target_confidence)
        if best is None or outcome.rank >= best[0].rank:
            best = (outcome, values.copy(), noised, probs)
        if outcome == Outcome.CONFIDENT or iterations >= cfg.max_iterations:
            break

        reference = select_reference(probs, target, source, cfg.pin_reference_to_source)
        grad = checked_gradient(gradient_from_cache(net, caches, objective_weights(net, target, reference)))
        values = update_values(values, grad, loc, domain, step_size)
        iterations += 1
        if on_step is not None:
            on_step(iterations, Patch(values=values, domain=domain))

    outcome, best_values, best_noised, best_probs = best
    LOGGER.debug(
        "attack %d->%d at (%d,%d) %s after %d iterations (p_target=%.4f)",
        source, target, loc.row, loc.col, outcome.value, iterations, float(best_probs[target]),
    )
    return AttackResult(
        patch=Patch(values=best_values, domain=domain),
        location=loc,
        noised=best_noised,
        source=source,
        target=target,
        iterations=iterations,
        target_prob=float(best_probs[target]),
        source_prob=float(best_probs[source]),
        predicted=int(np.argmax(best_probs)),
        outcome=outcome,
    )


def display_patch(patch: Patch) -> Patch:
    """Image-domain view of a patch; network-domain values are min-max rescaled to [0, 1]."""
    if patch.domain == NoiseDomain.IMAGE:
        return patch
    values = rescale_for_display(patch.values).astype(np.float32)
    return Patch(values=values, domain=NoiseDomain.IMAGE)


def render_noised(image: np.ndarray, patch: Patch, loc: PatchLocation) -> np.ndarray:
    """Noised image that can always be written as a PPM."""
    return apply_patch(image, display_patch(patch), loc)
