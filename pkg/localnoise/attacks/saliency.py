"""Does the network "see" the patch?

A gradient-fix map records how much every pixel moves while full-image
gradient steps undo an attack, either back towards the source class or just
away from the target. If the most active window of that map rarely lands on
the patch, the network's own gradients do not blame the patch.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from localnoise.attacks.patch_attack import Patch, PatchLocation, apply_patch, checked_gradient
from localnoise.diffnet.network import Network, forward_with_cache, gradient_from_cache, one_hot, predict
from localnoise.errors import AttackError, ConfigError, ShapeMismatchError
from localnoise.pipeline.engine_factory import EvalEngineFactory
from localnoise.pipeline.engines.base_engine import BaseEvalEngine
from localnoise.pipeline.schemas import FixConfig, FixMapSidecar, FixMode, NoiseDomain, SaliencyCell, SaliencyRecord

LOGGER = logging.getLogger(__name__)

# Inception V3 overlap fractions (MAX, SUM); context only.
INCEPTION_SCALE_OVERLAP = {
    (NoiseDomain.NETWORK, FixMode.TOWARDS_SOURCE): (0.004, 0.0015),
    (NoiseDomain.NETWORK, FixMode.AWAY_FROM_TARGET): (0.005, 0.0013),
    (NoiseDomain.IMAGE, FixMode.TOWARDS_SOURCE): (0.006, 0.054),
    (NoiseDomain.IMAGE, FixMode.AWAY_FROM_TARGET): (0.007, 0.052),
}


class FixMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    mode: FixMode
    source: int
    target: int
    iterations: int
    fixed: bool
    predicted: int

    def to_frame(self) -> pd.DataFrame:
        rows, cols = np.indices(self.values.shape)
        return pd.DataFrame({"row": rows.ravel(), "col": cols.ravel(), "value": self.values.ravel()})

    def normalized(self) -> Tuple[np.ndarray, float]:
        """Values divided by the map maximum, plus that maximum (1.0 for an all-zero map)."""
        scale = float(np.max(self.values)) if self.values.size else 0.0
        if scale <= 0.0:
            return np.zeros_like(self.values, dtype=np.float64), 1.0
        return self.values / scale, scale

    def sidecar(self) -> FixMapSidecar:
        _, scale = self.normalized()
        return FixMapSidecar(
            mode=self.mode,
            source=self.source,
            target=self.target,
            iterations=self.iterations,
            fixed=self.fixed,
            scale=scale,
        )


def _fix_weights(net: Network, mode: FixMode, source: int, target: int) -> np.ndarray:
    if mode == FixMode.TOWARDS_SOURCE:
        return one_hot(net.num_classes, source, dtype=net.dtype)
    # descending M(target) is ascending -M(target)
    return one_hot(net.num_classes, target, value=-1.0, dtype=net.dtype)


def _fixed(mode: FixMode, predicted: int, source: int, target: int) -> bool:
    if mode == FixMode.TOWARDS_SOURCE:
        return predicted == source
    return predicted != target


def gradient_fix(
    net: Network,
    noised: np.ndarray,
    mode: FixMode,
    source: int,
    target: int,
    step_size: float = 0.01,
    max_iters: int = 2000,
    clip: bool = False,
) -> FixMap:
    """Full-image gradient steps until the attack is undone, accumulating |dx| per pixel.

    The returned map sums the absolute accumulations over channels.
    """
    net.check_input(noised)
    for name, index in (("source", source), ("target", target)):
        if not 0 <= index < net.num_classes:
            raise AttackError(f"{name} class {index} outside [0, {net.num_classes})", field=name)
    if source == target:
        raise AttackError("source and target classes must differ", field="target")
    if step_size < 0 or max_iters < 1:
        raise ConfigError("fix needs step_size >= 0 and max_iters >= 1", field="fix_step_size")

    x = np.array(noised, dtype=net.dtype, copy=True)
    logits, caches = forward_with_cache(net, x)
    predicted = int(np.argmax(logits))
    if predicted != target:
        raise AttackError(f"noised image is classified as {predicted}, not the target {target}", field="noised")

    weights = _fix_weights(net, mode, source, target)
    accumulated = np.zeros(x.shape, dtype=np.float64)
    iterations = 0
    while not _fixed(mode, predicted, source, target) and iterations < max_iters:
        grad = checked_gradient(gradient_from_cache(net, caches, weights))
        stepped = x + net.dtype.type(step_size) * grad
        if clip:
            stepped = np.clip(stepped, 0.0, 1.0).astype(net.dtype)
        accumulated += np.abs(stepped.astype(np.float64) - x.astype(np.float64))
        x = stepped
        iterations += 1
        logits, caches = forward_with_cache(net, x)
        predicted = int(np.argmax(logits))

    return FixMap(
        values=accumulated.sum(axis=2),
        mode=mode,
        source=source,
        target=target,
        iterations=iterations,
        fixed=_fixed(mode, predicted, source, target),
        predicted=predicted,
    )


def _as_array(fix_map: Union[FixMap, np.ndarray]) -> np.ndarray:
    values = fix_map.values if isinstance(fix_map, FixMap) else np.asarray(fix_map)
    if values.ndim != 2:
        raise ShapeMismatchError(f"fix map must be [h, w], got {values.shape}", field="map")
    return values


def window_scores(fix_map: Union[FixMap, np.ndarray], size: int) -> Tuple[np.ndarray, np.ndarray]:
    """MAX and SUM score of every size x size window, stride 1, grids shaped (h - s + 1, w - s + 1)."""
    values = _as_array(fix_map)
    if size < 1 or size > min(values.shape):
        raise ShapeMismatchError(f"window size {size} does not fit a {values.shape} map", field="patch_size")
    windows = sliding_window_view(values, (size, size))
    return windows.max(axis=(-2, -1)), windows.sum(axis=(-2, -1))


def _top_window(scores: np.ndarray) -> Tuple[int, int]:
    # np.argmax on the flattened grid breaks ties by lowest row-major index
    row, col = np.unravel_index(int(np.argmax(scores)), scores.shape)
    return int(row), int(col)


def windows_overlap(first: Tuple[int, int], second: Tuple[int, int], size: int) -> bool:
    return abs(first[0] - second[0]) < size and abs(first[1] - second[1]) < size


def top_window_overlap(fix_map: Union[FixMap, np.ndarray], loc: PatchLocation, size: int) -> Tuple[bool, bool]:
    max_scores, sum_scores = window_scores(fix_map, size)
    patch_corner = (loc.row, loc.col)
    return (
        windows_overlap(_top_window(max_scores), patch_corner, size),
        windows_overlap(_top_window(sum_scores), patch_corner, size),
    )


class SaliencyStats(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    cells: List[SaliencyCell]
    records: List[SaliencyRecord]
    excluded: int
    # pairs where away_from_target needed more steps than towards_source
    ordering_violations: int
    samples: List[FixMap] = []

    def fraction(self, domain: NoiseDomain, mode: FixMode, metric: str) -> float:
        for cell in self.cells:
            if cell.domain == domain and cell.mode == mode:
                return cell.fraction_max if metric == "max" else cell.fraction_sum
        raise KeyError((domain, mode, metric))

    def table(self) -> pd.DataFrame:
        """One row per (domain, mode), MAX and SUM columns side by side."""
        return pd.DataFrame([cell.model_dump(mode="json") for cell in self.cells])

    def summary(self) -> Dict[str, object]:
        return {
            "excluded": self.excluded,
            "ordering_violations": self.ordering_violations,
            "evaluated_pairs": len(self.records) // max(len(FixMode), 1),
            "cells": [cell.model_dump(mode="json") for cell in self.cells],
        }


def aggregate_cells(records: Sequence[SaliencyRecord]) -> List[SaliencyCell]:
    cells = []
    for domain in NoiseDomain:
        for mode in FixMode:
            group = [r for r in records if r.domain == domain and r.mode == mode]
            if not group:
                continue
            reference_max, reference_sum = INCEPTION_SCALE_OVERLAP[(domain, mode)]
            cells.append(
                SaliencyCell(
                    domain=domain,
                    mode=mode,
                    pairs=len(group),
                    fraction_max=sum(r.overlap_max for r in group) / len(group),
                    fraction_sum=sum(r.overlap_sum for r in group) / len(group),
                    reference_max=reference_max,
                    reference_sum=reference_sum,
                )
            )
    return cells


def saliency_stats(
    net: Network,
    patches: Sequence[Tuple[int, Patch]],
    heldout_images: np.ndarray,
    loc: Optional[PatchLocation] = None,
    cfg: Optional[FixConfig] = None,
    engine: Optional[BaseEvalEngine] = None,
    keep_maps: int = 0,
    progress: bool = False,
) -> SaliencyStats:
    """Fix every (target patch, image) pair in both modes and count top-window overlaps.

    Pairs the patch fails to push to its target, and images already in the
    target class, are excluded and counted.
    """
    cfg = cfg or FixConfig()
    if len(patches) == 0 or len(heldout_images) == 0:
        raise ConfigError("saliency needs at least one patch and one image", field="patch_paths")
    engine = engine or EvalEngineFactory.get_engine()
    h, w, _ = net.input_shape

    def run(job: Tuple[int, int]) -> List[FixMap]:
        patch_index, image_index = job
        target, patch = patches[patch_index]
        image = heldout_images[image_index]
        where = loc or PatchLocation(row=h - patch.size, col=w - patch.size)
        source, _ = predict(net, image)
        if source == target:
            return []
        noised = apply_patch(image, patch, where)
        if predict(net, noised)[0] != target:
            return []
        return [
            gradient_fix(net, noised, mode, source, target, cfg.step_size, cfg.max_iterations, cfg.clip)
            for mode in FixMode
        ]

    jobs = [(p, i) for p in range(len(patches)) for i in range(len(heldout_images))]
    results = engine.map(run, tqdm(jobs, desc="saliency", disable=not progress))

    records: List[SaliencyRecord] = []
    samples: List[FixMap] = []
    excluded = 0
    violations = 0
    for (patch_index, image_index), maps in zip(jobs, results):
        if not maps:
            excluded += 1
            continue
        _, patch = patches[patch_index]
        where = loc or PatchLocation(row=h - patch.size, col=w - patch.size)
        by_mode = {fix.mode: fix for fix in maps}
        if by_mode[FixMode.AWAY_FROM_TARGET].iterations > by_mode[FixMode.TOWARDS_SOURCE].iterations:
            violations += 1
        for fix in maps:
            overlap_max, overlap_sum = top_window_overlap(fix, where, patch.size)
            records.append(
                SaliencyRecord(
                    domain=patch.domain,
                    mode=fix.mode,
                    target=fix.target,
                    image_index=image_index,
                    source=fix.source,
                    iterations=fix.iterations,
                    fixed=fix.fixed,
                    overlap_max=overlap_max,
                    overlap_sum=overlap_sum,
                )
            )
            if len(samples) < keep_maps:
                samples.append(fix)

    if violations:
        LOGGER.info("away_from_target took longer than towards_source on %d pairs", violations)
    if not records:
        LOGGER.warning("no patch misled any image; saliency cells are empty (%d excluded)", excluded)
    return SaliencyStats(
        cells=aggregate_cells(records),
        records=records,
        excluded=excluded,
        ordering_violations=violations,
        samples=samples,
    )
