"""Robustness evaluation: location sweeps, cross-image transfer rates,
source/target class dependence, and the shift / context checks for
single-image patches."""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from localnoise.attacks.patch_attack import Patch, PatchLocation, apply_patch
from localnoise.diffnet.dataset import Dataset
from localnoise.diffnet.network import Network, forward, predict, softmax
from localnoise.errors import ConfigError, DatasetSplitError, ShapeMismatchError
from localnoise.pipeline.engine_factory import EvalEngineFactory
from localnoise.pipeline.engines.base_engine import BaseEvalEngine
from localnoise.pipeline.schemas import NoiseDomain, TransferRecord

LOGGER = logging.getLogger(__name__)

CONFIDENCE = 0.9

# Inception V3 / ImageNet figures; context only, never asserted at desk scale.
INCEPTION_SCALE_TRANSFER_RATES = {
    NoiseDomain.NETWORK: (0.43, 0.89, 1.00),
    NoiseDomain.IMAGE: (0.283, 0.741, 0.789),
}
INCEPTION_SCALE_LOCATION_ROBUSTNESS = (0.83, 0.97)


def bottom_right(net: Network, size: int) -> PatchLocation:
    h, w, _ = net.input_shape
    return PatchLocation(row=h - size, col=w - size)


def evaluate_cell(net: Network, image: np.ndarray, patch: Patch, loc: PatchLocation) -> np.ndarray:
    """Softmax of the patched image; the single path every report cell goes through."""
    return softmax(forward(net, apply_patch(image, patch, loc)))


class HeatmapReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    source: int
    target: int
    stride: int
    patch_size: int
    rows: List[int]
    cols: List[int]
    probs: np.ndarray
    source_prob: np.ndarray
    target_prob: np.ndarray
    argmax: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.rows), len(self.cols)

    @property
    def argmax_is_target(self) -> np.ndarray:
        return self.argmax == self.target

    @property
    def argmax_is_source(self) -> np.ndarray:
        return self.argmax == self.source

    @property
    def argmax_is_neither(self) -> np.ndarray:
        return ~(self.argmax_is_target | self.argmax_is_source)

    def to_frame(self) -> pd.DataFrame:
        grid_rows, grid_cols = np.meshgrid(np.arange(len(self.rows)), np.arange(len(self.cols)), indexing="ij")
        return pd.DataFrame(
            {
                "grid_row": grid_rows.ravel(),
                "grid_col": grid_cols.ravel(),
                "row": np.asarray(self.rows)[grid_rows.ravel()],
                "col": np.asarray(self.cols)[grid_cols.ravel()],
                "source_prob": self.source_prob.ravel(),
                "target_prob": self.target_prob.ravel(),
                "argmax": self.argmax.ravel(),
                "argmax_is_target": self.argmax_is_target.ravel(),
                "argmax_is_source": self.argmax_is_source.ravel(),
                "argmax_is_neither": self.argmax_is_neither.ravel(),
            }
        )

    def maps(self, num_classes: int) -> Dict[str, np.ndarray]:
        """The grayscale panels of a sweep, each scaled to [0, 1]."""
        return {
            "source_prob": self.source_prob,
            "target_prob": self.target_prob,
            "argmax_is_target": self.argmax_is_target.astype(np.float64),
            "argmax_is_source": self.argmax_is_source.astype(np.float64),
            "argmax_is_neither": self.argmax_is_neither.astype(np.float64),
            "argmax_class": self.argmax / max(num_classes - 1, 1),
        }


def location_sweep(
    net: Network,
    image: np.ndarray,
    patch: Patch,
    target: int,
    stride: int = 2,
    source: Optional[int] = None,
    engine: Optional[BaseEvalEngine] = None,
) -> HeatmapReport:
    """Place the patch at every stride-th location and record source/target probability and argmax."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}", field="stride")
    net.check_input(image)
    h, w, _ = net.input_shape
    s = patch.size
    if s > min(h, w):
        raise ShapeMismatchError(f"patch of size {s} does not fit a {h}x{w} image", field="patch")
    if source is None:
        source, _ = predict(net, image)
    engine = engine or EvalEngineFactory.get_engine()

    rows = list(range(0, h - s + 1, stride))
    cols = list(range(0, w - s + 1, stride))
    locations = [PatchLocation(row=r, col=c) for r in rows for c in cols]
    cells = engine.map(lambda loc: evaluate_cell(net, image, patch, loc), locations)

    probs = np.stack(cells).reshape(len(rows), len(cols), -1)
    return HeatmapReport(
        source=source,
        target=target,
        stride=stride,
        patch_size=s,
        rows=rows,
        cols=cols,
        probs=probs,
        source_prob=probs[:, :, source].astype(np.float64),
        target_prob=probs[:, :, target].astype(np.float64),
        argmax=np.argmax(probs, axis=-1),
    )


def location_robustness(report: HeatmapReport, source: Optional[int] = None, target: Optional[int] = None) -> Tuple[float, float]:
    """(fraction of cells with p_target >= 0.9, fraction whose argmax is not the source)."""
    source = report.source if source is None else source
    target = report.target if target is None else target
    cells = report.argmax.size
    if cells == 0:
        return 0.0, 0.0
    confident = int(np.count_nonzero(report.probs[:, :, target] >= CONFIDENCE))
    not_source = int(np.count_nonzero(report.argmax != source))
    return confident / cells, not_source / cells


class TransferReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    target: int
    domain: NoiseDomain
    location: PatchLocation
    records: List[TransferRecord]
    evaluated: int
    excluded: int
    count_confident: int
    count_argmax_target: int
    count_not_source: int
    rate_confident: float
    rate_argmax_target: float
    rate_not_source: float
    reference_rates: Tuple[float, float, float]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([record.model_dump() for record in self.records])

    def summary(self) -> Dict[str, object]:
        return self.model_dump(mode="json", exclude={"records"})


def _rate(count: int, total: int) -> float:
    return count / total if total else 0.0


def transfer_eval(
    net: Network,
    heldout: Dataset,
    patch: Patch,
    target: int,
    loc: Optional[PatchLocation] = None,
    engine: Optional[BaseEvalEngine] = None,
) -> TransferReport:
    """Patch every held-out image at `loc` (bottom-right by default) and tally the nested tiers.

    Images whose clean prediction already equals the target are recorded but
    left out of the rate denominators.
    """
    if heldout.split != "heldout":
        raise DatasetSplitError(f"transfer evaluation needs the heldout split, got {heldout.split!r}", field="split")
    if len(heldout) == 0:
        raise ConfigError("empty evaluation set", field="heldout")
    loc = loc or bottom_right(net, patch.size)
    engine = engine or EvalEngineFactory.get_engine()

    def run(index: int) -> TransferRecord:
        image = heldout.images[index]
        clean, _ = predict(net, image)
        probs = evaluate_cell(net, image, patch, loc)
        patched = int(np.argmax(probs))
        excluded = clean == target
        return TransferRecord(
            index=index,
            label=int(heldout.labels[index]),
            clean_class=clean,
            patched_class=patched,
            source_prob=float(probs[clean]),
            target_prob=float(probs[target]),
            excluded=excluded,
            confident=not excluded and float(probs[target]) >= CONFIDENCE,
            argmax_target=not excluded and patched == target,
            not_source=not excluded and patched != clean,
        )

    records = engine.map(run, range(len(heldout)))
    excluded = sum(record.excluded for record in records)
    evaluated = len(records) - excluded
    counts = (
        sum(record.confident for record in records),
        sum(record.argmax_target for record in records),
        sum(record.not_source for record in records),
    )
    if evaluated == 0:
        LOGGER.warning("every evaluation image is already classified as target %d", target)
    return TransferReport(
        target=target,
        domain=patch.domain,
        location=loc,
        records=records,
        evaluated=evaluated,
        excluded=excluded,
        count_confident=counts[0],
        count_argmax_target=counts[1],
        count_not_source=counts[2],
        rate_confident=_rate(counts[0], evaluated),
        rate_argmax_target=_rate(counts[1], evaluated),
        rate_not_source=_rate(counts[2], evaluated),
        reference_rates=INCEPTION_SCALE_TRANSFER_RATES[patch.domain],
    )


class ClassMatrix(BaseModel):
    """Rows are source classes, columns target classes; NaN marks an absent cell."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sources: List[int]
    targets: List[int]
    values: np.ndarray
    counts: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, index=self.sources, columns=self.targets)
        frame.index.name = "source"
        frame.columns = [f"target_{t}" for t in self.targets]
        return frame.reset_index()


def images_by_prediction(net: Network, images: np.ndarray) -> Dict[int, np.ndarray]:
    """Group images by the class the network assigns to the clean image; that class is their source."""
    groups: Dict[int, List[int]] = {}
    for index, image in enumerate(images):
        groups.setdefault(predict(net, image)[0], []).append(index)
    return {source: images[indices] for source, indices in sorted(groups.items())}


def class_matrix(
    net: Network,
    images_by_class: Dict[int, Sequence[np.ndarray]],
    patches_by_target: Dict[int, Patch],
    loc: Optional[PatchLocation] = None,
    sources: Optional[Sequence[int]] = None,
    targets: Optional[Sequence[int]] = None,
    engine: Optional[BaseEvalEngine] = None,
) -> ClassMatrix:
    """Cell (i, j) is the mean p(j | patched image) over the class-i images, diagonal included."""
    sources = sorted(images_by_class) if sources is None else list(sources)
    targets = sorted(patches_by_target) if targets is None else list(targets)
    engine = engine or EvalEngineFactory.get_engine()
    values = np.full((len(sources), len(targets)), np.nan)
    counts = np.zeros((len(sources), len(targets)), dtype=np.int64)

    jobs = []
    for i, source in enumerate(sources):
        images = images_by_class.get(source, [])
        for j, target in enumerate(targets):
            patch = patches_by_target.get(target)
            if patch is None or len(images) == 0:
                continue
            cell_loc = loc or bottom_right(net, patch.size)
            jobs.extend((i, j, target, image, patch, cell_loc) for image in images)

    probs = engine.map(lambda job: float(evaluate_cell(net, job[3], job[4], job[5])[job[2]]), jobs)
    sums = np.zeros_like(values)
    for (i, j, *_), p in zip(jobs, probs):
        sums[i, j] += p
        counts[i, j] += 1
    filled = counts > 0
    values[filled] = sums[filled] / counts[filled]
    return ClassMatrix(sources=sources, targets=targets, values=values, counts=counts)


def shift_sensitivity(
    net: Network, image: np.ndarray, patch: Patch, loc: PatchLocation, target: int, radius: int = 1
) -> pd.DataFrame:
    """Re-evaluate a patch moved by every valid offset in [-radius, radius]^2."""
    h, w, _ = net.input_shape
    source, _ = predict(net, image)
    s = patch.size
    rows = []
    for d_row in range(-radius, radius + 1):
        for d_col in range(-radius, radius + 1):
            row, col = loc.row + d_row, loc.col + d_col
            if not (0 <= row <= h - s and 0 <= col <= w - s):
                continue
            probs = evaluate_cell(net, image, patch, PatchLocation(row=row, col=col))
            rows.append(
                {
                    "d_row": d_row,
                    "d_col": d_col,
                    "row": row,
                    "col": col,
                    "source_prob": float(probs[source]),
                    "target_prob": float(probs[target]),
                    "argmax": int(np.argmax(probs)),
                }
            )
    return pd.DataFrame(rows)


class ContextTransfer(BaseModel):
    border: int
    predicted: int
    destination_class: int
    target_prob: float
    destination_prob: float


def context_transfer(
    net: Network,
    source_image: np.ndarray,
    dest_image: np.ndarray,
    patch: Patch,
    loc: PatchLocation,
    target: int,
    border_fraction: float = 0.25,
) -> ContextTransfer:
    """Move the patch plus a border of its source image onto another image at the same place."""
    h, w, _ = net.input_shape
    s = patch.size
    border = int(math.ceil(border_fraction * s))
    top, left = max(loc.row - border, 0), max(loc.col - border, 0)
    bottom, right = min(loc.row + s + border, h), min(loc.col + s + border, w)

    destination_class, _ = predict(net, dest_image)
    composed = np.array(dest_image, copy=True)
    composed[top:bottom, left:right, :] = source_image[top:bottom, left:right, :]
    probs = evaluate_cell(net, composed, patch, loc)
    return ContextTransfer(
        border=border,
        predicted=int(np.argmax(probs)),
        destination_class=destination_class,
        target_prob=float(probs[target]),
        destination_prob=float(probs[destination_class]),
    )
