"""Hermetic shape dataset: one colored shape per class, centered inside the middle
60% of the image over a low-amplitude noise background, so corner windows never
cover the object."""

from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from localnoise.errors import ConfigError
from localnoise.helpers.general_utils import substream

Split = Literal["train", "heldout"]

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")

PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.75, 0.15],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.10, 0.85],
        [0.10, 0.85, 0.85],
        [1.00, 0.55, 0.00],
        [0.05, 0.05, 0.05],
        [0.55, 0.00, 0.35],
        [0.00, 0.40, 0.20],
        [0.98, 0.98, 0.98],
        [0.45, 0.25, 0.05],
        [0.60, 0.95, 0.30],
        [0.00, 0.20, 0.50],
        [0.95, 0.60, 0.70],
        [0.35, 0.00, 0.70],
    ]
)

BACKGROUND_LEVEL = (0.35, 0.65)
BACKGROUND_NOISE = 0.05
OBJECT_REGION = (0.2, 0.8)
RADIUS_FRACTION = (0.12, 0.18)


class ShapeParams(BaseModel):
    kind: str
    center_row: float
    center_col: float
    radius: float
    color: List[float]


def shape_mask(kind: str, size: int, center_row: float, center_col: float, radius: float) -> np.ndarray:
    """Boolean [size, size] membership of pixel centers in the shape."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = rows - center_row, cols - center_col
    r = radius
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "cross":
        return ((np.abs(dy) <= r) & (np.abs(dx) <= r / 3)) | ((np.abs(dx) <= r) & (np.abs(dy) <= r / 3))
    if kind == "ring":
        dist2 = dy * dy + dx * dx
        return (dist2 <= r * r) & (dist2 >= (0.5 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "hbar":
        return (np.abs(dy) <= r / 3) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= r / 3) & (np.abs(dy) <= r)
    raise ConfigError(f"unknown shape kind {kind!r}", field="kind")


def class_shape(label: int) -> str:
    return SHAPES[label % len(SHAPES)]


class Dataset(BaseModel):
    """Images [N, h, w, 3] in [0, 1] with labels; `split` keeps training and evaluation apart."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray
    labels: np.ndarray
    split: Split
    num_classes: int
    shapes: Optional[List[ShapeParams]] = None

    @model_validator(mode="after")
    def _consistent(self) -> "Dataset":
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        return self

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            split=self.split,
            num_classes=self.num_classes,
            shapes=[self.shapes[i] for i in indices] if self.shapes is not None else None,
        )

    def indices_by_class(self) -> Dict[int, List[int]]:
        groups: Dict[int, List[int]] = {}
        for i, label in enumerate(self.labels):
            groups.setdefault(int(label), []).append(i)
        return groups


def synth_dataset(
    seed: int, n_per_class: int, num_classes: int, image_size: int, split: Split = "train"
) -> Dataset:
    if not 2 <= num_classes <= len(PALETTE):
        raise ConfigError(f"num_classes must be in [2, {len(PALETTE)}], got {num_classes}", field="num_classes")
    if image_size < 16:
        raise ConfigError(f"image_size must be >= 16, got {image_size}", field="image_size")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}", field="n_per_class")

    rng = substream(seed, f"dataset/{split}")
    count = n_per_class * num_classes
    lo_edge, hi_edge = OBJECT_REGION[0] * image_size, OBJECT_REGION[1] * image_size
    images = np.empty((count, image_size, image_size, 3), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    shapes: List[ShapeParams] = []

    # classes interleave so any prefix stays balanced
    for i in range(count):
        label = i % num_classes
        radius = rng.uniform(*RADIUS_FRACTION) * image_size
        center_row = rng.uniform(lo_edge + radius, hi_edge - radius)
        center_col = rng.uniform(lo_edge + radius, hi_edge - radius)
        level = rng.uniform(*BACKGROUND_LEVEL)
        noise = rng.uniform(-BACKGROUND_NOISE, BACKGROUND_NOISE, size=(image_size, image_size, 3))
        image = np.clip(level + noise, 0.0, 1.0)

        kind = class_shape(label)
        mask = shape_mask(kind, image_size, center_row, center_col, radius)
        image[mask] = PALETTE[label]

        images[i] = image
        labels[i] = label
        shapes.append(
            ShapeParams(
                kind=kind,
                center_row=center_row,
                center_col=center_col,
                radius=radius,
                color=PALETTE[label].tolist(),
            )
        )

    return Dataset(images=images, labels=labels, split=split, num_classes=num_classes, shapes=shapes)


def default_datasets(seed: int = 42, num_classes: int = 8, image_size: int = 32, train_per_class: int = 200, heldout_per_class: int = 100):
    """The standard train / heldout pair (8 classes x 200 + 100 on 32x32 by default)."""
    train = synth_dataset(seed, train_per_class, num_classes, image_size, split="train")
    heldout = synth_dataset(seed, heldout_per_class, num_classes, image_size, split="heldout")
    return train, heldout
