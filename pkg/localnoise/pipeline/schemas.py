from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class NoiseDomain(str, Enum):
    NETWORK = "network"
    IMAGE = "image"


class FixMode(str, Enum):
    TOWARDS_SOURCE = "towards_source"
    AWAY_FROM_TARGET = "away_from_target"


class Outcome(str, Enum):
    """Nested success tiers, weakest first."""

    FAILED = "failed"
    MISCLASSIFIED = "misclassified"
    ARGMAX = "argmax"
    CONFIDENT = "confident"

    @property
    def rank(self) -> int:
        return list(Outcome).index(self)


LayerKind = Literal["conv2d", "relu", "maxpool2d", "flatten", "dense"]

LAYER_KIND_CODES: Dict[str, int] = {"conv2d": 1, "relu": 2, "maxpool2d": 3, "flatten": 4, "dense": 5}


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    kernel: Optional[int] = Field(default=None, gt=0)
    out_channels: Optional[int] = Field(default=None, gt=0)
    padding: int = Field(default=0, ge=0)
    window: Optional[int] = Field(default=None, gt=0)
    out_features: Optional[int] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _required_dimensions(self) -> "LayerSpec":
        required = {
            "conv2d": ("kernel", "out_channels"),
            "maxpool2d": ("window",),
            "dense": ("out_features",),
        }.get(self.kind, ())
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.kind} layer requires {', '.join(missing)}")
        return self

    @classmethod
    def conv2d(cls, kernel: int, out_channels: int, padding: int = 0) -> "LayerSpec":
        return cls(kind="conv2d", kernel=kernel, out_channels=out_channels, padding=padding)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(kind="relu")

    @classmethod
    def maxpool2d(cls, window: int) -> "LayerSpec":
        return cls(kind="maxpool2d", window=window)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls(kind="flatten")

    @classmethod
    def dense(cls, out_features: int) -> "LayerSpec":
        return cls(kind="dense", out_features=out_features)


class TrainConfig(BaseModel):
    epochs: int = Field(default=10, gt=0)
    batch_size: int = Field(default=32, gt=0)
    learning_rate: float = Field(default=0.05, ge=0.0)
    seed: int = Field(default=42, ge=0)


class EpochMetrics(BaseModel):
    epoch: int
    loss: float
    train_accuracy: float
    heldout_accuracy: Optional[float] = None


class AttackConfig(BaseModel):
    # None picks the domain default (0.05 network, 0.01 image)
    step_size: Optional[float] = Field(default=None, ge=0.0)
    target_confidence: float = Field(default=0.9, gt=0.0, le=1.0)
    max_iterations: int = Field(default=10_000, gt=0)
    seed: int = Field(default=0, ge=0)
    random_init: bool = False
    pin_reference_to_source: bool = False

    def resolved_step_size(self, domain: NoiseDomain) -> float:
        if self.step_size is not None:
            return self.step_size
        return 0.05 if domain == NoiseDomain.NETWORK else 0.01


class TransferConfig(AttackConfig):
    train_image_count: int = Field(default=100, ge=1)
    consecutive_successes: int = Field(default=30, ge=1)
    success_confidence: float = Field(default=0.9, gt=0.0, le=1.0)
    max_total_iterations: int = Field(default=100_000, gt=0)
    inner_steps: int = Field(default=1, ge=1)


class FixConfig(BaseModel):
    step_size: float = Field(default=0.01, ge=0.0)
    max_iterations: int = Field(default=2_000, gt=0)
    clip: bool = False


class PatchSidecar(BaseModel):
    target: int
    domain: NoiseDomain
    seed: int
    iterations: int
    converged: bool
    size: int
    filtered_images: int = 0
    training_images: int = 0


class AttackSummary(BaseModel):
    source: int
    target: int
    domain: NoiseDomain
    location: Tuple[int, int]
    size: int
    step_size: float
    outcome: Outcome
    iterations: int
    target_prob: float
    source_prob: float
    predicted: int


class SweepSummary(BaseModel):
    source: int
    target: int
    stride: int
    grid_rows: int
    grid_cols: int
    fraction_target_confident: float
    fraction_not_source: float
    reference: Tuple[float, float]


class TransferRecord(BaseModel):
    index: int
    label: int
    clean_class: int
    patched_class: int
    source_prob: float
    target_prob: float
    excluded: bool
    confident: bool
    argmax_target: bool
    not_source: bool


class SaliencyRecord(BaseModel):
    domain: NoiseDomain
    mode: FixMode
    target: int
    image_index: int
    source: int
    iterations: int
    fixed: bool
    overlap_max: bool
    overlap_sum: bool


class FixMapSidecar(BaseModel):
    mode: FixMode
    source: int
    target: int
    iterations: int
    fixed: bool
    # PGM byte b maps back to b / 255 * scale
    scale: float


class SaliencyCell(BaseModel):
    domain: NoiseDomain
    mode: FixMode
    pairs: int
    fraction_max: float
    fraction_sum: float
    reference_max: float
    reference_sum: float


class SweepConfig(BaseModel):
    stride: int = Field(default=2, ge=1)
    confidence: float = Field(default=0.9, gt=0.0, le=1.0)


class ArtifactEntry(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    action: str
    package_version: str
    parameters: Dict[str, object]
    settings: Dict[str, object]
    seeds: Dict[str, int]
    artifacts: List[ArtifactEntry] = Field(default_factory=list)


class RunConfig(BaseModel):
    """Validated parameters for one CLI action; unused fields keep defaults."""

    model_config = ConfigDict(extra="forbid")

    output_dir: str = "runs/latest"
    seed: int = Field(default=42, ge=0)
    model_path: Optional[str] = None
    num_classes: int = Field(default=8, ge=2, le=16)
    image_size: int = Field(default=32, ge=16)
    train_per_class: int = Field(default=200, ge=1)
    heldout_per_class: int = Field(default=100, ge=1)
    epochs: int = Field(default=10, gt=0)
    batch_size: int = Field(default=32, gt=0)
    learning_rate: float = Field(default=0.05, ge=0.0)
    split: Literal["train", "heldout"] = "heldout"
    image_index: int = Field(default=0, ge=0)
    image_count: int = Field(default=100, ge=1)
    target: Optional[int] = Field(default=None, ge=0)
    patch_size: int = Field(default=5, gt=0)
    domain: NoiseDomain = NoiseDomain.NETWORK
    location: Optional[Tuple[int, int]] = None
    corner: Optional[Literal["top_left", "top_right", "bottom_left", "bottom_right"]] = None
    step_size: Optional[float] = Field(default=None, ge=0.0)
    target_confidence: float = Field(default=0.9, gt=0.0, le=1.0)
    max_iterations: int = Field(default=10_000, gt=0)
    random_init: bool = False
    pin_reference_to_source: bool = False
    train_image_count: int = Field(default=100, ge=1)
    consecutive_successes: int = Field(default=30, ge=1)
    max_total_iterations: int = Field(default=100_000, gt=0)
    inner_steps: int = Field(default=1, ge=1)
    stride: int = Field(default=2, ge=1)
    patch_paths: List[str] = Field(default_factory=list)
    fix_step_size: float = Field(default=0.01, ge=0.0)
    fix_max_iterations: int = Field(default=2_000, gt=0)
    fix_clip: bool = False
    saved_maps: int = Field(default=4, ge=0)
    shift_radius: int = Field(default=1, ge=1)
    border_fraction: float = Field(default=0.25, ge=0.0)

    @field_validator("location")
    @classmethod
    def _non_negative_location(cls, value):
        if value is not None and (value[0] < 0 or value[1] < 0):
            raise ValueError("location coordinates must be non-negative")
        return value
