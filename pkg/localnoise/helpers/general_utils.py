import hashlib
import logging
import zlib
from typing import Dict, Tuple

import numpy as np

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = "INFO") -> None:
    """Configures the root logger once; repeated calls only adjust the level."""
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=level.upper(), format=LOG_FORMAT)
    root.setLevel(level.upper())


def substream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for a named purpose ("init", "dataset/train", ...).

    Streams are keyed by name rather than by draw order, so a new consumer
    never shifts the numbers an existing one sees.
    """
    key = zlib.crc32(purpose.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def corner_locations(height: int, width: int, size: int) -> Dict[str, Tuple[int, int]]:
    """Top-left coordinates of a size x size window in each image corner."""
    return {
        "top_left": (0, 0),
        "top_right": (0, width - size),
        "bottom_left": (height - size, 0),
        "bottom_right": (height - size, width - size),
    }


def rescale_for_display(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant arrays map to 0.5."""
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi - lo <= 0.0:
        return np.full(values.shape, 0.5, dtype=np.float64)
    return (values.astype(np.float64) - lo) / (hi - lo)


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()

