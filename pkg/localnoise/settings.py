from typing import Literal

import numpy as np
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide knobs read from LOCALNOISE_* environment variables or .env."""

    model_config = SettingsConfigDict(env_prefix="LOCALNOISE_", env_file=".env", extra="ignore")

    precision: Literal["float32", "float64"] = "float32"
    eval_engine: Literal["sequential", "threads"] = "sequential"
    eval_workers: int = 4
    log_level: str = "INFO"
    output_dir: str = "runs"
    progress: bool = False

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)


def get_settings() -> Settings:
    return Settings()
