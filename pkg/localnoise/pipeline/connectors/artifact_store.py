from abc import ABC, abstractmethod
from typing import List

import pandas as pd
from pydantic import BaseModel

from localnoise.pipeline.schemas import ArtifactEntry


class ArtifactStore(ABC):
    """Destination for the files one CLI action produces."""

    @abstractmethod
    def write_bytes(self, name: str, payload: bytes) -> str:
        pass

    def write_frame(self, name: str, frame: pd.DataFrame) -> str:
        text = frame.to_csv(index=False, lineterminator="\n", float_format="%.9g")
        return self.write_bytes(name, text.encode("utf-8"))

    def write_model(self, name: str, model: BaseModel) -> str:
        return self.write_bytes(name, (model.model_dump_json(indent=2) + "\n").encode("utf-8"))

    @abstractmethod
    def artifacts(self) -> List[ArtifactEntry]:
        pass

    @abstractmethod
    def rollback(self) -> None:
        pass
