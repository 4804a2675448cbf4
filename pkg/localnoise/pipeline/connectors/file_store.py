import logging
import os
import tempfile
from pathlib import Path
from typing import Dict, List, Union

from localnoise.helpers.general_utils import sha256_bytes
from localnoise.pipeline.schemas import ArtifactEntry

from .artifact_store import ArtifactStore

LOGGER = logging.getLogger(__name__)


class FileStore(ArtifactStore):
    """Writes artifacts under one output directory, each via temp file + rename.

    Every written path is remembered with its sha256 so the run manifest can
    list it, and `rollback` can remove a failed run's partial outputs.
    """

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self._written: Dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def write_bytes(self, name: str, payload: bytes) -> str:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(payload)
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        self._written[name] = sha256_bytes(payload)
        LOGGER.debug("wrote %s (%d bytes)", target, len(payload))
        return str(target)

    def artifacts(self) -> List[ArtifactEntry]:
        return [ArtifactEntry(path=name, sha256=digest) for name, digest in sorted(self._written.items())]

    def rollback(self) -> None:
        for name in list(self._written):
            self.path(name).unlink(missing_ok=True)
        if self._written:
            LOGGER.info("removed %d partial outputs from %s", len(self._written), self.output_dir)
        self._written.clear()
