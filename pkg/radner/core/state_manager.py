from pathlib import Path
from typing import Dict, Optional

import numpy as np

from radner.exceptions import StageArtifactError
from radner.models import SCHEMA_VERSION
from radner.utils.logger import logger

CACHE_DIR = ".stages"

class StageStore:
    """
    Versioned .npz caches of stage outputs inside the output directory, so
    downstream commands can reload upstream artifacts.
    """

    def __init__(self, out_dir: Path, digest: str):
        self.out_dir = Path(out_dir)
        self.digest = digest
        self.cache_dir = self.out_dir / CACHE_DIR

    def path(self, stage: str) -> Path:
        return self.cache_dir / f"{stage}.npz"

    def save(self, stage: str, **arrays: np.ndarray) -> Path:
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        path = self.path(stage)
        np.savez(path, _schema_version=np.array(SCHEMA_VERSION), _config_hash=np.array(self.digest),
                 **{k: np.asarray(v) for k, v in arrays.items()})
        logger.debug(f"cached stage '{stage}' -> {path}")
        return path

    def load(self, stage: str, required_by: Optional[str] = None) -> Dict[str, np.ndarray]:
        path = self.path(stage)
        who = f" (needed by '{required_by}')" if required_by else ""
        if not path.exists():
            raise StageArtifactError(f"stage '{stage}' has not been run for this output directory{who}",
                                     missing=str(path))
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
        version = str(arrays.pop("_schema_version", ""))
        digest = str(arrays.pop("_config_hash", ""))
        if version != SCHEMA_VERSION:
            raise StageArtifactError(f"stage '{stage}' cache has schema {version!r}, expected {SCHEMA_VERSION!r}{who}",
                                     path=str(path))
        if digest != self.digest:
            raise StageArtifactError(f"stage '{stage}' cache was produced by a different configuration{who}",
                                     path=str(path), cached=digest, current=self.digest)
        return arrays
