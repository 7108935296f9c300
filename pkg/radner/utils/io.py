import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel

from radner.models import Report, ReportHeader, Verdict


def config_hash(payload: Mapping[str, Any]) -> str:
    """sha256 over the canonical JSON form of a resolved run configuration."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _plain(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_report(path: Path, stage: str, body: Dict[str, Any], digest: str, seed: int,
                 assumptions: Optional[Dict[str, Verdict]] = None) -> Path:
    header = ReportHeader(
        stage=stage,
        config_hash=digest,
        seed=seed,
        generated_at=datetime.now(timezone.utc).isoformat(),
        assumptions=assumptions or {},
    )
    report = Report(header=header, body=_plain(body))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_report(path: Path) -> Report:
    return Report.model_validate_json(path.read_text(encoding="utf-8"))


def grid_frame(times: np.ndarray, points: np.ndarray, columns: Dict[str, np.ndarray]) -> pd.DataFrame:
    """
    Long table with one row per (time node, spatial node). ``points`` has shape
    ``(*shape, K)``; every column has shape ``(M+1, *shape)``.
    """
    K = points.shape[-1]
    flat = points.reshape(-1, K)
    n = flat.shape[0]
    data = {"t": np.repeat(times, n)}
    for k in range(K):
        data[f"x{k + 1}"] = np.tile(flat[:, k], times.size)
    for name, values in columns.items():
        data[name] = np.asarray(values).reshape(times.size * n)
    return pd.DataFrame(data)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path
