import json
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import structlog

logger = structlog.get_logger(__name__)

SCHEMA_VERSION = 1


def _default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    if isinstance(value, Path):
        return str(value)
    return str(value)


def dumps_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_default)


def save_json(data: Any, path: Path) -> Path:
    """Serialize data to JSON (stamped with the schema version when it is a dict) and write it."""
    if isinstance(data, dict) and "schema_version" not in data:
        data = {"schema_version": SCHEMA_VERSION, **data}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(data) + "\n", encoding="utf-8")
    logger.info("file_saved", path=str(path), kind="json")
    return path


def load_json(path: Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_csv(frame: pd.DataFrame, path: Path) -> Path:
    """Write a DataFrame with its header row and no index."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info("file_saved", path=str(path), kind="csv", rows=len(frame))
    return path


def save_html(html: str, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(html, encoding="utf-8")
    logger.info("file_saved", path=str(path), kind="html")
    return path
