import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import structlog

from app import __version__
from app.models.model import RunManifest
from app.utils.utils import save_json

logger = structlog.get_logger(__name__)

MANIFEST_NAME = "run_manifest.json"


class EventService:

    def __init__(self, command: str, out_dir: Path | None = None):
        self.command = command
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.started_at = datetime.now(timezone.utc)
        self.run_id = self.started_at.strftime("%Y%m%d_%H%M%S")
        self.events: list[dict[str, Any]] = []
        self.outputs: list[str] = []
        self._clock = time.perf_counter()

    def _record(self, level: str, log_type: str, message: str, details: dict[str, Any]) -> None:
        self.events.append({"level": level, "type": log_type, "message": message, **details})

    def log_info(self, log_type: str, message: str = "", **details: Any) -> None:
        logger.info(log_type, message=message or None, **details)
        self._record("info", log_type, message, details)

    def log_error(self, log_type: str, message: str = "", **details: Any) -> None:
        logger.error(log_type, message=message or None, **details)
        self._record("error", log_type, message, details)

    def log_success(self, log_type: str, message: str = "", **details: Any) -> None:
        logger.info(log_type, message=message or None, status="success", **details)
        self._record("success", log_type, message, details)

    def record_output(self, path: Path) -> Path:
        self.outputs.append(str(path))
        return path

    def write_manifest(
        self,
        status: str = "success",
        config: dict[str, Any] | None = None,
        inputs: dict[str, str] | None = None,
        seed: int | None = None,
    ) -> Path | None:
        """Persist run_manifest.json into the output directory, if there is one."""
        if self.out_dir is None:
            return None
        manifest = RunManifest(
            command=self.command,
            run_id=self.run_id,
            status=status,
            seed=seed,
            tool_version=__version__,
            config=config or {},
            inputs={k: str(v) for k, v in (inputs or {}).items()},
            outputs=sorted(self.outputs),
            started_at=self.started_at.isoformat(),
            duration_s=round(time.perf_counter() - self._clock, 6),
            events=self.events,
        )
        return save_json(manifest.model_dump(), self.out_dir / MANIFEST_NAME)


# ---------------------------------------------------------------------------
# Global singleton
# ---------------------------------------------------------------------------

_instance: "EventService | None" = None


def init_event_service(command: str, out_dir: Path | None = None) -> EventService:
    global _instance
    _instance = EventService(command, out_dir)
    structlog.contextvars.bind_contextvars(command=command, run_id=_instance.run_id)
    return _instance


def get_event_service() -> EventService:
    if _instance is None:
        raise RuntimeError(
            "EventService has not been initialized. "
            "Call init_event_service() before logging."
        )
    return _instance


def reset_event_service() -> None:
    global _instance
    _instance = None
    structlog.contextvars.clear_contextvars()
