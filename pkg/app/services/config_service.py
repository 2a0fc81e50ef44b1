import json
from pathlib import Path

import structlog
from dotenv import load_dotenv
from pydantic import ValidationError

from app.models.model import PipelineConfig
from app.utils.errors import ConfigurationError
from app.utils.observability import configure_logging

logger = structlog.get_logger(__name__)


def load_environment(dotenv_path: Path | None = None) -> bool:
    """Pull OILSCAN_* variables from a .env file (existing environment wins) and reapply logging."""
    loaded = load_dotenv(dotenv_path=dotenv_path, override=False)
    configure_logging()
    return loaded


class ConfigService:
    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path is not None else None

    def load(self) -> PipelineConfig:
        """Validated pipeline config; defaults when no file was given."""
        if self.path is None:
            return PipelineConfig()
        try:
            raw = self.path.read_text(encoding="utf-8")
        except OSError as e:
            logger.error("config_read_error", path=str(self.path), error=str(e))
            raise ConfigurationError(f"Config file '{self.path}' cannot be read.") from e

        try:
            data = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Failed to decode config {self.path} as JSON: {e}") from e

        try:
            config = PipelineConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid config {self.path}: {e}") from e
        logger.info("config_loaded", path=str(self.path), seed=config.seed)
        return config
