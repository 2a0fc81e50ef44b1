import logging
import os

import structlog

LOG_LEVEL_ENV = "OILSCAN_LOG_LEVEL"
LOG_FORMAT_ENV = "OILSCAN_LOG_FORMAT"

# Setup stdlib logging with structlog formatter
logging_handler = logging.StreamHandler()
logging_logger = logging.getLogger()
logging_logger.addHandler(logging_handler)


def configure_logging(level: str | None = None, fmt: str | None = None) -> None:
    """(Re)configure structlog; level/format default to the OILSCAN_LOG_* environment."""
    level_name = (level or os.environ.get(LOG_LEVEL_ENV, "INFO")).upper()
    fmt = (fmt or os.environ.get(LOG_FORMAT_ENV, "json")).lower()
    renderer = structlog.dev.ConsoleRenderer() if fmt == "console" else structlog.processors.JSONRenderer()

    logging_handler.setFormatter(structlog.stdlib.ProcessorFormatter(processor=renderer))
    logging_logger.setLevel(getattr(logging, level_name, logging.INFO))

    # Setup structlog
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.stdlib.ProcessorFormatter.wrap_for_formatter,
        ],
        wrapper_class=structlog.stdlib.BoundLogger,
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )


configure_logging()
