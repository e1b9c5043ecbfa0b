import logging
import sys
from logging.handlers import RotatingFileHandler

from core.config import settings

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging():
    """
    Configure logging with console and file handlers.

    The file handler is skipped when ``settings.LOG_FILE`` is empty, which is
    what the test suite does to keep the working tree clean.

    Returns:
        logging.Logger: Configured logger instance
    """
    logger = logging.getLogger("lfmmi")
    logger.setLevel(settings.LOG_LEVEL)
    logger.propagate = False

    # Remove existing handlers to prevent duplicate logs on re-import
    logger.handlers.clear()

    # Console Handler
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(settings.LOG_LEVEL)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(console_handler)

    # File Handler
    if settings.LOG_FILE:
        file_handler = RotatingFileHandler(
            settings.LOG_FILE,
            maxBytes=10 * 1024 * 1024,  # 10 MB
            backupCount=5
        )
        file_handler.setLevel(settings.LOG_LEVEL)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(file_handler)

    return logger


# Initialize logger
logger = setup_logging()
