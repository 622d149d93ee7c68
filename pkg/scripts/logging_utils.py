import logging
import os
import sys
from typing import Optional

LOGGER_NAME = "wildflow"
LEVEL_ENV = "WILDFLOW_LOG_LEVEL"


def setup_logging(level: Optional[int] = None) -> logging.Logger:
    """
    Configure basic structured logging and return the project logger.

    The level defaults to $WILDFLOW_LOG_LEVEL (a level name) or INFO. Python
    warnings, e.g. numpy overflow in a defect evaluation, go to the same stream.
    """
    if level is None:
        name = os.environ.get(LEVEL_ENV, "INFO").upper()
        level = logging.getLevelName(name) if isinstance(logging.getLevelName(name), int) else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    logging.captureWarnings(True)
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(level)
    return logger
