import sys
from typing import Optional

from loguru import logger

LOG_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>"
)


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Install the process-wide log sinks.

    Library modules only call ``logger``; sinks are configured once here by the CLI or the app.

    Args:
        level (str): Minimum level for the stderr sink.
        log_file (Optional[str]): Optional file that receives the same records, rotated at 10 MB.
    """
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)
    if log_file:
        logger.add(log_file, level=level.upper(), rotation="10 MB", enqueue=True)
