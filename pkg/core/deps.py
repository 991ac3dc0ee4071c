from pathlib import Path

from core.config import settings


def get_output_root() -> Path:
    """Provide the directory relative run directories resolve against.

    Returns:
        Path: The configured output root.
    """
    return Path(settings.OUTPUT_ROOT)
