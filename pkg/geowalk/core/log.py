"""
Logging setup - one timestamped line per record on stderr
"""

import logging
import sys

from geowalk.core.config import LOG_LEVEL

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def setup_logging(level: str = None) -> None:
    """Configure the root logger once; later calls only adjust the level"""
    level = (level or LOG_LEVEL).upper()
    root = logging.getLogger()
    if not any(getattr(h, "_geowalk", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._geowalk = True
        root.addHandler(handler)
    root.setLevel(level)
