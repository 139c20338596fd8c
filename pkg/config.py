import logging
import os
import sys
from typing import Optional

from dotenv import load_dotenv

load_dotenv()


# Simple settings class read from the environment (and an optional .env file)
class Settings:
    # Worker threads for per-sample generation and evaluation
    HDC_THREADS = max(1, int(os.getenv("HDC_THREADS", os.cpu_count() or 1)))

    # Logging
    HDC_LOG_LEVEL = os.getenv("HDC_LOG_LEVEL", "INFO").upper()
    HDC_LOG_FORMAT = os.getenv("HDC_LOG_FORMAT", "%(asctime)s %(levelname)s %(name)s: %(message)s")

    # Slow tests (full experiments) are opt-in
    HDC_RUN_SLOW = os.getenv("HDC_RUN_SLOW", "0") == "1"


# Create settings instance
settings = Settings()


def configure_logging(level: Optional[str] = None) -> None:
    """One stderr handler on the root logger; stdout is reserved for key=value summaries."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(settings.HDC_LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level or settings.HDC_LOG_LEVEL)
