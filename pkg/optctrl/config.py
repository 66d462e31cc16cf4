"""
Application Configuration
=========================

Loads settings from environment variables.
Run parameters (K, seed, epsilon, ...) live in schemas.py; this module only
holds process-wide knobs.
"""
import os
from pathlib import Path
from functools import lru_cache
from typing import Optional

from optctrl.exceptions import ConfigError

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _read_threads(raw: str) -> int:
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"OPTCTRL_THREADS must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"OPTCTRL_THREADS must be >= 1, got {threads}")
    return threads


class Settings:
    """Process settings loaded from environment."""

    def __init__(self):
        # Parallelism cap for candidate evaluations and inverse column solves
        self.threads: int = _read_threads(os.getenv("OPTCTRL_THREADS", "1"))

        # Inverse cache
        cache_dir = os.getenv("OPTCTRL_CACHE_DIR")
        self.cache_dir: Optional[Path] = Path(cache_dir) if cache_dir else None

        # Logging
        self.log_level: str = os.getenv("OPTCTRL_LOG_LEVEL", "INFO").upper()
        if self.log_level not in LOG_LEVELS:
            raise ConfigError(f"OPTCTRL_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {self.log_level!r}")
        self.debug: bool = os.getenv("OPTCTRL_DEBUG", "false").lower() == "true"

        # Paths
        self.base_dir: Path = Path(__file__).parent
        self.templates_dir: Path = self.base_dir / "templates"


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
