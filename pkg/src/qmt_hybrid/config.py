"""
Runtime configuration for qmt-hybrid.

Sensible defaults with optional environment variable overrides; the
scenario file (scenario.py) covers everything that changes results.
"""

import logging
import os
from typing import Optional

from core.memory_monitor import default_workers

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class RuntimeConfig:
    """Process-level knobs; none of them changes a numerical result."""

    DEFAULT_THREADS = 0  # 0 = one worker per physical core
    DEFAULT_MAX_GRID_MB = 512
    DEFAULT_CHUNK_ARCS = 256  # fixed batch size keeps output thread-independent
    DEFAULT_LOG_LEVEL = "WARNING"
    DEFAULT_MEMORY_WARNING_THRESHOLD = 0.8

    def __init__(self):
        self.threads = self._get_int_env("QMTH_THREADS", self.DEFAULT_THREADS)
        self.max_grid_mb = self._get_float_env("QMTH_MAX_GRID_MB", self.DEFAULT_MAX_GRID_MB)
        self.chunk_arcs = self._get_int_env("QMTH_CHUNK_ARCS", self.DEFAULT_CHUNK_ARCS)
        self.log_level = os.environ.get("QMTH_LOG_LEVEL", self.DEFAULT_LOG_LEVEL).upper()
        self.memory_warning_threshold = self._get_float_env(
            "QMTH_MEMORY_WARNING_THRESHOLD", self.DEFAULT_MEMORY_WARNING_THRESHOLD
        )

        self._validate_config()

    def _get_int_env(self, key: str, default: int) -> int:
        """Get integer from environment variable with fallback"""
        try:
            value = os.environ.get(key)
            if value is not None:
                return int(value)
        except (ValueError, TypeError):
            pass
        return default

    def _get_float_env(self, key: str, default: float) -> float:
        """Get float from environment variable with fallback"""
        try:
            value = os.environ.get(key)
            if value is not None:
                return float(value)
        except (ValueError, TypeError):
            pass
        return default

    def _validate_config(self):
        if self.threads < 0:
            raise ValueError("threads must be nonnegative")
        if self.max_grid_mb <= 0:
            raise ValueError("max_grid_mb must be positive")
        if self.chunk_arcs <= 0:
            raise ValueError("chunk_arcs must be positive")
        if self.log_level not in LOG_LEVELS:
            raise ValueError(f"log_level must be one of {LOG_LEVELS}, got {self.log_level}")
        if not 0.0 < self.memory_warning_threshold <= 1.0:
            raise ValueError("memory_warning_threshold must be between 0.0 and 1.0")

    def worker_count(self, override: Optional[int] = None) -> int:
        """Explicit override, then QMTH_THREADS, then the physical core count."""
        if override is not None and override > 0:
            return int(override)
        if self.threads > 0:
            return self.threads
        return default_workers()

    def log_level_value(self) -> int:
        return int(getattr(logging, self.log_level))

    def __repr__(self) -> str:
        return (
            f"RuntimeConfig("
            f"threads={self.threads}, "
            f"max_grid_mb={self.max_grid_mb}, "
            f"chunk_arcs={self.chunk_arcs}, "
            f"log_level={self.log_level}, "
            f"memory_warning_threshold={self.memory_warning_threshold})"
        )


_config: Optional[RuntimeConfig] = None


def get_runtime_config() -> RuntimeConfig:
    """Get global runtime configuration instance"""
    global _config
    if _config is None:
        _config = RuntimeConfig()
    return _config


def reset_config():
    """Reset configuration (mainly for testing)"""
    global _config
    _config = None


CONFIG_DOCS = """
Runtime Configuration Environment Variables:

- QMTH_THREADS: Worker threads, 0 = physical core count (default: 0)
- QMTH_MAX_GRID_MB: Memory budget for one field grid (default: 512)
- QMTH_CHUNK_ARCS: Arcs per shooting batch (default: 256)
- QMTH_LOG_LEVEL: Log level for the CLI (default: WARNING)
- QMTH_MEMORY_WARNING_THRESHOLD: Memory warning threshold 0.0-1.0 (default: 0.8)

Example usage:
    export QMTH_THREADS=4
    export QMTH_MAX_GRID_MB=1024
    export QMTH_LOG_LEVEL=INFO
"""
