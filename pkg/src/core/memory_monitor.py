"""
Memory Monitoring for Field Synthesis

Estimates the footprint of a gridded minimal-time field before allocation,
enforces the configured grid budget, and reports process memory snapshots.

A refused grid costs nothing; one snapshot is taken per pipeline stage.
Without psutil every snapshot reads zero and the worker count comes from
os.cpu_count().
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, Sequence

from .errors import InvalidGrid

try:
    import psutil

    PSUTIL_AVAILABLE = True
except ImportError:
    PSUTIL_AVAILABLE = False

logger = logging.getLogger(__name__)

MAX_FIELD_DIMENSION = 4
MB = 1024 * 1024


@dataclass(frozen=True)
class MemorySnapshot:
    """Process memory in MB, plus the share of system memory in percent."""

    rss_mb: float = 0.0
    vms_mb: float = 0.0
    percent: float = 0.0
    available_mb: float = 0.0

    @classmethod
    def capture(cls) -> "MemorySnapshot":
        if not PSUTIL_AVAILABLE:
            return cls()
        try:
            proc = psutil.Process()
            info = proc.memory_info()
            return cls(
                rss_mb=info.rss / MB,
                vms_mb=info.vms / MB,
                percent=proc.memory_percent(),
                available_mb=psutil.virtual_memory().available / MB,
            )
        except (psutil.NoSuchProcess, psutil.AccessDenied) as exc:
            logger.debug(f"memory snapshot unavailable: {exc}")
            return cls()

    def to_dict(self) -> Dict[str, float]:
        return {
            "rss_mb": round(self.rss_mb, 1),
            "vms_mb": round(self.vms_mb, 1),
            "percent": round(self.percent, 2),
            "available_mb": round(self.available_mb, 1),
            "psutil_available": PSUTIL_AVAILABLE,
        }


def estimate_field_bytes(shape: Sequence[int], n: int) -> int:
    """Bytes held per field: T, winner coords and covector, gradient, coverage, flag grids."""
    nodes = 1
    for size in shape:
        nodes *= int(size)
    per_node = 8 * (1 + (n - 1) + n + n) + 4 + 5
    return nodes * per_node


def check_grid_budget(shape: Sequence[int], n: int, max_mb: float) -> int:
    """Raise InvalidGrid when the field is too large; return the estimate in bytes."""
    if n > MAX_FIELD_DIMENSION:
        raise InvalidGrid(
            f"fields are limited to n <= {MAX_FIELD_DIMENSION}, got n={n}", n=n
        )
    estimate = estimate_field_bytes(shape, n)
    if estimate > max_mb * MB:
        raise InvalidGrid(
            f"grid {tuple(shape)} needs {format_memory_size(estimate / MB)}, "
            f"budget is {format_memory_size(max_mb)}",
            shape=list(shape),
            estimate_bytes=estimate,
        )
    return estimate


def check_memory_pressure(warning_threshold: float, stage: str) -> MemorySnapshot:
    """Snapshot process memory and warn when system usage passes the threshold."""
    snapshot = MemorySnapshot.capture()
    if snapshot.percent > warning_threshold * 100:
        logger.warning(
            f"Memory usage warning at {stage}: {format_memory_size(snapshot.rss_mb)} "
            f"({snapshot.percent:.1f}% of system)"
        )
    else:
        logger.debug(f"memory at {stage}: {format_memory_size(snapshot.rss_mb)}")
    return snapshot


def default_workers() -> int:
    """Physical core count, falling back to logical cores, then 1."""
    physical = psutil.cpu_count(logical=False) if PSUTIL_AVAILABLE else None
    return int(physical or os.cpu_count() or 1)


def format_memory_size(mb: float) -> str:
    """12.0MB, 2.0GB, 3.0TB"""
    for unit in ("MB", "GB"):
        if mb < 1024:
            return f"{mb:.1f}{unit}"
        mb /= 1024
    return f"{mb:.1f}TB"
