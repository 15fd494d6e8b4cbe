"""
Core module - the numerical engine

Systems, extremals, minimal-time synthesis, escape patches, hysteresis
shells and the hybrid executor. No CLI, no I/O beyond the writer helpers.
"""

from .errors import QmtError, StageError
from .hybrid import OMEGA, HybridArc, HybridFeedback, certify_arc, execute_hybrid
from .system import ControlSystem, brockett_system, heisenberg_system, system_by_name

__all__ = [
    "QmtError",
    "StageError",
    "OMEGA",
    "HybridArc",
    "HybridFeedback",
    "certify_arc",
    "execute_hybrid",
    "ControlSystem",
    "brockett_system",
    "heisenberg_system",
    "system_by_name",
]
