"""qmt-hybrid package.

Quasi-minimal-time robust hybrid stabilization of driftless control-affine
systems: minimal-time synthesis, escape patches, hysteresis shells and a
hybrid simulation harness.
"""

__version__ = "0.3.1"
