"""
Shared constants for the qmt-hybrid commands.
"""

# Artifact names inside the output directory
FIELD_FILE = "field.mtf"
COVER_FILE = "cover.json"
FEEDBACK_FILE = "feedback.json"
FRONT_FILE = "front.csv"
CUTLOCUS_FILE = "cutlocus.csv"
SWEEP_FILE = "sweep.csv"
SWEEP_SUMMARY_FILE = "sweep_summary.json"

# Per-run artifacts, formatted with the run index
ARC_CSV = "arc_{k}.csv"
JUMPS_CSV = "jumps_{k}.csv"
CERTIFICATE_TXT = "certificate_{k}.txt"
ARC_STORE = "arc_{k}.msgpack"
ARC_STORE_GLOB = "arc_*.msgpack"

MANIFEST_VERSION = 2

# Initial labels accepted by simulate
S0_NEAREST = "nearest"
S0_OMEGA = "omega"

# Fallback horizon when the start point has no field value
DEFAULT_HORIZON = 10.0
HORIZON_SLACK = 1.0

COMMANDS = ("synth", "simulate", "sweep", "cutlocus", "certify")
