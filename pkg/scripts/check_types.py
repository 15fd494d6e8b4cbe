#!/usr/bin/env python3
"""
Type checking with MyPy against a recorded error baseline.

Usage:
  python scripts/check_types.py                 # Check and list errors
  python scripts/check_types.py --fast          # Error count only
  python scripts/check_types.py --fix-baseline  # Record the current count
"""

import argparse
import re
import subprocess
import sys
from pathlib import Path

BASELINE_FILE = Path(__file__).parent / "mypy_baseline.txt"
TARGET_ERRORS = 0


def run_mypy() -> tuple[int, str]:
    """Run MyPy on both packages and return error count and output."""
    try:
        result = subprocess.run(
            [sys.executable, "-m", "mypy", "src/core", "src/qmt_hybrid"],
            capture_output=True,
            text=True,
            encoding="utf-8",
            errors="replace",
            cwd=Path(__file__).parent.parent,
        )
    except OSError as e:
        print(f"Error running MyPy: {e}")
        return -1, str(e)
    output = (result.stdout or "") + (result.stderr or "")
    match = re.search(r"Found (\d+) errors? in", output)
    return (int(match.group(1)) if match else 0), output


def read_baseline() -> int:
    try:
        return int(BASELINE_FILE.read_text().strip())
    except (OSError, ValueError):
        return TARGET_ERRORS


def main():
    parser = argparse.ArgumentParser(description="MyPy type checking with regression detection")
    parser.add_argument("--fast", action="store_true", help="Only show the error count")
    parser.add_argument("--fix-baseline", action="store_true", help="Record the current error count")
    args = parser.parse_args()

    print("🔍 Running MyPy type checking...")
    error_count, output = run_mypy()
    if error_count == -1:
        print("❌ Failed to run MyPy")
        sys.exit(1)

    baseline = read_baseline()
    if args.fix_baseline:
        BASELINE_FILE.write_text(f"{error_count}\n")
        print(f"✅ Baseline updated from {baseline} to {error_count}")
        sys.exit(0)

    print("\n📊 Type checking results:")
    print(f"   Current errors: {error_count}")
    print(f"   Baseline:       {baseline}")
    print(f"   Target:         {TARGET_ERRORS}")

    if error_count > baseline:
        print(f"❌ Regression detected! {error_count - baseline} new type errors")
    elif error_count < baseline:
        print(f"✅ Good! Reduced errors by {baseline - error_count}")
    else:
        print("✅ No regression detected")
    if error_count and not args.fast:
        print(output)
    sys.exit(1 if error_count > baseline else 0)


if __name__ == "__main__":
    main()
