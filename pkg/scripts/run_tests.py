#!/usr/bin/env python3
"""Test runner for qmt-hybrid.

Marker selections: unit tests use coarse grids and finish in seconds,
integration tests run the command pipeline on a small scenario, slow tests
are the full-scale Brockett acceptance checks.
"""

import argparse
import os
import subprocess
import sys
from pathlib import Path


def run_command(cmd, description, cwd=None):
    """Run a command and report its outcome."""
    print(f"\n{'='*60}")
    print(f"🔧 {description}")
    print(f"{'='*60}")
    print(f"Command: {' '.join(cmd)}")

    result = subprocess.run(cmd, cwd=cwd, capture_output=True, text=True)
    if result.stdout:
        print(result.stdout)
    if result.returncode != 0:
        print(f"❌ Failed with exit code {result.returncode}")
        if result.stderr:
            print(f"Stderr:\n{result.stderr}")
        return False
    print("✅ Success!")
    return True


def marker_expression(args) -> str:
    selected = []
    if args.unit:
        selected.append("unit")
    if args.integration:
        selected.append("integration")
    if args.slow:
        selected.append("slow")
    expression = " or ".join(selected)
    if args.fast:
        expression = f"({expression}) and not slow" if expression else "not slow"
    return expression


def main():
    parser = argparse.ArgumentParser(description="Run tests for qmt-hybrid")
    parser.add_argument("--unit", action="store_true", help="Run unit tests")
    parser.add_argument("--integration", action="store_true", help="Run pipeline tests on the small scenario")
    parser.add_argument("--slow", action="store_true", help="Run the full-scale acceptance tests")
    parser.add_argument("--fast", action="store_true", help="Skip slow tests")
    parser.add_argument("--coverage", action="store_true", help="Run with coverage reporting")
    parser.add_argument("--verbose", "-v", action="store_true", help="Verbose output")
    parser.add_argument("--file", type=str, help="Run one test file")
    args = parser.parse_args()

    project_root = Path(__file__).parent.parent
    os.chdir(project_root)

    cmd = [sys.executable, "-m", "pytest", f"tests/{args.file}" if args.file else "tests/"]
    expression = marker_expression(args)
    if expression:
        cmd.extend(["-m", expression])
    cmd.append("-v" if args.verbose else "-q")
    if args.coverage:
        cmd.extend(["--cov=src/core", "--cov=src/qmt_hybrid", "--cov-report=html", "--cov-report=term"])
    cmd.append("--tb=short")

    success = run_command(cmd, "Running pytest", cwd=project_root)
    if args.coverage and success:
        print(f"\n📊 Coverage report generated: {project_root}/htmlcov/index.html")

    print(f"\n{'='*60}")
    print("🎉 All tests passed!" if success else "💥 Some tests failed!")
    return 0 if success else 1


if __name__ == "__main__":
    sys.exit(main())
