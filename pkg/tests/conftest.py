"""Pytest configuration and shared fixtures.

Fields and feedbacks are expensive; fixtures that build them are
session-scoped and use coarse grids. Full-scale checks live in
test_acceptance.py and carry the slow marker.
"""

import os
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from core.escape import EscapePatch, PatchCover
from core.extremal import CovectorSlice, IntegratorOptions
from core.hysteresis import DEFAULT_TUBE_RADII, OmegaShells, Segment, ShellFamily, assemble_feedback
from core.synthesis import (
    GridSpec,
    SingularSetModel,
    SliceGrid,
    build_time_field,
    estimate_cut_locus,
    synthesize_front,
)
from core.system import brockett_system

SMALL_SCENARIO = """
[grid]
lower = -1.0
upper = 1.0
spacing = 0.1

[slice]
angles = 24
transverse_max = 6.0
transverse_count = 13
refine_rounds = 0

[integrator]
sample_stride = 0.02
t_max = 2.0

[escape]
seeds = 8
candidates = 8

[hybrid]
epsilon = 0.5
seeds = 2
flow_step = 0.01

[sweep]
points_per_axis = 3
box_radius = 0.5
envelope_radii = 2
"""


@pytest.fixture(scope="session")
def brockett():
    return brockett_system()


@pytest.fixture(scope="session")
def coarse_options():
    return IntegratorOptions(sample_stride=0.02)


@pytest.fixture(scope="session")
def small_front(brockett, coarse_options):
    """Fronts of a 24 x 13 slice grid up to t = 2, kept within the unit box."""
    slice_grid = SliceGrid.tensor(CovectorSlice(brockett), angles=24, transverse_max=6.0, transverse_count=13)
    box = GridSpec.cube(3, 1.0, 0.1)
    return synthesize_front(brockett, slice_grid, 2.0, coarse_options, box=box)


@pytest.fixture(scope="session")
def small_field(small_front):
    """Time field on [-1, 1]^3 with h = 0.1 and its cut-locus model."""
    field_ = build_time_field(small_front, GridSpec.cube(3, 1.0, 0.1))
    model = estimate_cut_locus(field_)
    return field_, model


@pytest.fixture
def small_scenario_file(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_SCENARIO)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_patch(label: int, z: float, r1: float = 0.35, rho: float = 0.01) -> EscapePatch:
    """Uncertified patch on the x3-axis pushing along the first field."""
    return EscapePatch(
        label=label,
        component=1,
        center=np.array([0.0, 0.0, z]),
        weights=np.array([1.0, 1.0, 2.0]),
        r1=r1,
        direction=np.array([1.0, 0.0]),
        rho=rho,
        tau=0.1,
        pinch=0.06,
        target=np.zeros(3),
        exit_time=0.1,
    )


def horizontal_controller(x):
    """Drives x1, x2 toward zero; bounded by one."""
    v = -np.asarray(x, dtype=float)[:2]
    return v / max(1.0, float(np.linalg.norm(v)))


@pytest.fixture(scope="session")
def axis_family():
    """
    Hand-built shells: singular segment {x1 = x2 = 0, 1 <= x3 <= 2},
    default tube radii pinched over 0.06, patches 0, 1, 2 centred at
    x3 = 1.0, 1.5, 2.0.
    """
    z = np.round(np.arange(1.0, 2.0001, 0.02), 10)
    model = SingularSetModel.from_points(np.column_stack([np.zeros_like(z), np.zeros_like(z), z]), spacing=0.02)
    omega = OmegaShells(
        [Segment(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 2.0]), 1)],
        np.array(DEFAULT_TUBE_RADII),
        0.06,
        np.zeros(3),
    )
    cover = PatchCover([make_patch(0, 1.0), make_patch(1, 1.5), make_patch(2, 2.0)], {1: [0, 1, 2]})
    return ShellFamily(omega, cover, model)


@pytest.fixture(scope="session")
def axis_feedback(brockett, axis_family):
    k_patches = {p.label: p.control for p in axis_family.cover}
    return assemble_feedback(axis_family, k_patches, horizontal_controller, "corrected", sys=brockett)


@pytest.fixture(scope="session")
def small_artifacts(tmp_path_factory):
    """(scenario path, output dir, synth result) for the small scenario."""
    from core.command_registry import execute_command

    root = tmp_path_factory.mktemp("small")
    path = root / "small.ini"
    path.write_text(SMALL_SCENARIO)
    out = root / "out"
    result = execute_command("synth", config=str(path), out=str(out), threads=1)
    assert result["success"], result
    return path, out, result


# Pytest configuration
def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line("markers", "integration: marks tests as integration tests")
    config.addinivalue_line("markers", "unit: marks tests as unit tests")
    config.addinivalue_line("markers", "slow: marks tests as slow running")


INTEGRATION_FILES = ("test_commands", "test_cli")
SLOW_FILES = ("test_acceptance",)


def pytest_collection_modifyitems(config, items):
    """Automatically mark tests based on their file name."""
    for item in items:
        if any(name in item.nodeid for name in SLOW_FILES):
            item.add_marker(pytest.mark.slow)
            item.add_marker(pytest.mark.integration)
        elif any(name in item.nodeid for name in INTEGRATION_FILES):
            item.add_marker(pytest.mark.integration)
        else:
            item.add_marker(pytest.mark.unit)
