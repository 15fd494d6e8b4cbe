#!/usr/bin/env python3
"""
Tests for escape patches and the singular cover.

The fixture singular set is a segment of the x3-axis sampled every 0.02,
as the cut-locus estimator reports it for Brockett; its tube of width
0.09 is left exactly when the horizontal distance reaches 0.1.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from core.errors import EscapeSearchFailure
from core.escape import (
    SHELL_LEVELS,
    EscapePatch,
    PatchCover,
    build_escape_patch,
    candidate_controls,
    cover_singular_region,
    excursion_from_table,
    excursion_table,
    find_escape_control,
    smooth_transition,
    weighted_radius,
)
from core.synthesis import SingularSetModel

WIDTH = 0.09


@pytest.fixture(scope="module")
def axis_model():
    z = np.round(np.arange(0.5, 1.5001, 0.02), 10)
    points = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])
    return SingularSetModel.from_points(points, spacing=0.02)


@pytest.fixture(scope="module")
def patch(brockett, axis_model):
    return build_escape_patch(
        brockett, [0.0, 0.0, 1.0], axis_model, epsilon=0.5, noise_budget=0.05,
        r1=0.2, width=WIDTH, candidates=8, seeds=8,
    )


class TestHelpers:
    def test_smooth_transition(self):
        assert smooth_transition(-1.0) == 0.0
        assert smooth_transition(0.0) == 0.0
        assert smooth_transition(0.5) == pytest.approx(0.5)
        assert smooth_transition(1.0) == 1.0
        assert smooth_transition(0.3) < smooth_transition(0.7)

    def test_weighted_radius(self):
        assert weighted_radius(np.array([0.0, 0.0, 0.4]), np.array([1.0, 1.0, 2.0])) == pytest.approx(0.2)

    def test_excursion_table(self):
        table = excursion_table([0.1, 0.2, 0.2], [0.05, 0.3, 0.25])
        np.testing.assert_allclose(table, [[0.1, 0.1], [0.2, 0.3]])
        assert excursion_from_table(table, 0.05) == pytest.approx(0.05)
        assert excursion_from_table(table, 0.15) == pytest.approx(0.2)
        assert excursion_from_table(table, 0.5) == pytest.approx(0.6)

    def test_empty_excursion_table(self):
        assert excursion_table([], []).shape == (0, 2)
        assert excursion_from_table(np.zeros((0, 2)), 0.3) == 0.3

    def test_candidates_are_unit(self, brockett):
        controls = candidate_controls(brockett, np.array([0.0, 0.0, 1.0]), 8)
        assert controls.shape[1] == 2
        np.testing.assert_allclose(controls[0], [1.0, 0.0])
        np.testing.assert_allclose(np.linalg.norm(controls, axis=1), 1.0)


class TestEscapeSearch:
    def test_first_field_exits_tube(self, brockett, axis_model):
        direction, exit_time = find_escape_control(
            brockett, np.array([0.0, 0.0, 1.0]), axis_model, WIDTH, 0.25, candidates=16
        )
        np.testing.assert_allclose(direction, [1.0, 0.0], atol=1e-12)
        assert exit_time == pytest.approx(0.1, abs=1e-6)

    def test_no_exit_within_horizon(self, brockett, axis_model):
        with pytest.raises(EscapeSearchFailure):
            find_escape_control(brockett, np.array([0.0, 0.0, 1.0]), axis_model, WIDTH, 0.05, candidates=8)


class TestEscapePatch:
    def test_certified_patch(self, patch):
        np.testing.assert_allclose(patch.direction, [1.0, 0.0], atol=1e-12)
        assert 0.0 < patch.tau < 0.5
        assert 0.0 < patch.rho <= 0.05
        assert patch.certification["runs"] == 9
        assert patch.delta_table.shape[1] == 2

    def test_nested_shells(self, patch):
        radii = patch.radii
        assert len(radii) == SHELL_LEVELS
        assert np.all(np.diff(radii) > 0)
        assert all(patch.gap(level) > 0 for level in range(1, SHELL_LEVELS))

    def test_control_cut_off(self, patch):
        np.testing.assert_allclose(patch.control(patch.center), patch.direction)
        far = patch.center + np.array([5.0, 0.0, 0.0])
        np.testing.assert_array_equal(patch.control(far), np.zeros(2))

    def test_margin_vanishes_at_target(self, patch):
        assert patch.rho_at(patch.target) == 0.0
        assert patch.rho_at(patch.center) == pytest.approx(patch.rho)

    def test_excursion_bound_dominates_radius(self, patch):
        for radius in (0.5, 1.0, 2.0):
            assert patch.excursion_bound(radius) >= radius

    def test_centre_off_singular_set(self, brockett, axis_model):
        with pytest.raises(ValueError):
            build_escape_patch(brockett, [0.5, 0.0, 1.0], axis_model, epsilon=0.5, noise_budget=0.05)

    def test_empty_model(self, brockett):
        empty = SingularSetModel.from_points(np.zeros((0, 3)), spacing=0.02)
        with pytest.raises(EscapeSearchFailure):
            build_escape_patch(brockett, [0.0, 0.0, 1.0], empty, epsilon=0.5, noise_budget=0.05)

    def test_serialized_patch(self, patch):
        restored = EscapePatch.from_dict(patch.to_dict())
        np.testing.assert_array_equal(restored.direction, patch.direction)
        np.testing.assert_array_equal(restored.delta_table, patch.delta_table)
        assert restored.radius(3) == patch.radius(3)


class TestCover:
    def test_empty_model_gives_empty_cover(self, brockett):
        empty = SingularSetModel.from_points(np.zeros((0, 3)), spacing=0.02)
        cover = cover_singular_region(brockett, empty, epsilon=0.5, noise_budget=0.05)
        assert len(cover) == 0
        assert cover.nearest_patch([0.0, 0.0, 1.0]) is None

    def test_axis_cover(self, brockett, axis_model):
        cover = cover_singular_region(
            brockett, axis_model, epsilon=0.5, noise_budget=0.05,
            r1=0.2, width=WIDTH, candidates=8, seeds=4, threads=2,
        )
        assert len(cover) >= 2
        assert cover.stats["uncovered"] == 0
        assert np.all(cover.membership_counts(axis_model.points) >= 1)
        assert cover.components == {1: cover.labels}
        assert cover.labels == list(range(len(cover)))
        assert cover.stats["max_tau"] < 0.5

    def test_nearest_patch(self, brockett, axis_model):
        cover = cover_singular_region(
            brockett, axis_model, epsilon=0.5, noise_budget=0.05, r1=0.2, width=WIDTH, candidates=8, seeds=4,
        )
        for p in cover:
            assert cover.nearest_patch(p.center).label == p.label
        assert isinstance(PatchCover.from_dict(cover.to_dict()).patch(cover.labels[-1]), EscapePatch)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
