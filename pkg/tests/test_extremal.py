#!/usr/bin/env python3
"""
Tests for the Hamiltonian, extremal controls and the exponential map.

Brockett extremals are known in closed form: with p0 = (1, 0, λ) the
control rotates at rate -2λ, so the first conjugate time is π/|λ|.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from core.errors import DegenerateCovector, InvalidDimension, OffSlice
from core.extremal import (
    CovectorSlice,
    IntegratorOptions,
    conjugate_time,
    exponential_map,
    extremal_control,
    extremal_rhs,
    first_sign_change,
    hamiltonian_h1,
    sample_times,
)


def brockett_extremal(lam: float, t: float) -> np.ndarray:
    """Closed-form endpoint of the Brockett extremal with p0 = (1, 0, lam)."""
    w = 2.0 * lam
    return np.array(
        [
            np.sin(w * t) / w,
            (np.cos(w * t) - 1.0) / w,
            t / w - np.sin(w * t) / (w * w),
        ]
    )


class TestHamiltonian:
    @pytest.mark.parametrize(
        "x, p, expected",
        [
            ((0.0, 0.0, 0.0), (3.0, 4.0, 0.0), 5.0),
            ((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 0.0),
            ((0.0, 1.0, 0.0), (0.0, 0.0, 1.0), 1.0),
        ],
    )
    def test_h1_values(self, brockett, x, p, expected):
        assert hamiltonian_h1(brockett, np.array(x), np.array(p)) == pytest.approx(expected)

    def test_dimension_mismatch(self, brockett):
        with pytest.raises(InvalidDimension):
            hamiltonian_h1(brockett, np.zeros(3), np.zeros(2))

    def test_controls(self, brockett):
        np.testing.assert_allclose(extremal_control(brockett, np.zeros(3), np.array([1.0, 0.0, 0.0])).u, [1.0, 0.0])
        np.testing.assert_allclose(extremal_control(brockett, np.zeros(3), np.array([0.0, 2.0, 0.0])).u, [0.0, 1.0])

    def test_abnormal_direction(self, brockett):
        with pytest.raises(DegenerateCovector):
            extremal_control(brockett, np.zeros(3), np.array([0.0, 0.0, 1.0]))

    @pytest.mark.parametrize("p", [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)])
    def test_rhs_without_vertical_component(self, brockett, p):
        x_dot, p_dot = extremal_rhs(brockett, np.zeros(3), np.array(p))
        np.testing.assert_allclose(x_dot, [p[0], p[1], 0.0])
        np.testing.assert_allclose(p_dot, np.zeros(3))

    def test_rhs_matches_finite_differences(self, brockett):
        x, p = np.array([0.1, -0.2, 0.3]), np.array([1.0, 0.0, 1.0])
        x_dot, p_dot = extremal_rhs(brockett, x, p)
        step = 1e-6
        eye = np.eye(3)
        dH_dx = np.array(
            [(hamiltonian_h1(brockett, x + step * e, p) - hamiltonian_h1(brockett, x - step * e, p)) / (2 * step) for e in eye]
        )
        dH_dp = np.array(
            [(hamiltonian_h1(brockett, x, p + step * e) - hamiltonian_h1(brockett, x, p - step * e)) / (2 * step) for e in eye]
        )
        np.testing.assert_allclose(x_dot, dH_dp, atol=1e-6)
        np.testing.assert_allclose(p_dot, -dH_dx, atol=1e-6)


class TestCovectorSlice:
    def test_brockett_chart(self, brockett):
        chart = CovectorSlice(brockett)
        np.testing.assert_allclose(chart.to_covector(np.array([0.0, 2.0])), [1.0, 0.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(chart.to_covector(np.array([np.pi / 2, -1.0])), [0.0, 1.0, -1.0], atol=1e-12)

    def test_chart_points_lie_on_slice(self, brockett, rng):
        chart = CovectorSlice(brockett)
        for coords in rng.uniform(-3.0, 3.0, size=(20, 2)):
            assert chart.defect(chart.to_covector(coords)) < 1e-12

    def test_inverse(self, brockett):
        chart = CovectorSlice(brockett)
        coords = np.array([0.7, -2.5])
        np.testing.assert_allclose(chart.from_covector(chart.to_covector(coords)), coords, atol=1e-12)


class TestExponentialMap:
    def test_straight_line_along_first_field(self, brockett):
        x, p, _ = exponential_map(brockett, np.array([1.0, 0.0, 0.0]), 2.0)
        np.testing.assert_allclose(x, [2.0, 0.0, 0.0], atol=1e-8)
        np.testing.assert_allclose(p, [1.0, 0.0, 0.0], atol=1e-8)

    def test_straight_line_along_second_field(self, brockett):
        x, _, _ = exponential_map(brockett, np.array([0.0, 1.0, 0.0]), 0.5)
        np.testing.assert_allclose(x, [0.0, 0.5, 0.0], atol=1e-8)

    @pytest.mark.parametrize("lam, t", [(1.0, 1.0), (0.5, 2.0), (3.0, 0.4)])
    def test_closed_form(self, brockett, lam, t):
        x, _, arc = exponential_map(brockett, np.array([1.0, 0.0, lam]), t)
        np.testing.assert_allclose(x, brockett_extremal(lam, t), atol=1e-7)
        assert arc.max_h1_drift <= 1e-6

    def test_dilation_relation(self, brockett):
        # x(2t; λ/2) is the weight-2 dilation of x(t; λ)
        x_small, _, _ = exponential_map(brockett, np.array([1.0, 0.0, 1.0]), 0.7)
        x_large, _, _ = exponential_map(brockett, np.array([1.0, 0.0, 0.5]), 1.4)
        np.testing.assert_allclose(x_large, brockett.dilate(x_small, 2.0), atol=1e-7)

    def test_jacobian_matches_finite_differences(self, brockett, rng):
        chart = CovectorSlice(brockett)
        tight = IntegratorOptions(abs_tol=1e-12, rel_tol=1e-12)
        h = 1e-4
        worst = 0.0
        for _ in range(50):
            coords = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-3.0, 3.0)])
            t = rng.uniform(0.5, 2.0)
            _, _, arc = exponential_map(brockett, chart.to_covector(coords), t, tight)
            columns = [
                exponential_map(brockett, chart.to_covector(coords), t + h, tight)[0]
                - exponential_map(brockett, chart.to_covector(coords), t - h, tight)[0]
            ]
            for j in range(2):
                step = np.zeros(2)
                step[j] = h
                columns.append(
                    exponential_map(brockett, chart.to_covector(coords + step), t, tight)[0]
                    - exponential_map(brockett, chart.to_covector(coords - step), t, tight)[0]
                )
            fd = np.stack(columns, axis=1) / (2.0 * h)
            J = arc.jacobian[-1]
            worst = max(worst, float(np.linalg.norm(J - fd) / np.linalg.norm(fd)))
            np.testing.assert_allclose(arc.variations[-1][:3], J[:, 1:])
        assert worst <= 1e-4

    def test_controls_stay_on_unit_sphere(self, brockett, rng):
        chart = CovectorSlice(brockett)
        worst = 0.0
        for _ in range(50):
            p0 = chart.to_covector(np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-8.0, 8.0)]))
            _, _, arc = exponential_map(brockett, p0, rng.uniform(0.1, 1.0))
            norms = np.array([np.linalg.norm(extremal_control(brockett, x, p).u) for x, p in zip(arc.x, arc.p)])
            worst = max(worst, float(np.max(np.abs(norms - 1.0))))
        assert worst <= 1e-10

    def test_zero_time_is_target(self, brockett):
        x, p, arc = exponential_map(brockett, np.array([0.0, 1.0, 3.0]), 0.0)
        np.testing.assert_array_equal(x, brockett.target)
        np.testing.assert_array_equal(p, [0.0, 1.0, 3.0])
        assert arc.t.size == 1

    def test_off_slice(self, brockett):
        with pytest.raises(OffSlice):
            exponential_map(brockett, np.array([2.0, 0.0, 0.0]), 1.0)

    def test_negative_time(self, brockett):
        with pytest.raises(ValueError):
            exponential_map(brockett, np.array([1.0, 0.0, 0.0]), -1.0)


class TestConjugateTime:
    def test_straight_geodesic_has_none(self, brockett):
        assert conjugate_time(brockett, np.array([1.0, 0.0, 0.0]), 10.0) is None

    def test_first_conjugate_time(self, brockett):
        t_conj = conjugate_time(brockett, np.array([1.0, 0.0, 2.0]), 10.0)
        assert t_conj is not None
        assert t_conj == pytest.approx(np.pi / 2.0, abs=1e-4)

    def test_none_before_first(self, brockett):
        assert conjugate_time(brockett, np.array([1.0, 0.0, 2.0]), 1.0) is None

    def test_nonpositive_horizon(self, brockett):
        with pytest.raises(ValueError):
            conjugate_time(brockett, np.array([1.0, 0.0, 2.0]), 0.0)


class TestHelpers:
    def test_sample_times_end_at_horizon(self):
        times = sample_times(1.005, 0.01)
        assert times[0] == 0.0
        assert times[-1] == pytest.approx(1.005)

    def test_first_sign_change(self):
        assert first_sign_change(np.array([0.0, 1.0, 2.0, -1.0])) == 3
        assert first_sign_change(np.array([0.0, 1.0, 2.0])) is None


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
