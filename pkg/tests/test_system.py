#!/usr/bin/env python3
"""
Tests for driftless systems: dynamics, control validation, Jacobians.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from core.errors import ConstraintViolation, InvalidDimension
from core.system import (
    ControlSystem,
    brockett_system,
    eval_dynamics,
    heisenberg_system,
    jacobian_defect,
    system_by_name,
    validate_control,
)


class TestDynamics:
    """f(x, u) = sum u_i f_i(x)."""

    def test_brockett_first_field_at_origin(self, brockett):
        np.testing.assert_allclose(eval_dynamics(brockett, np.zeros(3), [1.0, 0.0]), [1.0, 0.0, 0.0])

    def test_brockett_second_field(self, brockett):
        np.testing.assert_allclose(eval_dynamics(brockett, np.array([1.0, 2.0, 5.0]), [0.0, 1.0]), [0.0, 1.0, -1.0])

    def test_frame_values(self, brockett):
        F = brockett.frame(np.array([3.0, 0.0, 0.0]))
        np.testing.assert_allclose(F[0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(F[1], [0.0, 1.0, -3.0])

    def test_zero_control_is_zero(self, brockett, rng):
        for x in rng.normal(size=(10, 3)):
            np.testing.assert_array_equal(eval_dynamics(brockett, x, [0.0, 0.0]), np.zeros(3))

    def test_linear_in_control(self, brockett, rng):
        x = rng.normal(size=3)
        u, v = np.array([0.3, -0.2]), np.array([-0.1, 0.5])
        lhs = eval_dynamics(brockett, x, 2.0 * u + v)
        rhs = 2.0 * eval_dynamics(brockett, x, u) + eval_dynamics(brockett, x, v)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_batched_frame_matches_single(self, brockett, rng):
        X = rng.normal(size=(3, 7))
        batched = brockett.frame(X)
        assert batched.shape == (2, 3, 7)
        for b in range(7):
            np.testing.assert_allclose(batched[:, :, b], brockett.frame(X[:, b]))

    def test_wrong_state_shape(self, brockett):
        with pytest.raises(InvalidDimension):
            eval_dynamics(brockett, np.zeros(2), [1.0, 0.0])

    def test_wrong_control_shape(self, brockett):
        with pytest.raises(InvalidDimension):
            eval_dynamics(brockett, np.zeros(3), [1.0, 0.0, 0.0])


class TestJacobians:
    def test_first_field_jacobian(self, brockett, rng):
        J = brockett.jacobian_stack(rng.normal(size=3))[0]
        expected = np.zeros((3, 3))
        expected[2, 1] = 1.0
        np.testing.assert_array_equal(J, expected)

    @pytest.mark.parametrize("factory", [brockett_system, heisenberg_system])
    def test_jacobians_match_finite_differences(self, factory):
        assert jacobian_defect(factory(), probes=50) <= 1e-6


class TestValidateControl:
    def test_unit_control_unchanged(self):
        u = validate_control([1.0, 0.0], tol=0.0)
        assert u.admissible
        np.testing.assert_array_equal(u.u, [1.0, 0.0])

    def test_three_four_five(self):
        u = validate_control([0.6, 0.8], tol=0.0)
        assert u.norm == pytest.approx(1.0)

    def test_too_large(self):
        with pytest.raises(ConstraintViolation):
            validate_control([2.0, 0.0], tol=1e-9)

    def test_renormalizes_within_tolerance(self):
        u = validate_control([1.0 + 5e-10, 0.0], tol=1e-9)
        assert u.norm <= 1.0

    def test_negative_tolerance_rejected(self):
        with pytest.raises(ValueError):
            validate_control([0.0, 0.0], tol=-1.0)


class TestSystems:
    def test_weighted_norm_is_homogeneous(self, brockett):
        x = np.array([0.2, -0.1, 0.3])
        assert brockett.weighted_norm(brockett.dilate(x, 0.5)) == pytest.approx(0.5 * brockett.weighted_norm(x))

    def test_dilation_weights(self, brockett):
        np.testing.assert_array_equal(brockett.weights, [1.0, 1.0, 2.0])
        assert brockett.homogeneous

    def test_shifted_target_is_not_homogeneous(self):
        assert not brockett_system(target=[0.0, 0.0, 1.0]).homogeneous

    def test_system_by_name(self):
        assert system_by_name("heisenberg").name == "heisenberg"
        with pytest.raises(ValueError):
            system_by_name("unicycle")

    def test_field_count_mismatch(self):
        with pytest.raises(InvalidDimension):
            ControlSystem(n=3, m=2, fields=(lambda x: x,), jacobians=(lambda x: x,), target=np.zeros(3))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
