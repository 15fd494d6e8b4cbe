#!/usr/bin/env python3
"""
Tests for the fixed-step flow integrator and the bounded noise signals.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from core.errors import BlowUp
from core.flow import flow_until, locate_event, next_grid_time, rk4_step
from core.noise import NoiseModel


class TestFlow:
    def test_rk4_exact_for_linear_motion(self):
        x = rk4_step(lambda t, x: np.array([1.0, 0.0]), 0.0, np.zeros(2), 0.3)
        np.testing.assert_allclose(x, [0.3, 0.0])

    def test_exponential_decay(self):
        trace = flow_until(lambda t, x: -x, np.array([1.0]), 1.0, 0.01)
        assert trace.status == "horizon"
        assert trace.end[0] == pytest.approx(np.exp(-1.0), rel=1e-8)

    def test_steps_land_on_grid(self):
        trace = flow_until(lambda t, x: np.ones(1), np.zeros(1), 0.1, 0.03)
        np.testing.assert_allclose(trace.t, [0.0, 0.03, 0.06, 0.09, 0.1])

    def test_event_located(self):
        trace = flow_until(lambda t, x: np.array([1.0]), np.zeros(1), 1.0, 0.1, stop=lambda x: x[0] > 0.25)
        assert trace.status == "event"
        assert trace.event_time == pytest.approx(0.25, abs=1e-7)
        assert trace.end[0] > 0.25

    def test_event_at_start(self):
        trace = flow_until(lambda t, x: np.ones(1), np.ones(1), 1.0, 0.1, stop=lambda x: x[0] > 0.5)
        assert trace.event_time == 0.0
        assert len(trace.t) == 1

    def test_blow_up(self):
        with pytest.raises(BlowUp):
            flow_until(lambda t, x: x * x, np.array([1.0]), 2.0, 0.01, blow_up_bound=1e3)

    def test_nonpositive_step(self):
        with pytest.raises(ValueError):
            flow_until(lambda t, x: x, np.zeros(1), 1.0, 0.0)

    def test_locate_event_crosses(self):
        s, x = locate_event(lambda t, x: np.array([2.0]), 0.0, np.zeros(1), 0.5, lambda x: x[0] >= 0.3)
        assert s == pytest.approx(0.15, abs=1e-7)
        assert x[0] >= 0.3

    def test_next_grid_time(self):
        assert next_grid_time(0.05, 0.1, 1.0) == pytest.approx(0.1)
        assert next_grid_time(0.1, 0.1, 1.0) == pytest.approx(0.2)
        assert next_grid_time(0.95, 0.1, 0.97) == pytest.approx(0.97)


class TestNoise:
    def bound(self, x):
        return 0.1 * float(np.linalg.norm(x))

    def test_zero_mode_is_silent(self):
        signal = NoiseModel(mode="zero", bound=self.bound).signal(2)
        e, d, a = signal.at(0.3, np.ones(3))
        assert not e.any() and not d.any() and not a.any()

    def test_respects_bound(self, rng):
        signal = NoiseModel(mode="random", bound=self.bound, seed=3, actuator_scale=0.5).signal(2)
        for t, x in zip(np.linspace(0.0, 2.0, 50), rng.normal(size=(50, 3))):
            e, d, a = signal.at(t, x)
            assert np.linalg.norm(e) <= self.bound(x) + 1e-12
            assert np.linalg.norm(d) <= self.bound(x) + 1e-12
            assert np.linalg.norm(a) <= 0.5 * self.bound(x) + 1e-12

    def test_vanishes_where_bound_vanishes(self):
        signal = NoiseModel(mode="random", bound=self.bound, seed=1).signal(2)
        e, d, _ = signal.at(0.0, np.zeros(3))
        assert not e.any() and not d.any()

    def test_seeded_and_held(self):
        model = NoiseModel(mode="random", bound=self.bound, seed=7, hold_step=0.1)
        x = np.array([1.0, 2.0, 0.5])
        first = model.signal(2).at(0.02, x)[0]
        again = model.signal(2).at(0.02, x)[0]
        same_interval = model.signal(2).at(0.07, x)[0]
        other_seed = model.with_seed(8).signal(2).at(0.02, x)[0]
        np.testing.assert_array_equal(first, again)
        np.testing.assert_array_equal(first, same_interval)
        assert not np.allclose(first, other_seed)

    def test_release_drops_past_intervals(self):
        goal = np.array([0.0, 0.0, 1.0])
        model = NoiseModel(mode="adversarial", bound=lambda x: 0.2, hold_step=0.1, toward=lambda x: goal)
        signal = model.signal(2)
        for t in (0.02, 0.15, 0.25):
            signal.at(t, np.array([1.0, 0.0, 1.0]))
        current = signal.at(0.27, np.array([1.0, 0.0, 1.0]))[0]
        signal.release_before(0.25)
        assert sorted(signal._held) == [2]
        # interval 2 keeps the direction fixed at its first sample
        np.testing.assert_array_equal(signal.at(0.29, np.array([0.0, 1.0, 1.0]))[0], current)
        signal.release_before(1.0)
        assert not signal._held

    def test_adversarial_pushes_toward_attractor(self):
        goal = np.array([0.0, 0.0, 1.0])
        model = NoiseModel(mode="adversarial", bound=lambda x: 0.2, toward=lambda x: goal)
        x = np.array([1.0, 0.0, 1.0])
        e, d, _ = model.signal(2).at(0.0, x)
        np.testing.assert_allclose(e, [-0.2, 0.0, 0.0])
        np.testing.assert_allclose(d, e)

    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            NoiseModel(mode="loud")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
