#!/usr/bin/env python3
"""
Desk-scale acceptance run on the default Brockett scenario.

Builds the full field on [-1.5, 1.5]^3 with h = 0.05, so every test here
is slow; deselect with -m "not slow".
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from core.command_registry import execute_command
from core.errors import SingularRegion, Uncovered
from core.extremal import CovectorSlice, exponential_map, extremal_control, hamiltonian_h1
from core.hybrid import OMEGA
from core.synthesis import grad_time
from qmt_hybrid.commands import initial_label, load_artifacts, run_once, stop_slack, sweep_points
from qmt_hybrid.constants import S0_NEAREST, S0_OMEGA, SWEEP_FILE
from qmt_hybrid.scenario import ScenarioConfig


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("default")
    scenario = ScenarioConfig().validate()
    result = execute_command("synth", config=scenario, out=str(out))
    assert result["success"], result
    return scenario, out, load_artifacts(scenario, out)


def _nodes(field_):
    return field_.grid.nodes().reshape(field_.T.shape + (field_.n,))


class TestExtremals:
    def test_hamiltonian_and_controls(self, brockett, rng):
        chart = CovectorSlice(brockett)
        drift = 0.0
        control_defect = 0.0
        for _ in range(500):
            p0 = chart.to_covector(np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-8.0, 8.0)]))
            _, _, arc = exponential_map(brockett, p0, rng.uniform(0.05, 3.0))
            values = np.array([hamiltonian_h1(brockett, x, p) for x, p in zip(arc.x, arc.p)])
            drift = max(drift, float(np.max(np.abs(values - 1.0))))
            norms = [np.linalg.norm(extremal_control(brockett, x, p).u) for x, p in zip(arc.x, arc.p)]
            control_defect = max(control_defect, float(np.max(np.abs(np.array(norms) - 1.0))))
        assert drift <= 1e-6
        assert control_defect <= 1e-10


class TestField:
    @pytest.mark.parametrize("a", [0.25, 0.5, 1.0])
    def test_horizontal_points(self, default_run, a):
        _, _, art = default_run
        assert art.field.time_at(np.array([a, 0.0, 0.0])) == pytest.approx(a, abs=0.1)

    def test_horizontal_lower_bound(self, default_run):
        _, _, art = default_run
        f = art.field
        nodes = f.grid.nodes()
        ok = f.covered.reshape(-1) & np.isfinite(f.T.reshape(-1))
        horizontal = np.linalg.norm(nodes[ok][:, :2], axis=1)
        assert np.all(f.T.reshape(-1)[ok] >= horizontal - f.h * np.sqrt(3.0))

    @pytest.mark.parametrize("image", ["quarter_turn", "swap_and_flip"])
    def test_grid_symmetries(self, default_run, image):
        _, _, art = default_run
        f = art.field
        # the grid is symmetric about the target, so both maps send nodes to nodes
        if image == "quarter_turn":
            move = lambda a: np.rot90(a, axes=(0, 1))
        else:
            move = lambda a: np.transpose(a, (1, 0, 2) + tuple(range(3, a.ndim)))[:, :, ::-1]
        lipschitz = np.linalg.norm(f.winner_covector, axis=-1)
        ok = f.covered & (f.T <= 3.0) & (np.linalg.norm(_nodes(f), axis=-1) <= 1.2)
        both = ok & move(ok)
        assert both.sum() > 1000
        defect = np.abs(f.T - move(f.T))[both]
        bound = 2.0 * f.h * np.maximum(lipschitz, move(lipschitz))[both]
        assert np.all(defect <= bound), float(np.max(defect - bound))

    def test_rotation_about_vertical_axis(self, default_run, rng):
        _, _, art = default_run
        f = art.field
        nodes = f.grid.nodes()
        T = f.T.reshape(-1)
        covector = f.winner_covector.reshape(-1, f.n)
        ok = np.flatnonzero(f.covered.reshape(-1) & (T <= 3.0) & (np.linalg.norm(nodes, axis=1) <= 1.2))
        checked = 0
        for i in rng.choice(ok, size=200, replace=False):
            angle = rng.uniform(0.0, 2.0 * np.pi)
            c, s = np.cos(angle), np.sin(angle)
            x = nodes[i]
            y = np.array([c * x[0] - s * x[1], s * x[0] + c * x[1], x[2]])
            try:
                value = f.time_at(y)
            except Uncovered:
                continue
            j = f.grid.locate(y)
            local = max(np.linalg.norm(covector[i]), np.linalg.norm(f.winner_covector[j]))
            assert abs(value - T[i]) <= 2.0 * f.h * local
            checked += 1
        assert checked >= 150

    def test_gradient_matches_winning_covector(self, default_run, rng):
        _, _, art = default_run
        f = art.field
        chart = CovectorSlice(art.sys)
        nodes = f.grid.nodes()
        T = f.T.reshape(-1)
        coords = f.winner_coords.reshape(T.size, -1)
        radius = np.linalg.norm(nodes - f.target, axis=1)
        pool = np.flatnonzero(f.usable.reshape(-1) & (radius >= 0.4) & (radius <= 1.0) & (T <= 3.0))
        errors = []
        for i in rng.permutation(pool):
            if art.model.distance(nodes[i]) < 0.3:
                continue
            gradient = grad_time(f, nodes[i])
            assert not isinstance(gradient, SingularRegion)
            _, p_end, _ = exponential_map(art.sys, chart.to_covector(coords[i]), float(T[i]))
            errors.append(float(np.linalg.norm(gradient - p_end) / np.linalg.norm(p_end)))
            if len(errors) == 50:
                break
        assert len(errors) == 50
        assert max(errors) <= 0.05


class TestCutLocus:
    def test_flagged_cells_lie_on_the_axis(self, default_run):
        _, _, art = default_run
        model, h = art.model, art.field.h
        assert len(model) > 0
        near_axis = np.linalg.norm(model.points[:, :2], axis=1) <= 2.0 * h
        assert near_axis.mean() >= 0.95
        assert model.distance(np.array([1.0, 0.0, 0.0])) > 2.0 * h

    def test_every_axis_cell_flagged(self, default_run):
        _, _, art = default_run
        f = art.field
        nodes = _nodes(f)
        axis = np.all(np.abs(nodes[..., :2]) < 1e-9, axis=-1) & (np.abs(nodes[..., 2]) >= 0.15 - 1e-9)
        # nodes inside the terminal exclusion ball are never flagged
        axis &= f.covered & (np.linalg.norm(nodes - f.target, axis=-1) > f.exclusion_radius)
        assert axis.sum() >= 20
        assert np.all(f.cut_flag[axis]), nodes[axis & ~f.cut_flag][:, 2].tolist()

    def test_estimators_agree(self, default_run):
        _, _, art = default_run
        agreement = art.model.agreement
        assert agreement["two_arrival_near_jump"] >= 0.9
        assert agreement["jump_near_two_arrival"] >= 0.9

    def test_gradient_undefined_on_flagged_cells(self, default_run):
        _, _, art = default_run
        for point in art.model.points[:: max(1, len(art.model) // 100)]:
            assert isinstance(grad_time(art.field, point), SingularRegion)


class TestPatches:
    def test_every_patch_certified(self, default_run):
        _, _, art = default_run
        assert len(art.shells.cover) > 0
        for patch in art.shells.cover:
            assert patch.tau < art.epsilon
            assert patch.rho > 0

    def test_epsilon_follows_time_bound(self, default_run):
        scenario, _, art = default_run
        t_box = art.field.time_bound(scenario.sweep.box_radius)
        assert art.epsilon == pytest.approx(scenario.hybrid.epsilon_fraction * t_box)
        assert art.manifest["tau"]["value"] == pytest.approx(t_box + art.epsilon)


class TestClosedLoop:
    def test_optimal_region_run(self, default_run):
        scenario, out, art = default_run
        result = execute_command("simulate", config=scenario, out=str(out), x0="1,0,0", noise_scale=0.0, run=100)
        assert result["success"], result
        assert result["status"] == "arrived"
        assert result["positive_jump_times"] == 0
        slack = stop_slack(art.sys, art.field, scenario.hybrid.stop_radius)
        assert result["arrival_time"] <= result["t_hat"] * 1.1 + slack
        assert result["certificate"]["ok"]

    def test_time_decreases_at_unit_rate(self, default_run):
        scenario, _, art = default_run
        f = art.field
        x0 = np.array([1.0, 0.0, 0.3])
        arc = run_once(scenario, art, x0, OMEGA, seed=0, noise_scale=0.0, t_hat=f.time_at(x0))
        assert arc.status == "arrived"
        keep = (arc.s == OMEGA) & (np.linalg.norm(arc.x - f.target, axis=1) >= 0.25)
        keep &= np.array([not f.singular_mask[f.grid.locate(x)] for x in arc.x])
        t = arc.t[keep]
        values = np.array([f.time_at(x) for x in arc.x[keep]])
        assert t.size >= 50
        assert np.polyfit(t, values, 1)[0] == pytest.approx(-1.0, abs=0.1)
        assert (values[-1] - values[0]) / (t[-1] - t[0]) == pytest.approx(-1.0, abs=0.1)

    def test_noise_only_delays_arrival(self, default_run):
        scenario, _, art = default_run
        small = scenario.with_values("sweep", points_per_axis=3)
        slack = stop_slack(art.sys, art.field, scenario.hybrid.stop_radius)
        pairs = violations = 0
        for x0 in sweep_points(small, art):
            try:
                t_hat = art.field.time_at(x0)
            except Uncovered:
                continue
            for choice in (S0_OMEGA, S0_NEAREST):
                label = initial_label(art, x0, choice)
                quiet = run_once(small, art, x0, label, 0, noise_scale=0.0, t_hat=t_hat).arrival_time
                for seed in range(small.hybrid.seeds):
                    noisy = run_once(small, art, x0, label, seed, t_hat=t_hat).arrival_time
                    pairs += 1
                    quiet_time = math.inf if quiet is None else quiet
                    noisy_time = math.inf if noisy is None else noisy
                    violations += quiet_time > noisy_time + slack
        assert pairs >= 50
        assert violations <= 0.02 * pairs

    def test_sweep(self, default_run):
        scenario, out, art = default_run
        result = execute_command("sweep", config=scenario, out=str(out))
        assert result["success"], result
        assert result["nonconforming"] == []
        assert result["not_arrived"] == 0
        assert result["certificate_failures"] == 0
        assert result["max_derivative_residual"] <= 1e-6
        assert result["max_positive_jumps"] <= 1
        assert result["max_chain_length"] <= 2
        assert result["margin_ok"], result["max_margin"]
        assert result["tau"]["ok"]
        assert result["delta"]["ok"], result["delta"]["violations"][:5]
        assert result["epsilon"] == art.epsilon

    def test_sweep_is_deterministic(self, default_run):
        scenario, out, _ = default_run
        small = scenario.with_values("sweep", points_per_axis=3)
        texts = []
        for threads in (1, 4):
            result = execute_command("sweep", config=small, out=str(out), threads=threads)
            assert result["success"], result
            texts.append((out / SWEEP_FILE).read_bytes())
        assert texts[0] == texts[1]


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
