#!/usr/bin/env python3
"""
Tests for runtime configuration, scenario files and the command boundary.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from core.command_registry import command_names, execute_command
from core.decorators import handle_command_errors, stage
from core.errors import InvalidGrid, ScenarioError, StageError
from qmt_hybrid.commands import parse_point
from qmt_hybrid.config import RuntimeConfig, get_runtime_config, reset_config
from qmt_hybrid.constants import COMMANDS
from qmt_hybrid.scenario import ScenarioConfig, load_scenario, parse_scenario


@pytest.fixture
def clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith("QMTH_"):
            monkeypatch.delenv(key)
    reset_config()
    yield monkeypatch
    reset_config()


class TestRuntimeConfig:
    def test_defaults(self, clean_env):
        config = RuntimeConfig()
        assert config.threads == 0
        assert config.max_grid_mb == 512
        assert config.chunk_arcs == 256
        assert config.log_level == "WARNING"

    def test_env_overrides(self, clean_env):
        clean_env.setenv("QMTH_THREADS", "3")
        clean_env.setenv("QMTH_MAX_GRID_MB", "64.5")
        clean_env.setenv("QMTH_LOG_LEVEL", "debug")
        config = RuntimeConfig()
        assert config.threads == 3
        assert config.max_grid_mb == 64.5
        assert config.log_level == "DEBUG"
        assert config.log_level_value() == 10
        assert config.worker_count() == 3
        assert config.worker_count(override=5) == 5

    def test_unparseable_env_falls_back(self, clean_env):
        clean_env.setenv("QMTH_CHUNK_ARCS", "many")
        assert RuntimeConfig().chunk_arcs == RuntimeConfig.DEFAULT_CHUNK_ARCS

    @pytest.mark.parametrize(
        "key, value",
        [
            ("QMTH_THREADS", "-1"),
            ("QMTH_MAX_GRID_MB", "0"),
            ("QMTH_CHUNK_ARCS", "0"),
            ("QMTH_LOG_LEVEL", "LOUD"),
            ("QMTH_MEMORY_WARNING_THRESHOLD", "1.5"),
        ],
    )
    def test_invalid(self, clean_env, key, value):
        clean_env.setenv(key, value)
        with pytest.raises(ValueError):
            RuntimeConfig()

    def test_global_instance(self, clean_env):
        first = get_runtime_config()
        assert get_runtime_config() is first
        reset_config()
        assert get_runtime_config() is not first


class TestScenario:
    def test_empty_is_default(self):
        config = parse_scenario("")
        assert config == ScenarioConfig()
        assert config.hybrid.epsilon == 0.0
        assert config.hybrid.epsilon_fraction == 0.1
        assert config.sweep.box_radius == 1.5
        assert config.integrator.t_max == 3.5
        assert config.system.name == "brockett"

    def test_values_and_types(self, small_scenario_file):
        config = load_scenario(small_scenario_file)
        assert config.grid.spacing == 0.1
        assert config.slice.angles == 24
        assert isinstance(config.slice.angles, int)
        assert config.refinement() is None
        assert config.grid_spec(3).shape == (21, 21, 21)
        assert config.source == str(small_scenario_file)

    def test_hash_ignores_comments_and_order(self):
        a = parse_scenario("[grid]\nspacing = 0.1\nlower = -1\n")
        b = parse_scenario("# coarse\n[grid]\nlower = -1.0\n\nspacing = 0.10\n")
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != ScenarioConfig().config_hash()
        assert len(a.config_hash()) == 16

    def test_with_values(self):
        config = ScenarioConfig().with_values("hybrid", epsilon=0.25)
        assert config.hybrid.epsilon == 0.25
        assert config.hybrid.seeds == ScenarioConfig().hybrid.seeds
        assert config.config_hash() != ScenarioConfig().config_hash()

    def test_resolve_epsilon(self):
        auto = ScenarioConfig()
        assert auto.resolve_epsilon(3.5) == pytest.approx(0.35)
        with pytest.raises(ScenarioError, match="covered field nodes"):
            auto.resolve_epsilon(None)
        fixed = auto.with_values("hybrid", epsilon=0.25)
        assert fixed.resolve_epsilon(3.5) == 0.25
        assert fixed.resolve_epsilon(None) == 0.25

    @pytest.mark.parametrize(
        "text, match",
        [
            ("[colour]\nred = 1\n", "unknown scenario sections"),
            ("[grid]\nwidth = 2\n", "unknown key"),
            ("[slice]\nangles = many\n", "expected int"),
            ("[hybrid]\nepsilon = -0.1\n", "epsilon"),
            ("[hybrid]\nepsilon_fraction = 0\n", "epsilon_fraction"),
            ("[hybrid]\nnoise_scale = 1.5\n", "noise_scale"),
            ("[hybrid]\nnoise_mode = loud\n", "noise_mode"),
            ("[system]\nname = unicycle\n", "unknown system"),
            ("[grid]\nlower = 0.5\n", "does not contain the target"),
            ("[integrator]\nt_max = 0\n", "t_max"),
            ("not a section header\n", "cannot parse"),
        ],
    )
    def test_errors(self, text, match):
        with pytest.raises(ScenarioError, match=match):
            parse_scenario(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError, match="not found"):
            load_scenario(tmp_path / "missing.ini")

    def test_no_path(self):
        assert load_scenario(None) == ScenarioConfig()

    def test_spacing_left_to_field_builder(self):
        assert parse_scenario("[grid]\nspacing = 0\n").grid.spacing == 0.0


class TestParsePoint:
    def test_string_and_list(self):
        assert np.array_equal(parse_point("1, 0,0.5", 3), [1.0, 0.0, 0.5])
        assert np.array_equal(parse_point([1, 2, 3], 3), [1.0, 2.0, 3.0])

    @pytest.mark.parametrize("text", ["1,0", "a,b,c", "1,2,3,4"])
    def test_invalid(self, text):
        with pytest.raises(ScenarioError):
            parse_point(text, 3)


class TestCommandBoundary:
    def test_stage_wraps_module_errors(self):
        with pytest.raises(StageError) as info:
            with stage("build_time_field"):
                raise InvalidGrid("spacing must be positive")
        assert info.value.stage == "build_time_field"
        assert isinstance(info.value.cause, InvalidGrid)

    def test_stage_keeps_inner_stage(self):
        with pytest.raises(StageError) as info:
            with stage("outer"):
                with stage("inner"):
                    raise ValueError("bad")
        assert info.value.stage == "inner"

    def test_stage_passes_other_errors(self):
        with pytest.raises(KeyError):
            with stage("lookup"):
                raise KeyError("x")

    def test_failure_shapes(self):
        @handle_command_errors
        def cmd_demo(kind):
            if kind == "stage":
                with stage("estimate_cut_locus"):
                    raise InvalidGrid("no grid", spacing=0.0)
            if kind == "module":
                raise ScenarioError("bad scenario", key="x0")
            if kind == "other":
                raise RuntimeError("boom")
            return {"value": 1}

        assert cmd_demo("ok") == {"value": 1, "success": True}

        staged = cmd_demo("stage")
        assert staged["success"] is False
        assert staged["stage"] == "estimate_cut_locus"
        assert staged["type"] == "InvalidGrid"
        assert staged["spacing"] == 0.0
        assert staged["command"] == "demo"

        module = cmd_demo("module")
        assert module["stage"] is None
        assert module["type"] == "ScenarioError"
        assert module["key"] == "x0"

        other = cmd_demo("other")
        assert other == {
            "success": False, "error": "boom", "type": "RuntimeError", "stage": None, "command": "demo",
        }

    def test_registry(self):
        assert command_names() == sorted(COMMANDS)

    def test_unknown_command(self):
        assert execute_command("index") == {
            "success": False, "error": "Unknown command: index", "command": "index",
        }

    def test_bad_arguments(self):
        result = execute_command("cutlocus", colour="red")
        assert result["success"] is False


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
