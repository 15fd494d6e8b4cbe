"""
Scenario files: sectioned key = value text, every key optional.

An empty file is the default Brockett scenario. The config hash is
xxh3_64 of the canonical rendering (all sections, all keys, fixed order),
so two files that differ only in comments or key order hash alike.
"""

import configparser
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import xxhash

from core.errors import ScenarioError
from core.escape import DEFAULT_CANDIDATES, DEFAULT_NOISE_BUDGET, DEFAULT_R1, DEFAULT_SEEDS
from core.extremal import CovectorSlice, IntegratorOptions
from core.hybrid import DEFAULT_BLOW_UP_BOUND, DEFAULT_N_MAX, DEFAULT_STOP_RADIUS, ExecutionOptions
from core.noise import NOISE_MODES
from core.synthesis import (
    DEFAULT_ANGLE_TOL,
    DEFAULT_ANGLES,
    DEFAULT_EXCLUSION_CELLS,
    DEFAULT_GRAD_JUMP_TOL,
    DEFAULT_MASK_CELLS,
    DEFAULT_TRANSVERSE_COUNT,
    DEFAULT_TRANSVERSE_MAX,
    GridSpec,
    Refinement,
    SliceGrid,
)
from core.system import SYSTEMS, ControlSystem, system_by_name

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SystemSection:
    name: str = "brockett"


@dataclass(frozen=True)
class GridSection:
    lower: float = -1.5
    upper: float = 1.5
    spacing: float = 0.05


@dataclass(frozen=True)
class SliceSection:
    angles: int = DEFAULT_ANGLES
    transverse_max: float = DEFAULT_TRANSVERSE_MAX
    transverse_count: int = DEFAULT_TRANSVERSE_COUNT
    refine_rounds: int = 2
    refine_gap: float = 1.0
    max_arcs: int = 12000


@dataclass(frozen=True)
class IntegratorSection:
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    max_step: float = 0.0  # 0 = unbounded
    h1_tol: float = 1e-6
    sample_stride: float = 1e-2
    t_max: float = 3.5


@dataclass(frozen=True)
class CutSection:
    angle_tol: float = DEFAULT_ANGLE_TOL
    time_tol: float = 0.0  # 0 = two cells
    grad_jump_tol: float = DEFAULT_GRAD_JUMP_TOL
    mask_cells: int = DEFAULT_MASK_CELLS
    exclusion_cells: int = DEFAULT_EXCLUSION_CELLS


@dataclass(frozen=True)
class EscapeSection:
    r1: float = DEFAULT_R1
    width: float = 0.0  # 0 = two cells
    candidates: int = DEFAULT_CANDIDATES
    seeds: int = DEFAULT_SEEDS
    noise_budget: float = DEFAULT_NOISE_BUDGET


@dataclass(frozen=True)
class HybridSection:
    epsilon: float = 0.0  # 0 = epsilon_fraction * tau(box_radius), resolved by synth
    epsilon_fraction: float = 0.1
    noise_mode: str = "adversarial"
    noise_scale: float = 1.0
    actuator_scale: float = 0.0
    seeds: int = 5
    stop_radius: float = DEFAULT_STOP_RADIUS
    horizon: float = 0.0  # 0 = T̂(x0) + 2ε + slack
    flow_step: float = 5e-3
    hold_step: float = 1e-2
    n_max: int = DEFAULT_N_MAX
    blow_up_bound: float = DEFAULT_BLOW_UP_BOUND


@dataclass(frozen=True)
class SweepSection:
    points_per_axis: int = 9
    box_radius: float = 1.5
    tube_exclusion: float = 0.24
    envelope_radii: int = 4
    envelope_allowance: float = 0.1


@dataclass(frozen=True)
class OutputSection:
    directory: str = "out"


SECTIONS: Tuple[Tuple[str, type], ...] = (
    ("system", SystemSection),
    ("grid", GridSection),
    ("slice", SliceSection),
    ("integrator", IntegratorSection),
    ("cut", CutSection),
    ("escape", EscapeSection),
    ("hybrid", HybridSection),
    ("sweep", SweepSection),
    ("output", OutputSection),
)


def _convert(section: str, key: str, raw: str, kind: type) -> Any:
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ScenarioError(f"[{section}] {key}: expected {kind.__name__}, got {raw!r}", section=section, key=key)


def _render(value: Any) -> str:
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


@dataclass(frozen=True)
class ScenarioConfig:
    system: SystemSection = field(default_factory=SystemSection)
    grid: GridSection = field(default_factory=GridSection)
    slice: SliceSection = field(default_factory=SliceSection)
    integrator: IntegratorSection = field(default_factory=IntegratorSection)
    cut: CutSection = field(default_factory=CutSection)
    escape: EscapeSection = field(default_factory=EscapeSection)
    hybrid: HybridSection = field(default_factory=HybridSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)
    source: Optional[str] = field(default=None, compare=False)

    # ----- identity -----

    def canonical_text(self) -> str:
        lines = []
        for name, _ in SECTIONS:
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                lines.append(f"{f.name} = {_render(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return xxhash.xxh3_64(self.canonical_text().encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {
            name: {f.name: getattr(getattr(self, name), f.name) for f in fields(getattr(self, name))}
            for name, _ in SECTIONS
        }

    def with_values(self, section: str, **values: Any) -> "ScenarioConfig":
        """Copy with some keys of one section replaced (CLI and test overrides)."""
        return replace(self, **{section: replace(getattr(self, section), **values)})

    # ----- validation -----

    def validate(self) -> "ScenarioConfig":
        """Raises ScenarioError; grid spacing is left to build_time_field."""
        if self.system.name not in SYSTEMS:
            raise ScenarioError(
                f"unknown system {self.system.name!r} (known: {', '.join(sorted(SYSTEMS))})", section="system"
            )
        hy = self.hybrid
        if hy.epsilon < 0:
            raise ScenarioError(f"epsilon must be nonnegative, got {hy.epsilon}", section="hybrid", key="epsilon")
        if not hy.epsilon_fraction > 0:
            raise ScenarioError(
                f"epsilon_fraction must be positive, got {hy.epsilon_fraction}", section="hybrid", key="epsilon_fraction"
            )
        if not 0.0 <= hy.noise_scale <= 1.0:
            raise ScenarioError(
                f"noise_scale must lie in [0, 1], got {hy.noise_scale}", section="hybrid", key="noise_scale"
            )
        if hy.noise_mode not in NOISE_MODES:
            raise ScenarioError(
                f"noise_mode must be one of {NOISE_MODES}, got {hy.noise_mode!r}", section="hybrid", key="noise_mode"
            )
        if hy.actuator_scale < 0 or hy.seeds < 0 or hy.stop_radius < 0 or hy.horizon < 0:
            raise ScenarioError("hybrid scales, seeds, stop_radius and horizon must be nonnegative", section="hybrid")
        target = self.build_system().target
        if not np.all((self.grid.lower < target) & (target < self.grid.upper)):
            raise ScenarioError(
                f"box [{self.grid.lower}, {self.grid.upper}] does not contain the target {target.tolist()}",
                section="grid",
            )
        sw = self.sweep
        if min(sw.points_per_axis, sw.box_radius, sw.tube_exclusion, sw.envelope_radii, sw.envelope_allowance) < 0:
            raise ScenarioError("sweep values must be nonnegative", section="sweep")
        if self.integrator.t_max <= 0:
            raise ScenarioError(f"t_max must be positive, got {self.integrator.t_max}", section="integrator")
        return self

    # ----- builders -----

    def build_system(self) -> ControlSystem:
        return system_by_name(self.system.name)

    def grid_spec(self, n: int) -> GridSpec:
        return GridSpec(np.full(n, self.grid.lower), np.full(n, self.grid.upper), self.grid.spacing)

    def slice_grid(self, sys: ControlSystem) -> SliceGrid:
        s = self.slice
        return SliceGrid.tensor(CovectorSlice(sys), s.angles, s.transverse_max, s.transverse_count)

    def refinement(self) -> Optional[Refinement]:
        s = self.slice
        if s.refine_rounds == 0:
            return None
        return Refinement(rounds=s.refine_rounds, gap_cells=s.refine_gap, max_arcs=s.max_arcs)

    def integrator_options(self) -> IntegratorOptions:
        i = self.integrator
        return IntegratorOptions(
            abs_tol=i.abs_tol,
            rel_tol=i.rel_tol,
            max_step=i.max_step if i.max_step > 0 else np.inf,
            h1_tol=i.h1_tol,
            sample_stride=i.sample_stride,
        )

    def execution_options(self) -> ExecutionOptions:
        hy = self.hybrid
        return ExecutionOptions(flow_step=hy.flow_step, n_max=hy.n_max, blow_up_bound=hy.blow_up_bound)

    def resolve_epsilon(self, tau: Optional[float]) -> float:
        """The configured ε, or epsilon_fraction · τ(box_radius) when it is 0."""
        if self.hybrid.epsilon > 0:
            return self.hybrid.epsilon
        if tau is None or not tau > 0:
            raise ScenarioError(
                "epsilon = 0 needs covered field nodes within the sweep box radius", section="hybrid", key="epsilon"
            )
        return self.hybrid.epsilon_fraction * tau

    def time_tol(self) -> Optional[float]:
        return self.cut.time_tol if self.cut.time_tol > 0 else None

    def escape_width(self) -> Optional[float]:
        return self.escape.width if self.escape.width > 0 else None

    @property
    def output_dir(self) -> Path:
        return Path(self.output.directory)


def parse_scenario(text: str, source: Optional[str] = None) -> ScenarioConfig:
    """Parse scenario text; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source or "<scenario>")
    except configparser.Error as exc:
        raise ScenarioError(f"cannot parse scenario: {exc}", source=source)
    known = dict(SECTIONS)
    unknown = [s for s in parser.sections() if s not in known]
    if unknown:
        raise ScenarioError(f"unknown scenario sections: {unknown}", source=source)
    values: Dict[str, Any] = {}
    for name, cls in SECTIONS:
        kinds = {f.name: type(f.default) for f in fields(cls)}
        overrides = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in kinds:
                    raise ScenarioError(f"[{name}] unknown key {key!r}", section=name, key=key)
                overrides[key] = _convert(name, key, raw, kinds[key])
        values[name] = cls(**overrides)
    return ScenarioConfig(**values, source=source).validate()


def load_scenario(path: Optional[PathLike] = None) -> ScenarioConfig:
    """Read a scenario file; no path gives the defaults."""
    if path is None:
        return ScenarioConfig().validate()
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}", path=str(path))
    config = parse_scenario(path.read_text(encoding="utf-8"), source=str(path))
    logger.info(f"scenario {path} (hash {config.config_hash()})")
    return config
