"""
Pipeline commands - synth, simulate, sweep, cutlocus, certify

Each command takes a scenario (path, ScenarioConfig or None for the
defaults), writes its artifacts under the output directory and returns a
plain result dict. Module errors raised inside a pipeline step come back
as failure dicts naming the stage (see core.decorators).
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.arc_io import (
    arc_summary,
    load_arc,
    read_json,
    save_arc,
    write_arc_csv,
    write_certificate,
    write_csv,
    write_cutlocus_csv,
    write_front_csv,
    write_jumps_csv,
    write_json,
    write_sidecar,
)
from core.command_registry import register_command
from core.decorators import handle_command_errors, stage
from core.errors import ArtifactsMissing, QmtError, ScenarioError, Uncovered
from core.escape import cover_singular_region, excursion_from_table, excursion_table
from core.field_cache import file_digest, load_field, save_field
from core.hybrid import OMEGA, HybridArc, HybridFeedback, certify_arc, execute_hybrid, label_name, parse_label
from core.hysteresis import (
    DEFAULT_SHELL_SEEDS,
    MODES,
    AdmissibleRadius,
    ShellFamily,
    admissible_radius,
    build_omega_shells,
    feedback_from_parts,
)
from core.memory_monitor import check_memory_pressure
from core.noise import NoiseModel
from core.synthesis import (
    MinimalTimeField,
    SingularSetModel,
    build_time_field,
    estimate_cut_locus,
    synthesize_front,
)
from core.system import ControlSystem, system_by_name

from .config import get_runtime_config
from .constants import (
    ARC_CSV,
    ARC_STORE,
    ARC_STORE_GLOB,
    CERTIFICATE_TXT,
    COVER_FILE,
    CUTLOCUS_FILE,
    DEFAULT_HORIZON,
    FEEDBACK_FILE,
    FIELD_FILE,
    FRONT_FILE,
    HORIZON_SLACK,
    JUMPS_CSV,
    MANIFEST_VERSION,
    S0_NEAREST,
    S0_OMEGA,
    SWEEP_FILE,
    SWEEP_SUMMARY_FILE,
)
from .scenario import ScenarioConfig, load_scenario

logger = logging.getLogger(__name__)

ScenarioLike = Union[None, str, Path, ScenarioConfig]
LabelLike = Union[None, int, str]

BLOW_UP_FACTOR = 10.0
ENVELOPE_SEED_OFFSET = 7919


# ----- shared plumbing -----

def _resolve(config: ScenarioLike, out: Optional[Union[str, Path]]) -> Tuple[ScenarioConfig, Path]:
    scenario = config if isinstance(config, ScenarioConfig) else load_scenario(config)
    out_dir = Path(out) if out is not None else scenario.output_dir
    return scenario, out_dir


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ScenarioError(f"mode must be one of {MODES}, got {mode!r}", key="mode")
    return mode


def _metadata(scenario: ScenarioConfig, **extra: Any) -> Dict[str, Any]:
    return {"config_hash": scenario.config_hash(), "system": scenario.system.name, **extra}


def parse_point(x0: Union[str, Sequence[float]], n: int) -> np.ndarray:
    """A start point from a list or a comma-separated string."""
    if isinstance(x0, str):
        try:
            values = [float(v) for v in x0.replace(" ", "").split(",") if v]
        except ValueError:
            raise ScenarioError(f"cannot parse start point {x0!r}", key="x0")
    else:
        values = [float(v) for v in x0]
    if len(values) != n:
        raise ScenarioError(f"start point needs {n} coordinates, got {len(values)}", key="x0")
    return np.asarray(values, dtype=float)


@dataclass
class Artifacts:
    """Everything simulate, sweep and certify rebuild from the synth outputs."""

    sys: ControlSystem
    field: MinimalTimeField
    model: SingularSetModel
    shells: ShellFamily
    feedback: HybridFeedback
    chi: AdmissibleRadius
    manifest: Dict[str, Any]

    @property
    def mode(self) -> str:
        return self.feedback.mode

    @property
    def epsilon(self) -> float:
        """ε as resolved by synth."""
        return float(self.manifest["epsilon"])

    @property
    def delta_table(self) -> np.ndarray:
        return np.asarray(self.manifest.get("delta", {}).get("table", []), dtype=float).reshape(-1, 2)

    def delta(self, radius: float) -> float:
        """Recorded δ(R), extended with slope 1 past the largest recorded radius."""
        return excursion_from_table(self.delta_table, radius)

    def blow_up_bound(self, radius: float) -> float:
        """10·δ(R) around the target, as a bound on |x|."""
        return BLOW_UP_FACTOR * self.delta(radius) + float(np.linalg.norm(self.sys.target))


def load_artifacts(scenario: ScenarioConfig, out_dir: Path, mode: Optional[str] = None) -> Artifacts:
    """Rebuild the feedback from field.mtf and feedback.json, no synthesis rerun."""
    manifest_path = out_dir / FEEDBACK_FILE
    field_path = out_dir / FIELD_FILE
    if not manifest_path.exists() or not field_path.exists():
        raise ArtifactsMissing(f"run synth first: no {FEEDBACK_FILE} or {FIELD_FILE} in {out_dir}", path=str(out_dir))
    manifest = read_json(manifest_path)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ArtifactsMissing(
            f"{FEEDBACK_FILE} has version {manifest.get('version')}, expected {MANIFEST_VERSION}; rerun synth",
            path=str(manifest_path),
        )
    if manifest.get("config_hash") != scenario.config_hash():
        logger.warning(
            f"artifacts in {out_dir} were built from config {manifest.get('config_hash')}, "
            f"scenario is {scenario.config_hash()}"
        )
    field_ = load_field(field_path)
    model = SingularSetModel.from_field(field_)
    shells = ShellFamily.from_dict(manifest["shells"], model)
    sys = system_by_name(manifest.get("system", scenario.system.name))
    H = feedback_from_parts(sys, field_, shells, _check_mode(mode or manifest["mode"]))
    field_.gradient_grid()
    return Artifacts(sys, field_, model, shells, H, admissible_radius(shells), manifest)


def initial_label(art: Artifacts, x0: np.ndarray, s0: LabelLike) -> int:
    """omega, nearest (deepest patch at x0, ω when there are none), patch:k or a raw label."""
    if s0 is None or s0 == S0_NEAREST:
        patch = art.shells.cover.nearest_patch(x0)
        return OMEGA if patch is None else patch.label
    if isinstance(s0, (int, np.integer)):
        return int(s0)
    if s0 == S0_OMEGA:
        return OMEGA
    try:
        return parse_label(str(s0))
    except ValueError:
        raise ScenarioError(f"unknown initial label {s0!r}", key="s0")


def _time_hat(art: Artifacts, x0: np.ndarray) -> Optional[float]:
    try:
        return art.field.time_at(x0)
    except Uncovered:
        return None


def _horizon(scenario: ScenarioConfig, epsilon: float, t_hat: Optional[float]) -> float:
    if scenario.hybrid.horizon > 0:
        return scenario.hybrid.horizon
    if t_hat is None:
        return DEFAULT_HORIZON
    return t_hat + 2.0 * epsilon + HORIZON_SLACK


def noise_model(scenario: ScenarioConfig, art: Artifacts, seed: int, scale: Optional[float] = None) -> NoiseModel:
    hy = scenario.hybrid
    return NoiseModel(
        mode=hy.noise_mode,
        scale=hy.noise_scale if scale is None else float(scale),
        bound=art.chi,
        seed=seed,
        hold_step=hy.hold_step,
        actuator_scale=hy.actuator_scale,
        toward=art.model.nearest_point,
    )


def run_once(
    scenario: ScenarioConfig,
    art: Artifacts,
    x0: np.ndarray,
    s0: int,
    seed: int,
    noise_scale: Optional[float] = None,
    t_hat: Optional[float] = None,
    blow_up_bound: Optional[float] = None,
) -> HybridArc:
    opts = scenario.execution_options()
    if blow_up_bound is not None:
        opts = replace(opts, blow_up_bound=min(opts.blow_up_bound, blow_up_bound))
    arc = execute_hybrid(
        art.sys,
        art.feedback,
        x0,
        s0,
        noise_model(scenario, art, seed, noise_scale),
        _horizon(scenario, art.epsilon, t_hat),
        scenario.hybrid.stop_radius,
        opts,
    )
    arc.meta.update({"seed": seed, "s0": label_name(s0), "x0": x0.tolist(), "mode": art.mode})
    return arc


def stop_slack(sys: ControlSystem, field_: MinimalTimeField, stop_radius: float) -> float:
    """
    T̂ reachable from distance stop_radius, from the largest ratio of T to
    the homogeneous quasi-norm over covered nodes.
    """
    if stop_radius <= 0:
        return 0.0
    T = field_.T.reshape(-1)
    ok = field_.covered.reshape(-1) & np.isfinite(T)
    if not np.any(ok):
        return 0.0
    quasi = sys.weighted_norm(field_.grid.nodes()[ok].T)
    positive = quasi > field_.h
    if not np.any(positive):
        return 0.0
    ratio = float(np.max(T[ok][positive] / quasi[positive]))
    return ratio * float(np.max(np.power(stop_radius, 1.0 / sys.weights)))


def _blank(value: Any) -> Any:
    return "" if value is None else value


def _map_tasks(fn: Callable[[Any], Any], tasks: Sequence[Any], workers: int) -> List[Any]:
    """Results in task order whatever the worker count."""
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


# ----- excursion envelope -----

def envelope_starts(target: np.ndarray, reach: float, count: int) -> np.ndarray:
    """Points on `count` spheres out to reach, along the directions of {-1, 0, 1}^n."""
    n = target.shape[0]
    if count <= 0 or reach <= 0:
        return np.zeros((0, n))
    dirs = np.array([d for d in itertools.product((-1.0, 0.0, 1.0), repeat=n) if any(d)])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = reach * np.arange(1, count + 1) / count
    return target + (radii[:, None, None] * dirs[None, :, :]).reshape(-1, n)


def _envelope_task(
    scenario: ScenarioConfig, art: Artifacts, seed: int, task: Tuple[int, np.ndarray]
) -> Optional[Tuple[float, float]]:
    index, x0 = task
    t_hat = _time_hat(art, x0)
    if t_hat is None:
        return None
    try:
        arc = run_once(scenario, art, x0, OMEGA, seed + ENVELOPE_SEED_OFFSET + index, t_hat=t_hat)
    except QmtError as exc:
        logger.warning(f"envelope run from {np.round(x0, 4).tolist()}: {exc}")
        return None
    return float(np.linalg.norm(x0 - art.sys.target)), arc.max_excursion


def record_envelope(scenario: ScenarioConfig, art: Artifacts, seed: int, workers: int) -> Dict[str, Any]:
    """
    Empirical δ(R), recorded once at synthesis.

    Rows come from the patch certification runs, the ω shell certification
    runs and noisy closed-loop runs from spheres reaching the corners of the
    sweep box. The envelope is widened by envelope_allowance; sweeps are
    checked against it, never against their own excursions.
    """
    sw = scenario.sweep
    tables = [p.delta_table for p in art.shells.cover]
    shell_rows = np.asarray(art.shells.omega.certification.get("delta_table", []), dtype=float).reshape(-1, 2)
    tables.append(shell_rows)
    starts = [float(r) for table in tables for r in table[:, 0]]
    excursions = [float(d) for table in tables for d in table[:, 1]]

    reach = sw.box_radius * float(np.sqrt(art.sys.n))
    points = envelope_starts(art.sys.target, reach, sw.envelope_radii)
    results = _map_tasks(lambda t: _envelope_task(scenario, art, seed, t), list(enumerate(points)), workers)
    closed_loop = [r for r in results if r is not None]
    starts.extend(r for r, _ in closed_loop)
    excursions.extend(d for _, d in closed_loop)

    table = excursion_table(starts, excursions)
    if table.size:
        table[:, 1] *= 1.0 + sw.envelope_allowance
    logger.info(
        f"excursion envelope: {len(table)} radii from {len(art.shells.cover)} patches, "
        f"{len(shell_rows)} shell rows and {len(closed_loop)}/{len(points)} closed-loop runs"
    )
    return {
        "table": table.tolist(),
        "allowance": sw.envelope_allowance,
        "patches": len(art.shells.cover),
        "shell_rows": int(len(shell_rows)),
        "closed_loop_runs": len(closed_loop),
        "closed_loop_skipped": len(points) - len(closed_loop),
    }


# ----- synth -----

@register_command("synth")
@handle_command_errors
def cmd_synth(
    config: ScenarioLike = None,
    out: Optional[Union[str, Path]] = None,
    seed: int = 0,
    mode: str = "corrected",
    threads: Optional[int] = None,
) -> Dict[str, Any]:
    """Synthesis pipeline; writes field.mtf, cover.json, feedback.json and plot data."""
    runtime = get_runtime_config()
    scenario, out_dir = _resolve(config, out)
    _check_mode(mode)
    workers = runtime.worker_count(threads)
    sys = scenario.build_system()
    grid = scenario.grid_spec(sys.n)
    hy, esc, cut = scenario.hybrid, scenario.escape, scenario.cut
    meta = _metadata(scenario, seed=seed, mode=mode)
    logger.info(f"synth {scenario.system.name} into {out_dir} with {workers} workers")

    with stage("synthesize_front"):
        samples = synthesize_front(
            sys,
            scenario.slice_grid(sys),
            scenario.integrator.t_max,
            scenario.integrator_options(),
            box=grid if grid.size else None,
            refinement=scenario.refinement() if grid.size else None,
            chunk_size=runtime.chunk_arcs,
            threads=workers,
        )
    with stage("build_time_field"):
        field_ = build_time_field(samples, grid, runtime.max_grid_mb, cut.exclusion_cells)
    snapshot = check_memory_pressure(runtime.memory_warning_threshold, "build_time_field")
    tau_radius = scenario.sweep.box_radius
    with stage("resolve_epsilon"):
        try:
            t_box: Optional[float] = field_.time_bound(tau_radius)
        except Uncovered:
            t_box = None
        epsilon = scenario.resolve_epsilon(t_box)
    logger.info(f"epsilon = {epsilon:.4g} (max T̂ within {tau_radius:g}: {t_box})")
    with stage("estimate_cut_locus"):
        model = estimate_cut_locus(
            field_, cut.angle_tol, scenario.time_tol(), cut.grad_jump_tol, cut.mask_cells, cut.exclusion_cells
        )
    with stage("cover_singular_region"):
        cover = cover_singular_region(
            sys,
            model,
            epsilon,
            esc.noise_budget,
            r1=esc.r1,
            width=scenario.escape_width(),
            candidates=esc.candidates,
            seeds=esc.seeds,
            flow_step=hy.flow_step,
            hold_step=hy.hold_step,
            base_seed=seed,
            threads=workers,
        )
    with stage("build_omega_shells"):
        omega = build_omega_shells(field_, model, cover, sys, seeds=DEFAULT_SHELL_SEEDS)
    shells = ShellFamily(omega, cover, model)
    with stage("assemble_feedback"):
        H = feedback_from_parts(sys, field_, shells, mode)
    with stage("admissible_radius"):
        chi = admissible_radius(shells)
    art = Artifacts(sys, field_, model, shells, H, chi, {"epsilon": epsilon})
    with stage("record_envelope"):
        delta = record_envelope(scenario, art, seed, workers)

    out_dir.mkdir(parents=True, exist_ok=True)
    field_path = save_field(field_, out_dir / FIELD_FILE, meta)
    tau = None if t_box is None else t_box + epsilon
    write_json(out_dir / COVER_FILE, {**meta, "version": MANIFEST_VERSION, **cover.to_dict(), "singular_set": model.to_dict()})
    manifest = {
        **meta,
        **H.manifest,
        "version": MANIFEST_VERSION,
        "epsilon": epsilon,
        "epsilon_source": "configured" if hy.epsilon > 0 else f"{hy.epsilon_fraction:g} * max T within {tau_radius:g}",
        "tau": {"radius": tau_radius, "value": tau},
        "delta": delta,
        "blow_up_factor": BLOW_UP_FACTOR,
        "hysteresis_gap": shells.hysteresis_gap(),
        "controllers": {
            "omega": {"kind": "optimal", "terminal_radius": field_.terminal_radius},
            "patches": {label_name(p.label): p.direction.tolist() for p in cover},
        },
        "field": {"path": FIELD_FILE, "digest": file_digest(field_path)},
    }
    write_json(out_dir / FEEDBACK_FILE, manifest)
    write_front_csv(samples, out_dir / FRONT_FILE, metadata=meta)
    write_cutlocus_csv(model, out_dir / CUTLOCUS_FILE, sys.n, metadata=meta)

    return {
        "config_hash": meta["config_hash"],
        "out": str(out_dir),
        "field": field_.stats(),
        "front": {**samples.stats, "max_h1_drift": samples.max_h1_drift},
        "singular_set": model.to_dict(),
        "patches": len(cover),
        "labels": H.manifest["labels"],
        "epsilon": epsilon,
        "tau": tau,
        "hysteresis_gap": shells.hysteresis_gap(),
        "chi": chi.to_dict(),
        "delta": {k: v for k, v in delta.items() if k != "table"},
        "memory": {"rss_mb": snapshot.rss_mb, "percent": snapshot.percent},
    }


# ----- simulate -----

@register_command("simulate")
@handle_command_errors
def cmd_simulate(
    config: ScenarioLike = None,
    x0: Union[str, Sequence[float], None] = None,
    s0: LabelLike = S0_OMEGA,
    out: Optional[Union[str, Path]] = None,
    seed: int = 0,
    mode: Optional[str] = None,
    run: int = 0,
    noise_scale: Optional[float] = None,
) -> Dict[str, Any]:
    """One hybrid run with its certificate; writes arc_<run>.* and jumps_<run>.csv."""
    scenario, out_dir = _resolve(config, out)
    art = load_artifacts(scenario, out_dir, mode)
    start = art.sys.target.copy() if x0 is None else parse_point(x0, art.sys.n)
    label = initial_label(art, start, s0)
    t_hat = _time_hat(art, start)

    with stage("execute_hybrid"):
        arc = run_once(scenario, art, start, label, seed, noise_scale, t_hat)
    with stage("certify_arc"):
        report = certify_arc(arc, art.feedback)

    summary = arc_summary(arc)
    meta = _metadata(scenario, seed=seed, mode=art.mode, run=run, x0=start.tolist(), s0=label_name(label))
    paths = {
        "arc": write_arc_csv(arc, out_dir / ARC_CSV.format(k=run), meta),
        "jumps": write_jumps_csv(arc, out_dir / JUMPS_CSV.format(k=run), meta),
        "certificate": write_certificate(
            report, out_dir / CERTIFICATE_TXT.format(k=run),
            {"arrival_time": _blank(arc.arrival_time), "config_hash": meta["config_hash"]},
        ),
        "store": save_arc(arc, out_dir / ARC_STORE.format(k=run), meta),
    }
    return {
        **summary,
        "x0": start.tolist(),
        "s0": label_name(label),
        "t_hat": t_hat,
        "certificate": report.to_dict(),
        "paths": {k: str(v) for k, v in paths.items()},
    }


# ----- sweep -----

SWEEP_HEADERS_TAIL = [
    "s0", "seed", "status", "arrival_time", "t_hat", "margin", "jumps", "positive_jumps",
    "max_chain", "max_excursion", "start_radius", "delta_bound", "first_omega_time", "certificate_ok",
    "derivative_residual", "error",
]


def sweep_points(scenario: ScenarioConfig, art: Artifacts) -> np.ndarray:
    """Tensor grid over the sweep box minus the target and the axis tube."""
    k, R = scenario.sweep.points_per_axis, scenario.sweep.box_radius
    n, target = art.sys.n, art.sys.target
    if k == 0:
        return np.zeros((0, n))
    axis = np.linspace(-R, R, k) if k > 1 else np.zeros(1)
    points = target + np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    keep = [
        p for p in points
        if np.any(p != target) and art.shells.omega.axis_distance(p) >= scenario.sweep.tube_exclusion
    ]
    return np.array(keep) if keep else np.zeros((0, n))


def _sweep_task(
    scenario: ScenarioConfig, art: Artifacts, noise_scale: Optional[float], task: Tuple[int, np.ndarray, str, int]
) -> Dict[str, Any]:
    index, x0, choice, seed = task
    start_radius = float(np.linalg.norm(x0 - art.sys.target))
    row: Dict[str, Any] = {
        "run": index, "x0": x0, "s0": choice, "seed": seed, "status": "uncovered",
        "start_radius": start_radius, "delta_bound": art.delta(start_radius),
    }
    t_hat = _time_hat(art, x0)
    row["t_hat"] = t_hat
    if t_hat is None:
        return row
    label = initial_label(art, x0, choice)
    row["s0"] = label_name(label)
    try:
        arc = run_once(
            scenario, art, x0, label, seed, noise_scale, t_hat, blow_up_bound=art.blow_up_bound(start_radius)
        )
    except QmtError as exc:
        row.update(status="nonconforming", error=type(exc).__name__)
        logger.warning(f"sweep run {index} from {np.round(x0, 4).tolist()}: {exc}")
        return row
    report = certify_arc(arc, art.feedback)
    margin = None
    if arc.arrival_time is not None:
        margin = arc.arrival_time - t_hat - 2.0 * art.epsilon
    row.update(
        status=arc.status,
        arrival_time=arc.arrival_time,
        margin=margin,
        jumps=len(arc.jumps),
        positive_jumps=len(arc.positive_jump_times),
        max_chain=arc.max_chain_length,
        max_excursion=arc.max_excursion,
        first_omega_time=arc.first_time_in(OMEGA),
        certificate_ok=report.ok,
        derivative_residual=report.max_derivative_residual,
    )
    return row


def summarize_sweep(rows: List[Dict[str, Any]], scenario: ScenarioConfig, art: Artifacts) -> Dict[str, Any]:
    """
    Quasi-optimality and stability figures over the sweep rows.

    A run that reached the horizon without arriving fails both the margin
    and the τ check. Excursions are held against the δ(R) recorded at synth.
    """
    ran = [r for r in rows if r["status"] in ("arrived", "horizon")]
    arrived = [r for r in ran if r["status"] == "arrived"]
    not_arrived = len(ran) - len(arrived)
    margins = [r["margin"] for r in arrived]
    slack = stop_slack(art.sys, art.field, scenario.hybrid.stop_radius)
    radii = [r["start_radius"] for r in ran]
    predicted = None
    if radii:
        try:
            predicted = art.field.time_bound(max(radii), 2.0 * art.epsilon)
        except Uncovered:
            predicted = None
    observed = max((r["arrival_time"] for r in arrived), default=None)
    max_margin = max(margins) if margins else None
    over = [r for r in ran if r["max_excursion"] > r["delta_bound"]]
    tau_ok = observed is None or (predicted is not None and observed <= predicted + slack)
    return {
        "runs": len(rows),
        "arrived": len(arrived),
        "not_arrived": not_arrived,
        "uncovered": sum(r["status"] == "uncovered" for r in rows),
        "nonconforming": [
            {"run": r["run"], "x0": r["x0"].tolist(), "s0": r["s0"], "seed": r["seed"], "error": r.get("error")}
            for r in rows if r["status"] == "nonconforming"
        ],
        "epsilon": art.epsilon,
        "max_margin": max_margin,
        "stop_slack": slack,
        "margin_ok": not_arrived == 0 and (max_margin is None or max_margin <= slack),
        "tau": {
            "radius": max(radii) if radii else None,
            "predicted": predicted,
            "observed": observed,
            "ok": not_arrived == 0 and tau_ok,
        },
        "delta": {
            "recorded": art.delta_table.tolist(),
            "observed": excursion_table(radii, [r["max_excursion"] for r in ran]).tolist(),
            "violations": [
                {"run": r["run"], "start_radius": r["start_radius"], "max_excursion": r["max_excursion"],
                 "delta_bound": r["delta_bound"]}
                for r in over
            ],
            "ok": not over,
        },
        "max_positive_jumps": max((r["positive_jumps"] for r in ran), default=0),
        "max_chain_length": max((r["max_chain"] for r in ran), default=0),
        "certificate_failures": sum(not r["certificate_ok"] for r in ran),
        "max_derivative_residual": max((r["derivative_residual"] for r in ran), default=0.0),
    }


@register_command("sweep")
@handle_command_errors
def cmd_sweep(
    config: ScenarioLike = None,
    out: Optional[Union[str, Path]] = None,
    seed: int = 0,
    mode: Optional[str] = None,
    threads: Optional[int] = None,
    noise_scale: Optional[float] = None,
) -> Dict[str, Any]:
    """
    Runs over start points × {ω, nearest patch} × noise seeds.

    Non-conforming runs are listed and the sweep continues. Rows keep task
    order whatever the thread count.
    """
    scenario, out_dir = _resolve(config, out)
    art = load_artifacts(scenario, out_dir, mode)
    scale = scenario.hybrid.noise_scale if noise_scale is None else float(noise_scale)
    silent = scenario.hybrid.noise_mode == "zero" or scale == 0.0
    seeds = [seed] if silent else [seed + k for k in range(max(scenario.hybrid.seeds, 1))]
    points = sweep_points(scenario, art)
    combos = [(x0, choice, s) for x0 in points for choice in (S0_OMEGA, S0_NEAREST) for s in seeds]
    tasks = [(i, x0, choice, s) for i, (x0, choice, s) in enumerate(combos)]
    workers = get_runtime_config().worker_count(threads)
    logger.info(f"sweep: {len(points)} points, {len(tasks)} runs on {workers} workers")

    with stage("sweep"):
        rows = _map_tasks(lambda t: _sweep_task(scenario, art, scale, t), tasks, workers)
        summary = summarize_sweep(rows, scenario, art)

    n = art.sys.n
    headers = ["run"] + [f"x{i + 1}" for i in range(n)] + SWEEP_HEADERS_TAIL
    csv_rows = (
        [r["run"], *r["x0"]] + [_blank(r.get(key)) for key in SWEEP_HEADERS_TAIL]
        for r in rows
    )
    meta = _metadata(scenario, seed=seed, mode=art.mode, noise_scale=scale, seeds=seeds)
    sweep_path = write_csv(out_dir / SWEEP_FILE, headers, csv_rows)
    write_sidecar(sweep_path, meta)
    summary_path = write_json(out_dir / SWEEP_SUMMARY_FILE, {**meta, **summary})
    return {**summary, "paths": {"sweep": str(sweep_path), "summary": str(summary_path)}}


# ----- cutlocus -----

@register_command("cutlocus")
@handle_command_errors
def cmd_cutlocus(config: ScenarioLike = None, out: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """Dump flagged cells from the stored field."""
    scenario, out_dir = _resolve(config, out)
    field_ = load_field(out_dir / FIELD_FILE)
    with stage("estimate_cut_locus"):
        model = SingularSetModel.from_field(field_)
    path = write_cutlocus_csv(model, out_dir / CUTLOCUS_FILE, field_.n, metadata=_metadata(scenario))
    components = {int(lab): int(np.sum(model.labels == lab)) for lab in model.component_labels}
    return {**model.to_dict(), "component_sizes": components, "path": str(path)}


# ----- certify -----

@register_command("certify")
@handle_command_errors
def cmd_certify(
    config: ScenarioLike = None, out: Optional[Union[str, Path]] = None, mode: Optional[str] = None
) -> Dict[str, Any]:
    """Re-run certify_arc on every stored arc_<k>.msgpack."""
    scenario, out_dir = _resolve(config, out)
    art = load_artifacts(scenario, out_dir, mode)
    stores = sorted(out_dir.glob(ARC_STORE_GLOB))
    if not stores:
        raise ArtifactsMissing(f"no stored arcs in {out_dir}", path=str(out_dir))
    results = []
    for path in stores:
        k = path.stem.split("_", 1)[1]
        with stage("certify_arc"):
            report = certify_arc(load_arc(path), art.feedback)
        write_certificate(report, out_dir / CERTIFICATE_TXT.format(k=k), {"config_hash": scenario.config_hash()})
        results.append({"run": k, **report.to_dict()})
    return {"arcs": len(results), "failed": sum(not r["ok"] for r in results), "results": results}

