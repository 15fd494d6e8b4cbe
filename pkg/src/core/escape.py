"""
Escape patches: constant-direction controllers that expel the state from
the singular neighbourhood Ω = {x : d(x, S) < width} within ε.

Each patch lives on seven nested ellipsoids around a singular sample y,
semi-axes r_l * w (w the dilation weights). The direction is picked by a
candidate search from y and then certified by noisy simulation from
seeds on the innermost shell; the noise margin ρ is halved until the
certificate holds.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import EscapeSearchFailure
from .flow import flow_until
from .noise import NoiseModel
from .synthesis import DEFAULT_EXCLUSION_CELLS, DEFAULT_MASK_CELLS, SingularSetModel
from .system import ControlSystem

logger = logging.getLogger(__name__)

SHELL_LEVELS = 7
RADIUS_GROWTH = 0.25
DEFAULT_R1 = 0.35
DEFAULT_EPSILON = 0.5
DEFAULT_NOISE_BUDGET = 0.05
DEFAULT_CANDIDATES = 16
DEFAULT_SEEDS = 100
DEFAULT_FLOW_STEP = 5e-3
DEFAULT_HOLD_STEP = 1e-2
EXTREMAL_CANDIDATES = 8
MAX_RADIUS_HALVINGS = 5
MAX_RHO_HALVINGS = 10
CONTAINMENT_SEEDS = 16
CLAIM_FRACTION = 0.49
COVER_PASSES = 3
TIE_TOL = 1e-6


def smooth_transition(s: float) -> float:
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = float(np.clip(s, 0.0, 1.0))
    if s <= 0.0:
        return 0.0
    if s >= 1.0:
        return 1.0
    a = np.exp(-1.0 / s)
    b = np.exp(-1.0 / (1.0 - s))
    return float(a / (a + b))


def weighted_radius(v: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sqrt(sum (v_k / w_k)^2) along the last axis."""
    return np.sqrt(np.sum(np.square(np.asarray(v, dtype=float) / weights), axis=-1))


def sphere_directions(count: int, n: int, seed: int = 0) -> np.ndarray:
    """Deterministic, roughly uniform unit vectors in R^n."""
    if count <= 0:
        return np.zeros((0, n))
    if n == 3:
        i = np.arange(count) + 0.5
        z = 1.0 - 2.0 * i / count
        phi = np.pi * (1.0 + np.sqrt(5.0)) * i
        r = np.sqrt(1.0 - z * z)
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    dirs = np.random.default_rng(seed).normal(size=(count, n))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


@dataclass(eq=False)
class EscapePatch:
    label: int
    component: int
    center: np.ndarray
    weights: np.ndarray
    r1: float
    direction: np.ndarray
    rho: float
    tau: float
    pinch: float
    target: np.ndarray
    exit_time: float
    delta_table: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    certification: Dict[str, Any] = field(default_factory=dict)

    @property
    def radii(self) -> np.ndarray:
        return self.r1 * (1.0 + RADIUS_GROWTH * np.arange(SHELL_LEVELS))

    def radius(self, level: int) -> float:
        return float(self.radii[level - 1])

    def margin(self, x: np.ndarray, level: int) -> float:
        """Positive inside Ω_{α,level}, zero on its boundary."""
        return self.radius(level) - float(weighted_radius(np.asarray(x) - self.center, self.weights))

    def contains(self, x: np.ndarray, level: int) -> bool:
        return self.margin(x, level) > 0.0

    def in_closure(self, x: np.ndarray, level: int) -> bool:
        return self.margin(x, level) >= 0.0

    def gap(self, level: int) -> float:
        """Distance from Ω_{α,level} to the complement of Ω_{α,level+1}."""
        return float((self.radius(level + 1) - self.radius(level)) * np.min(self.weights))

    def control(self, x: np.ndarray) -> np.ndarray:
        """u* inside Ω_6, smoothly cut off to zero on the boundary of Ω_7."""
        band = self.radius(SHELL_LEVELS) - self.radius(SHELL_LEVELS - 1)
        return self.direction * smooth_transition(self.margin(x, SHELL_LEVELS) / band)

    def rho_at(self, x: np.ndarray) -> float:
        """ρ_α(x): the certified constant times a bump vanishing at the target."""
        return self.rho * min(1.0, float(np.linalg.norm(np.asarray(x) - self.target)) / self.pinch)

    def excursion_bound(self, radius: float) -> float:
        """δ_α(R) from the certification table, extended with slope 1."""
        return excursion_from_table(self.delta_table, radius)

    def boundary_points(self, level: int, count: int) -> np.ndarray:
        dirs = sphere_directions(count, self.center.size)
        return self.center + self.radius(level) * self.weights * dirs

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "component": self.component,
            "center": self.center.tolist(),
            "weights": self.weights.tolist(),
            "r1": self.r1,
            "radii": self.radii.tolist(),
            "direction": self.direction.tolist(),
            "rho": self.rho,
            "tau": self.tau,
            "pinch": self.pinch,
            "target": self.target.tolist(),
            "exit_time": self.exit_time,
            "delta_table": self.delta_table.tolist(),
            "certification": self.certification,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EscapePatch":
        table = np.asarray(data.get("delta_table", []), dtype=float).reshape(-1, 2)
        return cls(
            label=int(data["label"]),
            component=int(data["component"]),
            center=np.asarray(data["center"], dtype=float),
            weights=np.asarray(data["weights"], dtype=float),
            r1=float(data["r1"]),
            direction=np.asarray(data["direction"], dtype=float),
            rho=float(data["rho"]),
            tau=float(data["tau"]),
            pinch=float(data["pinch"]),
            target=np.asarray(data["target"], dtype=float),
            exit_time=float(data["exit_time"]),
            delta_table=table,
            certification=dict(data.get("certification", {})),
        )


def excursion_from_table(table: np.ndarray, radius: float) -> float:
    if table.size == 0:
        return float(radius)
    Rs = np.concatenate([[0.0], table[:, 0]])
    ds = np.concatenate([[0.0], table[:, 1]])
    if radius <= Rs[-1]:
        return float(np.interp(radius, Rs, ds))
    return float(ds[-1] + (radius - Rs[-1]))


def excursion_table(starts: Sequence[float], excursions: Sequence[float]) -> np.ndarray:
    """Rows (R, δ(R)): cumulative max of excursions over starts within R, at least R."""
    if len(starts) == 0:
        return np.zeros((0, 2))
    starts_arr = np.round(np.asarray(starts, dtype=float), 9)
    exc = np.asarray(excursions, dtype=float)
    Rs = np.unique(starts_arr)
    envelope = np.array([exc[starts_arr <= R].max() for R in Rs])
    envelope = np.maximum.accumulate(np.maximum(envelope, Rs))
    return np.stack([Rs, envelope], axis=1)


# ----- candidate search -----

def candidate_controls(sys: ControlSystem, y: np.ndarray, count: int, seed: int = 0) -> np.ndarray:
    """Constant unit directions first, then initial extremal controls at y."""
    m = sys.m
    if m == 2:
        angles = 2.0 * np.pi * np.arange(count) / max(count, 1)
        constant = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    else:
        axes = np.vstack([np.eye(m), -np.eye(m)])
        extra = sphere_directions(max(count - axes.shape[0], 0), m, seed)
        constant = np.vstack([axes, extra])[:count]
    covectors = np.random.default_rng([seed, 1]).normal(size=(EXTREMAL_CANDIDATES, sys.n))
    pairing = covectors @ sys.frame(y).T
    norms = np.linalg.norm(pairing, axis=1)
    extremal = pairing[norms > 1e-9] / norms[norms > 1e-9, None]
    return np.vstack([constant, extremal])


def find_escape_control(
    sys: ControlSystem,
    y: np.ndarray,
    model: SingularSetModel,
    width: float,
    horizon: float,
    candidates: int = DEFAULT_CANDIDATES,
    step: float = DEFAULT_FLOW_STEP,
    seed: int = 0,
) -> Tuple[np.ndarray, float]:
    """Fastest candidate to reach d(x, S) >= width from y; ties go to the lowest index."""
    stop = lambda x: model.distance(x) >= width
    found: List[Tuple[float, int]] = []
    controls = candidate_controls(sys, y, candidates, seed)
    for i, u in enumerate(controls):
        trace = flow_until(lambda t, x, u=u: u @ sys.frame(x), y, horizon, step, stop)
        if trace.event_time is not None:
            found.append((trace.event_time, i))
    if not found:
        raise EscapeSearchFailure(
            f"no candidate leaves the singular neighbourhood within {horizon:g}",
            center=y,
            width=width,
        )
    best = min(t for t, _ in found)
    index = min(i for t, i in found if t <= best + TIE_TOL)
    return controls[index].copy(), float(best)


# ----- certification -----

def _noisy_rhs(sys: ControlSystem, patch: EscapePatch, noise: NoiseModel):
    signal = noise.signal(sys.m)

    def rhs(t: float, x: np.ndarray) -> np.ndarray:
        e, d, _ = signal.at(t, x)
        return patch.control(x + e) @ sys.frame(x) + d

    return rhs


def certify_patch(
    sys: ControlSystem,
    patch: EscapePatch,
    model: SingularSetModel,
    width: float,
    epsilon: float,
    noise_budget: float,
    seeds: int = DEFAULT_SEEDS,
    step: float = DEFAULT_FLOW_STEP,
    hold_step: float = DEFAULT_HOLD_STEP,
    base_seed: int = 0,
) -> Dict[str, Any]:
    """
    Halve ρ from noise_budget until every seeded run exits Ω before ε and
    every shell-boundary run stays in the next shell until it exits.
    Sets rho, tau and delta_table on the patch.
    """
    stop = lambda x: model.distance(x) >= width
    starts = np.vstack([patch.center[None, :], patch.boundary_points(1, seeds)])
    rho = noise_budget
    for attempt in range(MAX_RHO_HALVINGS + 1):
        patch.rho = rho
        exit_times: List[float] = []
        excursions: List[float] = []
        start_norms: List[float] = []
        failures = 0
        for i, x0 in enumerate(starts):
            noise = NoiseModel(
                mode="adversarial" if i % 2 == 0 else "random",
                bound=patch.rho_at,
                seed=base_seed * 100003 + i,
                hold_step=hold_step,
                toward=model.nearest_point,
            )
            trace = flow_until(_noisy_rhs(sys, patch, noise), x0, epsilon, step, stop)
            if trace.event_time is None or trace.event_time >= epsilon:
                failures += 1
                continue
            exit_times.append(trace.event_time)
            excursions.append(float(np.max(np.linalg.norm(trace.x - patch.target, axis=1))))
            start_norms.append(float(np.linalg.norm(x0 - patch.target)))
        containment = _containment(sys, patch, model, stop, epsilon, step, hold_step, base_seed)
        if failures == 0 and all(containment.values()):
            patch.tau = max(exit_times) if exit_times else 0.0
            patch.delta_table = excursion_table(start_norms, excursions)
            report = {
                "runs": int(len(starts)),
                "noise": "adversarial toward S on even seeds, random on odd seeds",
                "rho_requested": noise_budget,
                "rho_certified": rho,
                "halvings": attempt,
                "max_exit_time": patch.tau,
                "containment": {str(k): v for k, v in containment.items()},
                "statistical": True,
            }
            patch.certification = report
            return report
        logger.debug(
            f"patch {patch.label}: rho={rho:.3g} failed ({failures} late exits, "
            f"containment {containment})"
        )
        rho *= 0.5
    raise EscapeSearchFailure(
        f"patch {patch.label} could not be certified down to rho={rho:.3g}",
        center=patch.center,
        label=patch.label,
    )


def _containment(
    sys: ControlSystem,
    patch: EscapePatch,
    model: SingularSetModel,
    stop,
    epsilon: float,
    step: float,
    hold_step: float,
    base_seed: int,
) -> Dict[int, bool]:
    """Runs from the boundary of Ω_l stay in clos(Ω_{l+1}) until they leave Ω."""
    result: Dict[int, bool] = {}
    for level in range(1, SHELL_LEVELS):
        ok = True
        for i, x0 in enumerate(patch.boundary_points(level, CONTAINMENT_SEEDS)):
            noise = NoiseModel(
                mode="adversarial",
                bound=patch.rho_at,
                seed=base_seed * 100003 + 7919 * level + i,
                hold_step=hold_step,
                toward=model.nearest_point,
            )
            trace = flow_until(_noisy_rhs(sys, patch, noise), x0, epsilon, step, stop)
            margins = patch.radius(level + 1) - weighted_radius(trace.x - patch.center, patch.weights)
            if np.any(margins < 0.0):
                ok = False
                break
        result[level] = ok
    return result


def build_escape_patch(
    sys: ControlSystem,
    y: Sequence[float],
    singular_model: SingularSetModel,
    epsilon: float,
    noise_budget: float,
    r1: float = DEFAULT_R1,
    width: Optional[float] = None,
    candidates: int = DEFAULT_CANDIDATES,
    seeds: int = DEFAULT_SEEDS,
    pinch: Optional[float] = None,
    label: int = 0,
    component: int = 1,
    flow_step: float = DEFAULT_FLOW_STEP,
    hold_step: float = DEFAULT_HOLD_STEP,
    base_seed: int = 0,
) -> EscapePatch:
    """
    Search an escape direction from y, then certify it on shells of radius
    r1, halving r1 up to MAX_RADIUS_HALVINGS times when certification fails.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if singular_model.is_empty:
        raise EscapeSearchFailure("singular model is empty")
    y = np.asarray(y, dtype=float)
    if singular_model.distance(y) > 0.0:
        raise ValueError(f"patch centre {y.tolist()} does not lie on a flagged cell")
    spacing = singular_model.spacing
    width = DEFAULT_MASK_CELLS * spacing if width is None else width
    pinch = DEFAULT_EXCLUSION_CELLS * spacing if pinch is None else pinch

    # the search runs from y itself, so shrinking the shells cannot change its outcome
    direction, exit_time = find_escape_control(
        sys, y, singular_model, width, 0.5 * epsilon, candidates, flow_step, base_seed
    )
    radius = r1
    for halving in range(MAX_RADIUS_HALVINGS + 1):
        patch = EscapePatch(
            label=label,
            component=component,
            center=y.copy(),
            weights=sys.weights.copy(),
            r1=radius,
            direction=direction,
            rho=noise_budget,
            tau=exit_time,
            pinch=pinch,
            target=sys.target.copy(),
            exit_time=exit_time,
        )
        try:
            certify_patch(
                sys, patch, singular_model, width, epsilon, noise_budget, seeds, flow_step, hold_step, base_seed
            )
            if halving:
                logger.warning(f"patch {label}: radius halved {halving} times to {radius:.4g}")
            return patch
        except EscapeSearchFailure as exc:
            logger.debug(f"patch {label}: {exc}")
            radius *= 0.5
    raise EscapeSearchFailure(
        f"patch at {np.round(y, 6).tolist()} failed certification after "
        f"{MAX_RADIUS_HALVINGS} radius halvings",
        center=y,
        label=label,
    )


# ----- cover -----

@dataclass(eq=False)
class PatchCover:
    patches: List[EscapePatch]
    components: Dict[int, List[int]] = field(default_factory=dict)
    stats: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self) -> Iterator[EscapePatch]:
        return iter(self.patches)

    def patch(self, label: int) -> EscapePatch:
        for p in self.patches:
            if p.label == label:
                return p
        raise KeyError(f"no patch with label {label}")

    @property
    def labels(self) -> List[int]:
        return [p.label for p in self.patches]

    def membership_counts(self, points: np.ndarray, level: int = 1) -> np.ndarray:
        """Number of patches whose Ω_{α,level} contains each point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        counts = np.zeros(points.shape[0], dtype=np.int64)
        for p in self.patches:
            counts += weighted_radius(points - p.center, p.weights) < p.radius(level)
        return counts

    def nearest_patch(self, x: Sequence[float]) -> Optional[EscapePatch]:
        """Patch whose Ω_{α,1} is deepest at x (largest relative margin)."""
        if not self.patches:
            return None
        x = np.asarray(x, dtype=float)
        scores = [p.margin(x, 1) / p.r1 for p in self.patches]
        return self.patches[int(np.argmax(scores))]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "patches": [p.to_dict() for p in self.patches],
            "components": {str(k): v for k, v in sorted(self.components.items())},
            "stats": self.stats,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PatchCover":
        return cls(
            patches=[EscapePatch.from_dict(p) for p in data.get("patches", [])],
            components={int(k): list(v) for k, v in data.get("components", {}).items()},
            stats=dict(data.get("stats", {})),
        )


def principal_order(points: np.ndarray) -> np.ndarray:
    """Order points along their principal axis, then by lateral distance."""
    if len(points) <= 1:
        return np.arange(len(points))
    centred = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axis = vt[0]
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    proj = centred @ axis
    lateral = np.linalg.norm(centred - np.outer(proj, axis), axis=1)
    return np.lexsort((np.round(lateral, 12), np.round(proj, 12)))


def _greedy_centres(points: np.ndarray, weights: np.ndarray, claim: float) -> List[np.ndarray]:
    claimed = np.zeros(len(points), dtype=bool)
    centres = []
    for i in principal_order(points):
        if claimed[i]:
            continue
        centres.append(points[i])
        claimed |= weighted_radius(points - points[i], weights) <= claim
    return centres


def cover_singular_region(
    sys: ControlSystem,
    singular_model: SingularSetModel,
    epsilon: float,
    noise_budget: float,
    stratum_labels: Optional[Sequence[int]] = None,
    r1: float = DEFAULT_R1,
    width: Optional[float] = None,
    candidates: int = DEFAULT_CANDIDATES,
    seeds: int = DEFAULT_SEEDS,
    pinch: Optional[float] = None,
    flow_step: float = DEFAULT_FLOW_STEP,
    hold_step: float = DEFAULT_HOLD_STEP,
    base_seed: int = 0,
    threads: int = 1,
) -> PatchCover:
    """
    Greedy patch cover of every flagged cell, one index set per component.

    Centres are taken along each component's principal axis; a centre
    claims the cells within CLAIM_FRACTION * r1 of it. Cells left outside
    every Ω_{α,1} (after radius halvings) seed further passes.
    """
    if singular_model.is_empty:
        return PatchCover([], {}, {"patches": 0, "max_overlap": 0, "uncovered": 0})
    labels = list(stratum_labels) if stratum_labels is not None else singular_model.component_labels
    weights = sys.weights
    settings = dict(
        r1=r1, width=width, candidates=candidates, seeds=seeds, pinch=pinch,
        flow_step=flow_step, hold_step=hold_step,
    )

    def build(task: Tuple[int, int, np.ndarray]) -> Union[EscapePatch, EscapeSearchFailure]:
        label, component, centre = task
        try:
            return build_escape_patch(
                sys, centre, singular_model, epsilon, noise_budget,
                label=label, component=component, base_seed=base_seed + label, **settings,
            )
        except EscapeSearchFailure as exc:
            return exc

    patches: List[EscapePatch] = []
    failures: List[EscapeSearchFailure] = []
    pending = {comp: singular_model.component(comp) for comp in labels}
    for pass_index in range(COVER_PASSES):
        tasks = []
        for comp in labels:
            for centre in _greedy_centres(pending[comp], weights, CLAIM_FRACTION * r1):
                tasks.append((len(patches) + len(tasks), comp, centre))
        if not tasks:
            break
        if threads > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                built = list(pool.map(build, tasks))
        else:
            built = [build(task) for task in tasks]
        for item in built:
            if isinstance(item, EscapeSearchFailure):
                failures.append(item)
            else:
                patches.append(item)
        if failures:
            break
        cover = PatchCover(patches)
        pending = {
            comp: pts[cover.membership_counts(pts) == 0] if len(pts) else pts
            for comp, pts in ((c, singular_model.component(c)) for c in labels)
        }
        remaining = sum(len(p) for p in pending.values())
        if remaining == 0:
            break
        logger.warning(f"cover pass {pass_index + 1}: {remaining} flagged cells outside every patch")

    points = np.vstack([singular_model.component(c) for c in labels])
    missing = points[PatchCover(patches).membership_counts(points) == 0]
    if failures or len(missing):
        raise EscapeSearchFailure(
            f"singular cover incomplete: {len(failures)} failed centres, {len(missing)} uncovered cells",
            uncovered=missing,
            failed_centres=[f.context.get("center") for f in failures],
        )

    components: Dict[int, List[int]] = {}
    for p in patches:
        components.setdefault(p.component, []).append(p.label)
    counts = PatchCover(patches).membership_counts(points)
    stats = {
        "patches": len(patches),
        "max_overlap": int(counts.max()) if counts.size else 0,
        "mean_overlap": float(counts.mean()) if counts.size else 0.0,
        "uncovered": 0,
        "epsilon": epsilon,
        "noise_budget": noise_budget,
        "width": DEFAULT_MASK_CELLS * singular_model.spacing if width is None else width,
        "max_tau": max((p.tau for p in patches), default=0.0),
        "min_rho": min((p.rho for p in patches), default=0.0),
    }
    logger.info(
        f"patch cover: {len(patches)} patches over {len(components)} components, "
        f"max overlap {stats['max_overlap']}"
    )
    return PatchCover(patches, components, stats)
