"""
Hysteresis shells around the singular set and the assembled hybrid feedback.

The optimal-region family Ω_{ω,l} is the complement of capsule tubes
around one principal segment per singular component; tube radii shrink
with l so the family grows with l, and every tube is pinched to zero at
the target by φ(x) = min(1, |x - x̄| / P). Patch families are the escape
ellipsoids. Labels: OMEGA (-1) for the optimal region, patch labels 0..P-1.

Sets, with α the current label:
    C_α   = clos(Ω_{α,4}) minus Ω_{ω,1}          (ω in corrected mode: clos(Ω_{ω,7}))
    D_α   = Ω_{ω,2} ∪ (R^n minus Ω_{α,6})
    k     = k_α on Ω_{α,7}, zero elsewhere
    k_d   = ω on clos(Ω_{ω,1}) while inside Ω_{α,6};
            outside Ω_{α,6} any α' whose clos(Ω_{α',1}) holds x
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy import optimize

from .errors import InvalidShells, ShellCertificationFailure, Uncovered
from .escape import SHELL_LEVELS, PatchCover, EscapePatch, excursion_table
from .flow import flow_until
from .hybrid import OMEGA, HybridFeedback, label_name
from .synthesis import MinimalTimeField, OptimalController, SingularSetModel
from .system import ControlSystem

logger = logging.getLogger(__name__)

MODES = ("corrected", "strict-paper-sets")

DEFAULT_TUBE_RADII = (0.24, 0.20, 0.18, 0.16, 0.14, 0.12, 0.10)
TUBE_WIDENING = 0.02
MAX_WIDENINGS = 5
DEFAULT_SHELL_SEEDS = 100
CERT_STEP = 1e-2
CERT_HORIZON_SLACK = 1.0
CERT_FALLBACK_HORIZON = 5.0
SEED_OFFSET = 1e-4

CHI_CAP = 0.02
RHO_OPT_GAIN = 0.1
GAP_FRACTION = 0.9


@dataclass(eq=False)
class Segment:
    """Principal segment of one singular component."""

    start: np.ndarray
    end: np.ndarray
    component: int

    def distance(self, x: np.ndarray) -> float:
        v = self.end - self.start
        length2 = float(v @ v)
        if length2 == 0.0:
            return float(np.linalg.norm(x - self.start))
        s = float(np.clip((x - self.start) @ v / length2, 0.0, 1.0))
        return float(np.linalg.norm(x - (self.start + s * v)))

    def to_dict(self) -> Dict[str, Any]:
        return {"start": self.start.tolist(), "end": self.end.tolist(), "component": self.component}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Segment":
        return cls(np.asarray(data["start"], float), np.asarray(data["end"], float), int(data["component"]))


def principal_segment(points: np.ndarray, component: int) -> Segment:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mean = points.mean(axis=0)
    if len(points) == 1:
        return Segment(mean.copy(), mean.copy(), component)
    _, _, vt = np.linalg.svd(points - mean, full_matrices=False)
    axis = vt[0]
    proj = (points - mean) @ axis
    return Segment(mean + proj.min() * axis, mean + proj.max() * axis, component)


@dataclass(eq=False)
class OmegaShells:
    segments: List[Segment]
    radii: np.ndarray          # tube radius per level, decreasing
    pinch: float
    target: np.ndarray
    certification: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float)

    def phi(self, x: np.ndarray) -> float:
        return min(1.0, float(np.linalg.norm(x - self.target)) / self.pinch)

    def axis_distance(self, x: np.ndarray) -> float:
        if not self.segments:
            return float("inf")
        return min(seg.distance(x) for seg in self.segments)

    def margin(self, x: np.ndarray, level: int) -> float:
        """Positive inside Ω_{ω,level}, zero on its boundary."""
        x = np.asarray(x, dtype=float)
        return self.axis_distance(x) - self.radii[level - 1] * self.phi(x)

    def contains(self, x: np.ndarray, level: int) -> bool:
        return self.margin(x, level) > 0.0

    def in_closure(self, x: np.ndarray, level: int) -> bool:
        return self.margin(x, level) >= 0.0

    @property
    def min_step(self) -> float:
        return float(np.min(-np.diff(self.radii)))

    def gap_at(self, x: np.ndarray) -> float:
        """Lower bound on the distance between consecutive tube boundaries near x."""
        slope = float(self.radii[0]) / self.pinch
        return self.min_step * self.phi(np.asarray(x, dtype=float)) / float(np.sqrt(1.0 + slope * slope))

    def validate(self) -> None:
        if self.radii.shape != (SHELL_LEVELS,):
            raise InvalidShells(f"expected {SHELL_LEVELS} tube radii, got {self.radii.size}")
        if self.pinch <= 0:
            raise InvalidShells(f"pinch must be positive, got {self.pinch}")
        if np.any(self.radii <= 0) or self.min_step <= 0:
            raise InvalidShells(
                "tube radii must be positive and strictly decreasing", radii=self.radii
            )

    def widened(self, amount: float) -> "OmegaShells":
        return OmegaShells(self.segments, self.radii + amount, self.pinch, self.target)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "segments": [s.to_dict() for s in self.segments],
            "radii": self.radii.tolist(),
            "pinch": self.pinch,
            "target": self.target.tolist(),
            "certification": self.certification,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OmegaShells":
        return cls(
            segments=[Segment.from_dict(s) for s in data.get("segments", [])],
            radii=np.asarray(data["radii"], dtype=float),
            pinch=float(data["pinch"]),
            target=np.asarray(data["target"], dtype=float),
            certification=dict(data.get("certification", {})),
        )


@dataclass(eq=False)
class ShellFamily:
    """The ω family and the patch families, addressed by label."""

    omega: OmegaShells
    cover: PatchCover
    singular_model: SingularSetModel

    @property
    def labels(self) -> List[int]:
        return [OMEGA] + sorted(self.cover.labels)

    def _patch(self, label: int) -> EscapePatch:
        return self.cover.patch(label)

    def margin(self, x: np.ndarray, label: int, level: int) -> float:
        if label == OMEGA:
            return self.omega.margin(x, level)
        return self._patch(label).margin(x, level)

    def contains(self, x: np.ndarray, label: int, level: int) -> bool:
        return self.margin(x, label, level) > 0.0

    def in_closure(self, x: np.ndarray, label: int, level: int) -> bool:
        return self.margin(x, label, level) >= 0.0

    def covering_labels(self, x: np.ndarray, level: int) -> List[int]:
        return [lab for lab in self.labels if self.contains(x, lab, level)]

    def hysteresis_gap(self) -> float:
        """
        Least distance travelled between opposite switches: ω hands over
        inside tube_6 and takes back on clos(Ω_{ω,1}); a patch is entered
        in clos(Ω_{α,1}) and left outside Ω_{α,6}. The ω figure is taken
        where the tubes are unpinched.
        """
        gaps = []
        if self.omega.segments:
            slope = float(self.omega.radii[0]) / self.omega.pinch
            gaps.append(float(self.omega.radii[0] - self.omega.radii[5]) / float(np.sqrt(1.0 + slope * slope)))
        for p in self.cover:
            gaps.append(float((p.radius(6) - p.radius(1)) * np.min(p.weights)))
        return min(gaps) if gaps else float("inf")

    def validate(self) -> None:
        self.omega.validate()
        for p in self.cover:
            gaps = [p.gap(level) for level in range(1, SHELL_LEVELS)]
            if min(gaps) <= 0:
                raise InvalidShells(f"patch {p.label} has a nonpositive shell gap", label=p.label)

    def to_dict(self) -> Dict[str, Any]:
        return {"omega": self.omega.to_dict(), "cover": self.cover.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any], singular_model: SingularSetModel) -> "ShellFamily":
        return cls(OmegaShells.from_dict(data["omega"]), PatchCover.from_dict(data["cover"]), singular_model)


# ----- construction -----

def _cube_corners(points: np.ndarray, spacing: float) -> np.ndarray:
    n = points.shape[1]
    offsets = np.array(np.meshgrid(*[[-0.5, 0.5]] * n, indexing="ij")).reshape(n, -1).T * spacing
    return (points[:, None, :] + offsets[None, :, :]).reshape(-1, n)


def _perpendicular_basis(direction: np.ndarray) -> np.ndarray:
    n = direction.size
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        return np.eye(n)
    _, _, vt = np.linalg.svd((direction / norm)[None, :])
    return vt[1:]


def _tube_samples(shells: OmegaShells, spacing: float, level: int = 1) -> np.ndarray:
    """Points inside tube_level: along each segment and its caps, three radii, eight angles."""
    out = []
    n = shells.target.size
    R = shells.radii[level - 1]
    for seg in shells.segments:
        v = seg.end - seg.start
        length = float(np.linalg.norm(v))
        unit = v / length if length > 0 else np.eye(n)[0]
        basis = _perpendicular_basis(unit)
        steps = max(2, int(np.ceil((length + 2 * R) / (0.5 * spacing))) + 1)
        for s in np.linspace(-R, length + R, steps):
            centre = seg.start + s * unit
            overshoot = max(-s, s - length, 0.0)
            reach = np.sqrt(max(R * R - overshoot * overshoot, 0.0)) * shells.phi(centre)
            for frac in (0.0, 0.5, 0.9):
                for angle in np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False):
                    offset = np.cos(angle) * basis[0]
                    if basis.shape[0] > 1:
                        offset = offset + np.sin(angle) * basis[1]
                    point = centre + frac * reach * offset
                    if shells.margin(point, level) < 0.0:
                        out.append(point)
    return np.asarray(out).reshape(-1, n)


def _boundary_seeds(shells: OmegaShells, count: int) -> List[tuple]:
    """(level, point) pairs just inside Ω_{ω,level}, spread over levels 1..6 and segments."""
    if not shells.segments or count <= 0:
        return []
    seeds = []
    levels = SHELL_LEVELS - 1
    per_level = int(np.ceil(count / levels))
    golden = 0.5 * (np.sqrt(5.0) - 1.0)
    for level in range(1, SHELL_LEVELS):
        for i in range(per_level):
            if len(seeds) >= count:
                break
            seg = shells.segments[i % len(shells.segments)]
            v = seg.end - seg.start
            frac = 0.1 + 0.8 * ((i * golden) % 1.0)
            base = seg.start + frac * v
            basis = _perpendicular_basis(v)
            angle = 2.0 * np.pi * ((i * golden * 7.0 + level) % 1.0)
            direction = np.cos(angle) * basis[0] + (np.sin(angle) * basis[1] if basis.shape[0] > 1 else 0.0)
            direction = direction / np.linalg.norm(direction)
            reach = shells.radii[0] + 1.0
            g = lambda r: shells.margin(base + r * direction, level)
            if g(0.0) >= 0.0 or g(reach) <= 0.0:
                continue
            r = optimize.brentq(g, 0.0, reach, xtol=1e-10)
            seeds.append((level, base + (r + SEED_OFFSET) * direction))
    return seeds


def certify_omega_shells(
    sys: ControlSystem,
    shells: OmegaShells,
    controller: Callable[[np.ndarray], np.ndarray],
    field_: Optional[MinimalTimeField] = None,
    seeds: int = DEFAULT_SHELL_SEEDS,
    step: float = CERT_STEP,
) -> Dict[str, Any]:
    """Zero-noise optimal runs from Ω_{ω,l} must stay in Ω_{ω,l+1} until they reach the pinch ball."""
    arrive = 0.5 * shells.pinch
    runs = 0
    failures = []
    starts: List[float] = []
    excursions: List[float] = []
    for level, x0 in _boundary_seeds(shells, seeds):
        horizon = CERT_FALLBACK_HORIZON
        if field_ is not None:
            try:
                horizon = field_.time_at(x0) + CERT_HORIZON_SLACK
            except Uncovered:
                pass
        stop = lambda x, lv=level: (
            float(np.linalg.norm(x - shells.target)) <= arrive or shells.margin(x, lv + 1) <= 0.0
        )
        trace = flow_until(lambda t, x: np.asarray(controller(x)) @ sys.frame(x), x0, horizon, step, stop)
        runs += 1
        starts.append(float(np.linalg.norm(x0 - shells.target)))
        excursions.append(float(np.max(np.linalg.norm(trace.x - shells.target, axis=1))))
        if shells.margin(trace.end, level + 1) <= 0.0:
            failures.append({"level": level, "start": x0.tolist(), "time": trace.event_time})
    return {
        "runs": runs,
        "failures": len(failures),
        "first_failures": failures[:5],
        "statistical": True,
        "delta_table": excursion_table(starts, excursions).tolist(),
    }


def build_omega_shells(
    field_: MinimalTimeField,
    singular_model: SingularSetModel,
    cover: PatchCover,
    sys: ControlSystem,
    controller: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    radii: Sequence[float] = DEFAULT_TUBE_RADII,
    pinch: Optional[float] = None,
    seeds: int = DEFAULT_SHELL_SEEDS,
) -> OmegaShells:
    """
    Tube shells around each singular component.

    Radii widen by TUBE_WIDENING until every flagged cube sits inside
    tube_7 and the zero-noise optimal runs certify; tube_1 must lie inside
    the union of the patches' Ω_{α,1}. seeds=0 skips the flow certificate.
    """
    pinch = field_.exclusion_radius if pinch is None else pinch
    segments = [
        principal_segment(singular_model.component(c), c) for c in singular_model.component_labels
    ] if not singular_model.is_empty else []
    shells = OmegaShells(segments, np.asarray(radii, dtype=float), pinch, field_.target.copy())
    shells.validate()
    if not segments:
        shells.certification = {"runs": 0, "failures": 0, "widenings": 0, "empty": True}
        return shells

    controller = controller if controller is not None else OptimalController(sys, field_)
    corners = _cube_corners(singular_model.points, singular_model.spacing)
    for widening in range(MAX_WIDENINGS + 1):
        outside = sum(1 for c in corners if shells.margin(c, SHELL_LEVELS) >= 0.0)
        if outside:
            logger.debug(f"{outside} flagged cube corners outside tube_7, widening")
            shells = shells.widened(TUBE_WIDENING)
            continue
        report = certify_omega_shells(sys, shells, controller, field_, seeds) if seeds else {
            "runs": 0, "failures": 0, "statistical": False,
        }
        if report["failures"]:
            logger.warning(
                f"omega shells: {report['failures']}/{report['runs']} runs left their next shell, widening"
            )
            shells = shells.widened(TUBE_WIDENING)
            continue
        samples = _tube_samples(shells, singular_model.spacing)
        uncovered = int(np.sum(cover.membership_counts(samples, 1) == 0)) if len(samples) else 0
        if uncovered:
            raise ShellCertificationFailure(
                f"{uncovered} points of tube_1 lie outside every patch",
                uncovered=uncovered,
                radii=shells.radii,
            )
        report["widenings"] = widening
        report["tube_samples"] = int(len(samples))
        shells.certification = report
        logger.info(
            f"omega shells: {len(segments)} segments, radii {np.round(shells.radii, 3).tolist()}, "
            f"{report['runs']} certification runs"
        )
        return shells
    raise ShellCertificationFailure(
        f"omega shells not certified after {MAX_WIDENINGS} widenings",
        radii=shells.radii,
    )


# ----- admissible noise radius -----

@dataclass(eq=False)
class AdmissibleRadius:
    """
    χ(x) = bump(x) * min(cap, term_ω(x), term_α(x) for each patch).

    Each term is c(x) + max(0, -g_7(x)) with g_7 the level-7 margin of its
    family, so a family only constrains χ where it can be active. c is the
    smaller of GAP_FRACTION of half the family's shell gap and its noise
    margin (ρ_α for patches, RHO_OPT_GAIN * min(d(x, S), 1) for ω).
    """

    shells: ShellFamily
    cap: float = CHI_CAP
    gain: float = RHO_OPT_GAIN

    def bump(self, x: np.ndarray) -> float:
        return self.shells.omega.phi(x)

    def rho_opt(self, x: np.ndarray) -> float:
        return self.gain * min(self.shells.singular_model.distance(x), 1.0)

    def omega_term(self, x: np.ndarray) -> float:
        omega = self.shells.omega
        c = min(GAP_FRACTION * 0.5 * omega.gap_at(x), self.rho_opt(x)) if omega.segments else self.rho_opt(x)
        return c + max(0.0, -omega.margin(x, SHELL_LEVELS))

    def patch_term(self, patch: EscapePatch, x: np.ndarray) -> float:
        gap = min(patch.gap(level) for level in range(1, SHELL_LEVELS))
        c = min(GAP_FRACTION * 0.5 * gap, patch.rho_at(x))
        return c + max(0.0, -patch.margin(x, SHELL_LEVELS))

    def __call__(self, x: Sequence[float]) -> float:
        x = np.asarray(x, dtype=float)
        bump = self.bump(x)
        if bump == 0.0:
            return 0.0
        value = min(self.cap, self.omega_term(x))
        for patch in self.shells.cover:
            value = min(value, self.patch_term(patch, x))
        return bump * value

    def to_dict(self) -> Dict[str, Any]:
        return {"cap": self.cap, "gain": self.gain, "gap_fraction": GAP_FRACTION}


def admissible_radius(shells: ShellFamily, cap: float = CHI_CAP, gain: float = RHO_OPT_GAIN) -> AdmissibleRadius:
    shells.validate()
    return AdmissibleRadius(shells, cap, gain)


# ----- the hybrid feedback -----

def assemble_feedback(
    shells: ShellFamily,
    k_patches: Mapping[int, Callable[[np.ndarray], np.ndarray]],
    k_opt: Callable[[np.ndarray], np.ndarray],
    mode: str = "corrected",
    *,
    sys: ControlSystem,
) -> HybridFeedback:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    shells.validate()
    omega = shells.omega
    patch_labels = sorted(shells.cover.labels)
    missing = [lab for lab in patch_labels if lab not in k_patches]
    if missing:
        raise ValueError(f"no patch controller for labels {missing}")
    controllers: Dict[int, Callable[[np.ndarray], np.ndarray]] = {OMEGA: k_opt, **dict(k_patches)}
    zero = np.zeros(sys.m)

    def flow_set(x: np.ndarray, s: int) -> bool:
        if s == OMEGA and mode == "corrected":
            return omega.in_closure(x, SHELL_LEVELS)
        return shells.in_closure(x, s, 4) and not omega.contains(x, 1)

    def jump_set(x: np.ndarray, s: int) -> bool:
        return omega.contains(x, 2) or not shells.contains(x, s, 6)

    def jump_map(x: np.ndarray, s: int) -> List[int]:
        targets = [OMEGA] if omega.in_closure(x, 1) else []
        if not shells.contains(x, s, 6):
            targets += [lab for lab in patch_labels if shells.in_closure(x, lab, 1)]
        return targets

    def control(x: np.ndarray, s: int) -> np.ndarray:
        if not shells.contains(x, s, SHELL_LEVELS):
            return zero.copy()
        return np.asarray(controllers[s](x), dtype=float)

    chi = admissible_radius(shells)
    manifest = {
        "mode": mode,
        "labels": [label_name(lab) for lab in [OMEGA] + patch_labels],
        "shells": shells.to_dict(),
        "chi": chi.to_dict(),
    }
    return HybridFeedback(
        sys=sys,
        labels=tuple([OMEGA] + patch_labels),
        flow_set=flow_set,
        jump_set=jump_set,
        control=control,
        jump_map=jump_map,
        omega=OMEGA,
        mode=mode,
        manifest=manifest,
    )


def select_jump(H: HybridFeedback, x: Sequence[float], s: int) -> int:
    """k_d(x, s) with ω preferred, then the smallest patch label."""
    return H.select_jump(np.asarray(x, dtype=float), s)


def feedback_from_parts(
    sys: ControlSystem,
    field_: MinimalTimeField,
    shells: ShellFamily,
    mode: str = "corrected",
) -> HybridFeedback:
    """Wire the optimal controller and each patch's control into a feedback."""
    k_opt = OptimalController(sys, field_)
    k_patches = {p.label: p.control for p in shells.cover}
    return assemble_feedback(shells, k_patches, k_opt, mode, sys=sys)
