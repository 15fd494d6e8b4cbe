"""
Minimal-time field synthesis from extremal fronts.

A tensor grid of slice covectors is shot to t_max (optionally refined where
neighbouring fronts separate), pre-conjugate samples are binned onto a node
grid keeping the earliest arrival, the cut locus is estimated by two
independent rules, and the optimal feedback is read off the field gradient.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage, spatial

from .errors import (
    DegenerateGradient,
    IntegrationFailure,
    InvalidDimension,
    InvalidGrid,
    NoOptimalControl,
    SingularRegion,
    Uncovered,
)
from .extremal import (
    DEFAULT_OPTIONS,
    CovectorSlice,
    ExtremalArc,
    IntegratorOptions,
    first_sign_change,
    sample_times,
    shoot_batch,
)
from .memory_monitor import check_grid_budget
from .system import ControlSystem, ControlVector

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
ANGLE_START = -np.pi

DEFAULT_ANGLES = 64
DEFAULT_TRANSVERSE_MAX = 8.0
DEFAULT_TRANSVERSE_COUNT = 33
DEFAULT_CHUNK_ARCS = 256
DEFAULT_MAX_GRID_MB = 512.0

DEFAULT_ANGLE_TOL = 0.3
DEFAULT_GRAD_JUMP_TOL = 0.5
DEFAULT_MASK_CELLS = 2
DEFAULT_EXCLUSION_CELLS = 3
GRAD_FLOOR = 1e-8

# near-target samples are kept out to this multiple of the terminal radius
NEAR_TARGET_REACH = 1.5
NEAR_TARGET_BINS_PER_CELL = 4


# ----- slice grids -----

@dataclass(frozen=True, eq=False)
class SliceGrid:
    """
    Sample of the slice chart.

    Either a tensor grid (one sorted value array per chart coordinate, the
    last angle periodic) or a loose set of points. Only tensor grids can be
    refined.
    """

    axes: Tuple[np.ndarray, ...] = ()
    periods: Tuple[Optional[float], ...] = ()
    loose: Optional[np.ndarray] = None

    @classmethod
    def tensor(
        cls,
        chart: CovectorSlice,
        angles: int = DEFAULT_ANGLES,
        transverse_max: float = DEFAULT_TRANSVERSE_MAX,
        transverse_count: int = DEFAULT_TRANSVERSE_COUNT,
    ) -> "SliceGrid":
        if angles < 0 or transverse_count < 0:
            raise ValueError("slice grid counts must be nonnegative")
        axes: List[np.ndarray] = []
        periods: List[Optional[float]] = []
        for _ in range(chart.n_angles - 1):
            count = max(2, angles // 2)
            axes.append((np.arange(count) + 0.5) * np.pi / count)
            periods.append(None)
        axes.append(ANGLE_START + TWO_PI * np.arange(angles) / max(angles, 1))
        periods.append(TWO_PI)
        for _ in range(chart.dim - chart.n_angles):
            if transverse_count == 1:
                values = np.zeros(1)
            else:
                values = np.linspace(-transverse_max, transverse_max, transverse_count)
            axes.append(values)
            periods.append(None)
        return cls(axes=tuple(axes), periods=tuple(periods))

    @classmethod
    def from_points(
        cls, coords: Sequence[Sequence[float]], periods: Optional[Sequence[Optional[float]]] = None
    ) -> "SliceGrid":
        points = np.asarray(coords, dtype=float)
        if points.ndim == 1:
            points = points[None, :] if points.size else points.reshape(0, 0)
        if periods is None:
            d = points.shape[1] if points.ndim == 2 else 0
            # Brockett-style charts: one periodic angle first
            periods = tuple([TWO_PI] + [None] * max(d - 1, 0)) if d else ()
        return cls(loose=points, periods=tuple(periods))

    @property
    def is_tensor(self) -> bool:
        return self.loose is None

    @property
    def shape(self) -> Tuple[int, ...]:
        if self.loose is not None:
            return (self.loose.shape[0],)
        return tuple(a.size for a in self.axes)

    def __len__(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 0

    def points(self) -> np.ndarray:
        """Chart coordinates in C order, shape (N, d)."""
        if self.loose is not None:
            return self.loose.copy()
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def with_axis(self, axis: int, values: np.ndarray) -> "SliceGrid":
        axes = list(self.axes)
        axes[axis] = np.asarray(values, dtype=float)
        return SliceGrid(axes=tuple(axes), periods=self.periods)

    def to_dict(self) -> Dict[str, Any]:
        if self.loose is not None:
            return {"kind": "points", "count": len(self)}
        return {"kind": "tensor", "shape": list(self.shape)}


@dataclass(frozen=True)
class Refinement:
    """Midpoint insertion between neighbouring chart values whose fronts separate."""

    rounds: int = 0
    gap_cells: float = 1.0
    max_arcs: int = 12000

    def __post_init__(self):
        if self.rounds < 0 or self.max_arcs < 0:
            raise ValueError("refinement rounds and max_arcs must be nonnegative")
        if self.gap_cells <= 0:
            raise ValueError("refinement gap must be positive")


def chart_distance(a: np.ndarray, b: np.ndarray, periods: Sequence[Optional[float]]) -> np.ndarray:
    """Row-wise chart distance with periodic coordinates wrapped."""
    diff = np.atleast_2d(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)).copy()
    for k, period in enumerate(periods):
        if period and k < diff.shape[1]:
            diff[:, k] = np.mod(diff[:, k] + 0.5 * period, period) - 0.5 * period
    return np.linalg.norm(diff, axis=1)


# ----- grid -----

@dataclass(frozen=True, eq=False)
class GridSpec:
    """Node-centred axis-aligned grid: nodes at lower + i*spacing."""

    lower: np.ndarray
    upper: np.ndarray
    spacing: float

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float)).reshape(-1)
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float)).reshape(-1)
        if lower.size != upper.size:
            lower, upper = np.broadcast_arrays(lower, upper)
        object.__setattr__(self, "lower", lower.copy())
        object.__setattr__(self, "upper", upper.copy())
        object.__setattr__(self, "spacing", float(self.spacing))

    @classmethod
    def cube(cls, n: int, radius: float, spacing: float, center: Optional[Sequence[float]] = None) -> "GridSpec":
        c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
        return cls(c - radius, c + radius, spacing)

    @property
    def n(self) -> int:
        return int(self.lower.size)

    @property
    def shape(self) -> Tuple[int, ...]:
        if not np.isfinite(self.spacing) or self.spacing <= 0:
            return ()
        return tuple(int(v) + 1 for v in np.rint((self.upper - self.lower) / self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 0

    def validate(self, max_mb: float = DEFAULT_MAX_GRID_MB) -> None:
        if not np.isfinite(self.spacing) or self.spacing <= 0:
            raise InvalidGrid(f"grid spacing must be positive, got {self.spacing}", spacing=self.spacing)
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise InvalidGrid("grid bounds must be finite")
        if np.any(self.upper <= self.lower):
            raise InvalidGrid("grid upper bounds must exceed lower bounds")
        check_grid_budget(self.shape, self.n, max_mb)

    def node(self, index: Sequence[int]) -> np.ndarray:
        return self.lower + np.asarray(index, dtype=float) * self.spacing

    def nodes(self) -> np.ndarray:
        """All node coordinates in C order, shape (N, n)."""
        idx = np.indices(self.shape).reshape(self.n, -1).T
        return self.lower + idx * self.spacing

    def locate(self, x: Sequence[float]) -> Optional[Tuple[int, ...]]:
        """Index of the nearest node, or None outside the grid's cells."""
        idx, inside = self.locate_many(np.asarray(x, dtype=float)[None, :])
        if not inside[0]:
            return None
        return tuple(int(i) for i in idx[0])

    def locate_many(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        shape = np.asarray(self.shape)
        with np.errstate(invalid="ignore"):
            rel = (points - self.lower) / self.spacing
            finite = np.all(np.isfinite(rel), axis=1)
            idx = np.where(np.isfinite(rel), np.rint(rel), -1).astype(np.int64)
        inside = finite & np.all((idx >= 0) & (idx < shape), axis=1)
        return idx, inside

    def contains(self, x: Sequence[float]) -> bool:
        return self.locate(x) is not None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "spacing": self.spacing,
            "shape": list(self.shape),
        }


# ----- front samples -----

@dataclass(frozen=True)
class FrontSample:
    endpoint: np.ndarray
    time: float
    p0: np.ndarray
    conjugate_passed: bool
    covector: np.ndarray
    arc: int


@dataclass(eq=False)
class FrontSamples:
    """
    Column store of front samples; iterates as FrontSample.

    Per-sample arrays are indexed by sample, per-arc arrays by arc id.
    """

    target: np.ndarray
    weights: np.ndarray
    endpoints: np.ndarray          # (N, n)
    times: np.ndarray              # (N,)
    covectors: np.ndarray          # (N, n)
    arc_ids: np.ndarray            # (N,)
    conjugate_passed: np.ndarray   # (N,)
    arc_coords: np.ndarray         # (A, d)
    arc_p0: np.ndarray             # (A, n)
    conjugate_times: np.ndarray    # (A,), NaN when none before t_max
    h1_drift: np.ndarray           # (A,), NaN for failed arcs
    periods: Tuple[Optional[float], ...] = ()
    failures: List[IntegrationFailure] = field(default_factory=list)
    stats: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def empty(cls, sys: ControlSystem, periods: Sequence[Optional[float]] = ()) -> "FrontSamples":
        n, d = sys.n, sys.n - 1
        return cls(
            target=sys.target.copy(),
            weights=sys.weights.copy(),
            endpoints=np.zeros((0, n)),
            times=np.zeros(0),
            covectors=np.zeros((0, n)),
            arc_ids=np.zeros(0, dtype=np.int64),
            conjugate_passed=np.zeros(0, dtype=bool),
            arc_coords=np.zeros((0, d)),
            arc_p0=np.zeros((0, n)),
            conjugate_times=np.zeros(0),
            h1_drift=np.zeros(0),
            periods=tuple(periods),
            stats={"arcs": 0, "samples": 0},
        )

    def __len__(self) -> int:
        return int(self.times.size)

    def __getitem__(self, i: int) -> FrontSample:
        arc = int(self.arc_ids[i])
        return FrontSample(
            endpoint=self.endpoints[i],
            time=float(self.times[i]),
            p0=self.arc_coords[arc],
            conjugate_passed=bool(self.conjugate_passed[i]),
            covector=self.covectors[i],
            arc=arc,
        )

    def __iter__(self) -> Iterator[FrontSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_arcs(self) -> int:
        return int(self.arc_coords.shape[0])

    @property
    def max_h1_drift(self) -> float:
        finite = self.h1_drift[np.isfinite(self.h1_drift)]
        return float(finite.max()) if finite.size else 0.0

    def select(self, mask: np.ndarray) -> "FrontSamples":
        """Subset of samples; per-arc tables are shared."""
        return FrontSamples(
            target=self.target,
            weights=self.weights,
            endpoints=self.endpoints[mask],
            times=self.times[mask],
            covectors=self.covectors[mask],
            arc_ids=self.arc_ids[mask],
            conjugate_passed=self.conjugate_passed[mask],
            arc_coords=self.arc_coords,
            arc_p0=self.arc_p0,
            conjugate_times=self.conjugate_times,
            h1_drift=self.h1_drift,
            periods=self.periods,
            failures=self.failures,
            stats=dict(self.stats),
        )


@dataclass(eq=False)
class _ArcBlock:
    """Dense per-arc trajectories, leading axes follow the slice grid."""

    x: np.ndarray            # (..., K, n)
    p: np.ndarray            # (..., K, n)
    conj_index: np.ndarray   # (...,) first conjugate sample, K when none
    conj_time: np.ndarray
    drift: np.ndarray

    def reshape(self, shape: Tuple[int, ...]) -> "_ArcBlock":
        tail = self.x.shape[-2:]
        return _ArcBlock(
            self.x.reshape(shape + tail),
            self.p.reshape(shape + tail),
            self.conj_index.reshape(shape),
            self.conj_time.reshape(shape),
            self.drift.reshape(shape),
        )

    def merged(self, other: "_ArcBlock", axis: int, order: np.ndarray) -> "_ArcBlock":
        def join(a, b):
            return np.take(np.concatenate([a, b], axis=axis), order, axis=axis)

        return _ArcBlock(
            join(self.x, other.x),
            join(self.p, other.p),
            join(self.conj_index, other.conj_index),
            join(self.conj_time, other.conj_time),
            join(self.drift, other.drift),
        )


def _conjugate_estimate(times: np.ndarray, dets: np.ndarray) -> Tuple[int, float]:
    k = first_sign_change(dets)
    if k is None:
        return times.size, float("nan")
    d0, d1 = dets[k - 1], dets[k]
    if d1 == d0:
        return k, float(times[k])
    return k, float(times[k - 1] + (times[k] - times[k - 1]) * d0 / (d0 - d1))


class _FrontShooter:
    """Chunked batch shooting; chunk size never depends on the worker count."""

    def __init__(
        self,
        sys: ControlSystem,
        chart: CovectorSlice,
        t_max: float,
        opts: IntegratorOptions,
        chunk_size: int,
        threads: int,
    ):
        self.sys = sys
        self.chart = chart
        self.t_max = t_max
        self.opts = opts
        self.chunk_size = max(1, int(chunk_size))
        self.threads = max(1, int(threads))
        self.times = sample_times(t_max, opts.sample_stride)
        self.failures: List[IntegrationFailure] = []

    def _run(self, coords: np.ndarray) -> List[Union[ExtremalArc, IntegrationFailure]]:
        return shoot_batch(self.sys, self.chart, coords, self.t_max, self.opts)

    def shoot(self, coords: np.ndarray) -> _ArcBlock:
        N, K, n = coords.shape[0], self.times.size, self.sys.n
        chunks = [coords[i: i + self.chunk_size] for i in range(0, N, self.chunk_size)]
        if self.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(self._run, chunks))
        else:
            results = [self._run(chunk) for chunk in chunks]

        block = _ArcBlock(
            x=np.full((N, K, n), np.nan),
            p=np.full((N, K, n), np.nan),
            conj_index=np.zeros(N, dtype=np.int64),
            conj_time=np.full(N, np.nan),
            drift=np.full(N, np.nan),
        )
        for i, item in enumerate(itertools.chain.from_iterable(results)):
            if isinstance(item, IntegrationFailure):
                self.failures.append(item)
                continue
            block.x[i] = item.x
            block.p[i] = item.p
            block.conj_index[i], block.conj_time[i] = _conjugate_estimate(item.t, item.determinants)
            block.drift[i] = item.max_h1_drift
        logger.debug(f"shot {N} arcs in {len(chunks)} chunks")
        return block


def _inside(x: np.ndarray, box: GridSpec, pad: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.all((x >= box.lower - pad) & (x <= box.upper + pad), axis=-1)


def _axis_gaps(
    grid: SliceGrid, block: _ArcBlock, axis: int, box: GridSpec
) -> Tuple[np.ndarray, np.ndarray]:
    """Max front separation between neighbouring values on one axis, and their midpoints."""
    values = grid.axes[axis]
    period = grid.periods[axis]
    h = box.spacing
    K = block.x.shape[-2]
    valid = (np.arange(K) < block.conj_index[..., None]) & _inside(block.x, box, h)
    X = np.moveaxis(block.x, axis, 0)
    V = np.moveaxis(valid, axis, 0)
    lo, hi, vlo, vhi = X[:-1], X[1:], V[:-1], V[1:]
    mids = 0.5 * (values[:-1] + values[1:])
    if period and values.size >= 2:
        lo = np.concatenate([lo, X[-1:]])
        hi = np.concatenate([hi, X[:1]])
        vlo = np.concatenate([vlo, V[-1:]])
        vhi = np.concatenate([vhi, V[:1]])
        wrap = 0.5 * (values[-1] + values[0] + period)
        if wrap >= ANGLE_START + period:
            wrap -= period
        mids = np.append(mids, wrap)
    if lo.shape[0] == 0:
        return np.zeros(0), mids
    dist = np.where(vlo & vhi, np.linalg.norm(lo - hi, axis=-1), 0.0)
    dist = np.nan_to_num(dist, nan=0.0)
    return dist.reshape(dist.shape[0], -1).max(axis=1), mids


def _refine(
    grid: SliceGrid,
    block: _ArcBlock,
    shooter: _FrontShooter,
    box: GridSpec,
    refinement: Refinement,
) -> Tuple[SliceGrid, _ArcBlock, Dict[str, Any]]:
    threshold = refinement.gap_cells * box.spacing
    d = len(grid.axes)
    # transverse axes first: fronts separate fastest along them
    order = [k for k in range(d) if grid.periods[k] is None and k >= d - (shooter.sys.n - shooter.sys.m)]
    order += [k for k in range(d) if k not in order]
    inserted = 0
    budget_hit = False
    rounds_run = 0
    for round_index in range(refinement.rounds):
        added = 0
        for axis in order:
            gaps, mids = _axis_gaps(grid, block, axis, box)
            wanted = np.nonzero(gaps > threshold)[0]
            if wanted.size == 0:
                continue
            wanted = wanted[np.argsort(-gaps[wanted], kind="stable")]
            cost = len(grid) // max(grid.shape[axis], 1)
            room = (refinement.max_arcs - len(grid)) // max(cost, 1)
            if room < wanted.size:
                budget_hit = True
                wanted = wanted[: max(room, 0)]
            if wanted.size == 0:
                continue
            new_values = np.sort(mids[wanted])
            new_grid = grid.with_axis(axis, new_values)
            new_block = shooter.shoot(new_grid.points()).reshape(new_grid.shape)
            combined = np.concatenate([grid.axes[axis], new_values])
            sort = np.argsort(combined, kind="stable")
            block = block.merged(new_block, axis, sort)
            grid = grid.with_axis(axis, combined[sort])
            added += int(new_values.size) * cost
            logger.debug(
                f"refinement round {round_index + 1}: axis {axis} +{new_values.size} values "
                f"(max gap {gaps[wanted[0]]:.3g})"
            )
        rounds_run = round_index + 1
        inserted += added
        if added == 0:
            break
    if budget_hit:
        logger.warning(f"front refinement stopped at the arc budget ({refinement.max_arcs})")
    stats = {"rounds": rounds_run, "inserted_arcs": inserted, "budget_hit": budget_hit}
    return grid, block, stats


def synthesize_front(
    sys: ControlSystem,
    slice_grid: SliceGrid,
    t_max: float,
    opts: IntegratorOptions = DEFAULT_OPTIONS,
    box: Optional[GridSpec] = None,
    refinement: Optional[Refinement] = None,
    chunk_size: int = DEFAULT_CHUNK_ARCS,
    threads: int = 1,
) -> FrontSamples:
    """
    Shoot every chart point of slice_grid to t_max and sample the fronts.

    Samples from the first conjugate sign change on carry
    conjugate_passed. When box is given only samples within one cell of it
    are kept and refinement measures front gaps in box cells. Per-arc
    integration failures are recorded, never raised.
    """
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if len(slice_grid) == 0:
        return FrontSamples.empty(sys, slice_grid.periods)

    chart = CovectorSlice(sys)
    shooter = _FrontShooter(sys, chart, t_max, opts, chunk_size, threads)
    block = shooter.shoot(slice_grid.points()).reshape(slice_grid.shape)
    grid = slice_grid
    refine_stats: Dict[str, Any] = {"rounds": 0, "inserted_arcs": 0, "budget_hit": False}
    if refinement is not None and refinement.rounds > 0 and box is not None and grid.is_tensor:
        grid, block, refine_stats = _refine(grid, block, shooter, box, refinement)

    times = shooter.times
    K, n = times.size, sys.n
    X = block.x.reshape(-1, K, n)
    P = block.p.reshape(-1, K, n)
    conj = block.conj_index.reshape(-1)
    valid = np.all(np.isfinite(X), axis=-1)
    if box is not None:
        valid &= _inside(X, box, box.spacing)
    arc_idx, k_idx = np.nonzero(valid)
    coords = grid.points()

    samples = FrontSamples(
        target=sys.target.copy(),
        weights=sys.weights.copy(),
        endpoints=X[arc_idx, k_idx],
        times=times[k_idx],
        covectors=P[arc_idx, k_idx],
        arc_ids=arc_idx.astype(np.int64),
        conjugate_passed=k_idx >= conj[arc_idx],
        arc_coords=coords,
        arc_p0=chart.to_covector(coords),
        conjugate_times=block.conj_time.reshape(-1),
        h1_drift=block.drift.reshape(-1),
        periods=grid.periods,
        failures=list(shooter.failures),
    )
    samples.stats = {
        "arcs": len(grid),
        "samples": len(samples),
        "failures": len(shooter.failures),
        "max_h1_drift": samples.max_h1_drift,
        "slice_grid": grid.to_dict(),
        **refine_stats,
    }
    if shooter.failures:
        logger.warning(f"{len(shooter.failures)} of {len(grid)} arcs failed to integrate")
    logger.info(f"front: {len(grid)} arcs, {len(samples)} samples, max H1 drift {samples.max_h1_drift:.2e}")
    return samples


# ----- minimal-time field -----

def _neighbour(values: np.ndarray, valid: np.ndarray, axis: int, step: int) -> Tuple[np.ndarray, np.ndarray]:
    """Values and validity of the neighbour at offset step along axis."""
    out = np.full(values.shape, np.nan)
    ok = np.zeros(valid.shape, dtype=bool)
    src = [slice(None)] * values.ndim
    dst = [slice(None)] * values.ndim
    if step > 0:
        dst[axis], src[axis] = slice(0, -step), slice(step, None)
    else:
        dst[axis], src[axis] = slice(-step, None), slice(0, step)
    out[tuple(dst)] = values[tuple(src)]
    ok[tuple(dst)] = valid[tuple(src)]
    return out, ok


@dataclass(eq=False)
class MinimalTimeField:
    grid: GridSpec
    target: np.ndarray
    weights: np.ndarray
    T: np.ndarray                  # NaN on uncovered nodes
    winner_coords: np.ndarray      # shape + (d,)
    winner_covector: np.ndarray    # shape + (n,), p at the winning sample
    coverage: np.ndarray           # distinct arcs per node
    cut_flag: np.ndarray
    two_arrival: np.ndarray
    gradient_jump: np.ndarray
    singular_mask: np.ndarray
    near_target_points: np.ndarray
    near_target_covectors: np.ndarray
    terminal_radius: float
    periods: Tuple[Optional[float], ...] = ()
    knobs: Dict[str, Any] = field(default_factory=dict)
    samples: Optional[FrontSamples] = field(default=None, repr=False)
    _gradient: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    @property
    def h(self) -> float:
        return self.grid.spacing

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def covered(self) -> np.ndarray:
        return self.coverage > 0

    @property
    def usable(self) -> np.ndarray:
        return self.covered & ~self.singular_mask

    @property
    def target_index(self) -> Optional[Tuple[int, ...]]:
        return self.grid.locate(self.target)

    @property
    def exclusion_radius(self) -> float:
        return float(self.knobs.get("exclusion_cells", DEFAULT_EXCLUSION_CELLS)) * self.h

    def invalidate_gradient(self) -> None:
        self._gradient = None

    def gradient_grid(self) -> np.ndarray:
        """
        Per-node gradient, shape + (n,).

        Central differences where both neighbours are usable, one-sided
        where only one is, the winner covector where neither is; NaN on
        unusable nodes.
        """
        if self._gradient is not None:
            return self._gradient
        usable = self.usable
        T = np.where(usable, self.T, np.nan)
        G = np.empty(self.T.shape + (self.n,))
        h = self.h
        for k in range(self.n):
            Tm, um = _neighbour(T, usable, k, -1)
            Tp, up = _neighbour(T, usable, k, +1)
            with np.errstate(invalid="ignore"):
                comp = self.winner_covector[..., k].copy()
                comp = np.where(up & ~um, (Tp - T) / h, comp)
                comp = np.where(um & ~up, (T - Tm) / h, comp)
                comp = np.where(um & up, (Tp - Tm) / (2.0 * h), comp)
            G[..., k] = np.where(usable, comp, np.nan)
        self._gradient = G
        return G

    def _covered_index(self, x: np.ndarray) -> Tuple[int, ...]:
        idx = self.grid.locate(x)
        if idx is None:
            raise Uncovered(f"point {np.round(x, 6).tolist()} lies outside the grid", point=x)
        if not self.covered[idx]:
            raise Uncovered(f"point {np.round(x, 6).tolist()} lies in an uncovered cell", point=x)
        return idx

    def time_at(self, x: Sequence[float]) -> float:
        """T̂(x): nearest node value plus the first-order gradient correction."""
        x = np.asarray(x, dtype=float)
        idx = self._covered_index(x)
        g = self.gradient_grid()[idx]
        if not np.all(np.isfinite(g)):
            g = self.winner_covector[idx]
        return max(0.0, float(self.T[idx] + g @ (x - self.grid.node(idx))))

    def time_bound(self, radius: float, epsilon: float = 0.0) -> float:
        """τ(R): max T̂ + ε over covered nodes within radius of the target."""
        nodes = self.grid.nodes()
        near = np.linalg.norm(nodes - self.target, axis=1) <= radius
        near &= self.covered.reshape(-1)
        if not np.any(near):
            raise Uncovered(f"no covered node within {radius} of the target", radius=radius)
        return float(np.max(self.T.reshape(-1)[near])) + epsilon

    def stats(self) -> Dict[str, Any]:
        covered = int(self.covered.sum())
        return {
            "nodes": int(self.T.size),
            "covered": covered,
            "uncovered": int(self.T.size - covered),
            "cut_cells": int(self.cut_flag.sum()),
            "two_arrival_cells": int(self.two_arrival.sum()),
            "gradient_jump_cells": int(self.gradient_jump.sum()),
            "masked_cells": int(self.singular_mask.sum()),
            "near_target_samples": int(self.near_target_points.shape[0]),
        }


def _first_per_group(keys: List[np.ndarray], group: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Lexsort by (group, *keys) and return (order, first-of-group mask over order)."""
    order = np.lexsort(tuple(reversed(keys)) + (group,))
    sorted_group = group[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = sorted_group[1:] != sorted_group[:-1]
    return order, first


def build_time_field(
    samples: FrontSamples,
    grid_spec: GridSpec,
    max_grid_mb: float = DEFAULT_MAX_GRID_MB,
    terminal_cells: int = DEFAULT_EXCLUSION_CELLS,
) -> MinimalTimeField:
    """
    Bin pre-conjugate samples onto the grid, earliest arrival wins.

    A sample at x with time t and covector p votes t + <p, node - x> for
    its nearest node, the correction clipped to one cell. Ties go to the
    lexicographically smaller chart coordinates, so the reduction does not
    depend on sample order.
    """
    if len(samples) == 0:
        raise ValueError("build_time_field needs at least one front sample")
    grid_spec.validate(max_grid_mb)
    shape = grid_spec.shape
    n, h = grid_spec.n, grid_spec.spacing
    if samples.endpoints.shape[1] != n:
        raise InvalidDimension(f"samples live in R^{samples.endpoints.shape[1]}, grid in R^{n}")
    d = samples.arc_coords.shape[1]
    size = int(np.prod(shape))

    idx, inside = grid_spec.locate_many(samples.endpoints)
    keep = inside & ~samples.conjugate_passed
    X = samples.endpoints[keep]
    P = samples.covectors[keep]
    t = samples.times[keep]
    arcs = samples.arc_ids[keep]
    I = idx[keep]
    flat = np.ravel_multi_index(I.T, shape) if I.size else np.zeros(0, dtype=np.int64)
    nodes = grid_spec.lower + I * h
    correction = np.clip(np.sum(P * (nodes - X), axis=1), -h, h)
    arrival = np.maximum(0.0, t + correction)
    coords = samples.arc_coords[arcs]

    T = np.full(size, np.nan)
    winner_coords = np.full((size, d), np.nan)
    winner_covector = np.full((size, n), np.nan)
    coverage = np.zeros(size, dtype=np.int64)
    if flat.size:
        order, first = _first_per_group([arrival] + [coords[:, k] for k in range(d)], flat)
        win = order[first]
        T[flat[win]] = arrival[win]
        winner_coords[flat[win]] = coords[win]
        winner_covector[flat[win]] = P[win]
        n_arcs = int(samples.arc_coords.shape[0])
        pairs = np.unique(flat * n_arcs + arcs)
        coverage = np.bincount(pairs // n_arcs, minlength=size).astype(np.int64)

    # terminal samples: one earliest sample per bin, bins isotropic after dilation scaling
    terminal_radius = terminal_cells * h
    weights = samples.weights
    pre = ~samples.conjugate_passed & (samples.times > 0)
    E = samples.endpoints[pre]
    delta = np.abs(E - samples.target)
    quasi = np.max(np.power(delta, 1.0 / weights), axis=1) if E.size else np.zeros(0)
    near = quasi <= NEAR_TARGET_REACH * terminal_radius
    near_points = np.zeros((0, n))
    near_covectors = np.zeros((0, n))
    if np.any(near):
        E, Pn, tn = E[near], samples.covectors[pre][near], samples.times[pre][near]
        scaled = (E - samples.target) * np.power(terminal_radius, 1.0 - weights)
        bins = np.rint(scaled / (h / NEAR_TARGET_BINS_PER_CELL)).astype(np.int64)
        _, gid = np.unique(bins, axis=0, return_inverse=True)
        order, first = _first_per_group([tn] + [E[:, k] for k in range(n)], gid.reshape(-1))
        near_points = E[order[first]]
        near_covectors = Pn[order[first]]

    field_ = MinimalTimeField(
        grid=grid_spec,
        target=samples.target.copy(),
        weights=weights.copy(),
        T=T.reshape(shape),
        winner_coords=winner_coords.reshape(shape + (d,)),
        winner_covector=winner_covector.reshape(shape + (n,)),
        coverage=coverage.reshape(shape),
        cut_flag=np.zeros(shape, dtype=bool),
        two_arrival=np.zeros(shape, dtype=bool),
        gradient_jump=np.zeros(shape, dtype=bool),
        singular_mask=np.zeros(shape, dtype=bool),
        near_target_points=near_points,
        near_target_covectors=near_covectors,
        terminal_radius=terminal_radius,
        periods=samples.periods,
        knobs={"spacing": h, "terminal_cells": terminal_cells},
        samples=samples,
    )
    stats = field_.stats()
    if stats["uncovered"]:
        logger.warning(f"{stats['uncovered']} of {stats['nodes']} grid nodes are uncovered")
    logger.info(f"time field: {stats['covered']} covered nodes on grid {shape}")
    return field_


# ----- cut locus -----

def _two_arrival_flags(field_: MinimalTimeField, angle_tol: float, time_tol: float) -> np.ndarray:
    """
    Nodes reached by separated chart families at nearly the same time.

    Arrivals are compared inside sub-cells sized (h/2)^w per axis around
    each node, so the comparison scale follows the dilation structure.
    """
    samples = field_.samples
    grid = field_.grid
    flags = np.zeros(field_.T.size, dtype=bool)
    if samples is None or len(samples) == 0:
        return flags.reshape(field_.T.shape)
    h = grid.spacing
    away = np.linalg.norm(samples.endpoints - field_.target, axis=1) > field_.exclusion_radius
    idx, inside = grid.locate_many(samples.endpoints)
    keep = inside & away & ~samples.conjugate_passed
    if not np.any(keep):
        return flags.reshape(field_.T.shape)
    X = samples.endpoints[keep]
    t = samples.times[keep]
    coords = samples.arc_coords[samples.arc_ids[keep]]
    I = idx[keep]
    node_flat = np.ravel_multi_index(I.T, grid.shape)
    cell = np.power(0.5 * h, field_.weights)
    q = np.rint((X - (grid.lower + I * h)) / cell).astype(np.int64)
    _, gid = np.unique(np.column_stack([node_flat, q]), axis=0, return_inverse=True)
    gid = gid.reshape(-1)

    d = coords.shape[1]
    order, first = _first_per_group([t] + [coords[:, k] for k in range(d)], gid)
    starts = np.maximum.accumulate(np.where(first, np.arange(order.size), 0))
    winner = order[starts]
    close = t[order] <= t[winner] + time_tol
    spread = close & (chart_distance(coords[order], coords[winner], field_.periods) > angle_tol)
    group_spread = np.zeros(int(gid.max()) + 1, dtype=bool)
    group_spread[gid[order][spread]] = True

    heads = order[first]
    T_flat = field_.T.reshape(-1)
    with np.errstate(invalid="ignore"):
        early = t[heads] <= T_flat[node_flat[heads]] + time_tol
    hit = group_spread[gid[heads]] & early
    flags[node_flat[heads][hit]] = True
    return flags.reshape(field_.T.shape)


def _gradient_jump_flags(field_: MinimalTimeField, grad_jump_tol: float) -> np.ndarray:
    """Concave kinks: backward minus forward difference above tolerance on some axis."""
    T, covered, h = field_.T, field_.covered, field_.h
    flags = np.zeros(T.shape, dtype=bool)
    for k in range(field_.n):
        Tm, cm = _neighbour(T, covered, k, -1)
        Tp, cp = _neighbour(T, covered, k, +1)
        with np.errstate(invalid="ignore"):
            ridge = ((T - Tm) - (Tp - T)) / h
            flags |= covered & cm & cp & (ridge > grad_jump_tol)
    return flags


def _structure(n: int) -> np.ndarray:
    return np.ones((3,) * n, dtype=bool)


def estimate_cut_locus(
    field_: MinimalTimeField,
    angle_tol: float = DEFAULT_ANGLE_TOL,
    time_tol: Optional[float] = None,
    grad_jump_tol: float = DEFAULT_GRAD_JUMP_TOL,
    mask_cells: int = DEFAULT_MASK_CELLS,
    exclusion_cells: int = DEFAULT_EXCLUSION_CELLS,
) -> "SingularSetModel":
    """
    Flag cut cells on the field (in place) and return the singular set model.

    Both estimators are kept separately on the field; the cut flag is their
    union restricted to cells with two or more arcs and outside the
    exclusion ball around the target.
    """
    h = field_.h
    time_tol = 2.0 * h if time_tol is None else time_tol
    field_.knobs.update(
        {
            "angle_tol": angle_tol,
            "time_tol": time_tol,
            "grad_jump_tol": grad_jump_tol,
            "mask_cells": mask_cells,
            "exclusion_cells": exclusion_cells,
        }
    )
    if field_.samples is None:
        logger.info("field carries no front samples, reusing stored cut flags")
        return SingularSetModel.from_field(field_)

    nodes = field_.grid.nodes().reshape(field_.T.shape + (field_.n,))
    eligible = (field_.coverage >= 2) & (
        np.linalg.norm(nodes - field_.target, axis=-1) > field_.exclusion_radius
    )
    two = _two_arrival_flags(field_, angle_tol, time_tol) & eligible
    jump = _gradient_jump_flags(field_, grad_jump_tol) & eligible
    cut = two | jump
    if mask_cells > 0 and cut.any():
        mask = ndimage.binary_dilation(cut, structure=_structure(field_.n), iterations=mask_cells)
    else:
        mask = cut.copy()

    field_.two_arrival[...] = two
    field_.gradient_jump[...] = jump
    field_.cut_flag[...] = cut
    field_.singular_mask[...] = mask
    field_.invalidate_gradient()
    model = SingularSetModel.from_field(field_)
    logger.info(
        f"cut locus: {int(cut.sum())} cells ({int(two.sum())} two-arrival, "
        f"{int(jump.sum())} gradient-jump), {model.n_components} components"
    )
    return model


@dataclass(eq=False)
class SingularSetModel:
    """Flagged cells as closed cubes of side spacing, with component labels."""

    points: np.ndarray                  # (F, n) flagged cell centres
    labels: np.ndarray                  # (F,) component labels, 1-based
    spacing: float
    two_arrival: Optional[np.ndarray] = None
    gradient_jump: Optional[np.ndarray] = None
    agreement: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            pts = pts.reshape(1, -1) if pts.size else np.zeros((0, 0))
        self.points = pts
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self._tree = spatial.cKDTree(pts) if pts.shape[0] else None

    @classmethod
    def from_points(
        cls, points: Sequence[Sequence[float]], spacing: float, labels: Optional[Sequence[int]] = None
    ) -> "SingularSetModel":
        pts = np.asarray(points, dtype=float)
        lab = np.ones(len(pts) if pts.ndim == 2 else int(pts.size > 0), dtype=np.int64)
        if labels is not None:
            lab = np.asarray(labels, dtype=np.int64)
        return cls(points=pts, labels=lab, spacing=spacing)

    @classmethod
    def from_field(cls, field_: MinimalTimeField) -> "SingularSetModel":
        cut = field_.cut_flag
        grid_labels, _ = ndimage.label(cut, structure=_structure(field_.n))
        idx = np.argwhere(cut)
        agreement = {}
        if cut.any():
            one = _structure(field_.n)
            near_jump = ndimage.binary_dilation(field_.gradient_jump, structure=one)
            near_two = ndimage.binary_dilation(field_.two_arrival, structure=one)
            two_count = int(field_.two_arrival.sum())
            jump_count = int(field_.gradient_jump.sum())
            agreement = {
                "two_arrival_near_jump": float((field_.two_arrival & near_jump).sum() / two_count) if two_count else 1.0,
                "jump_near_two_arrival": float((field_.gradient_jump & near_two).sum() / jump_count) if jump_count else 1.0,
            }
        return cls(
            points=field_.grid.lower + idx * field_.h if idx.size else np.zeros((0, field_.n)),
            labels=grid_labels[cut],
            spacing=field_.h,
            two_arrival=field_.two_arrival[cut],
            gradient_jump=field_.gradient_jump[cut],
            agreement=agreement,
        )

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    @property
    def component_labels(self) -> List[int]:
        return sorted(int(v) for v in np.unique(self.labels))

    @property
    def n_components(self) -> int:
        return len(self.component_labels)

    def component(self, label: int) -> np.ndarray:
        return self.points[self.labels == label]

    def nearest_point(self, x: Sequence[float]) -> Optional[np.ndarray]:
        """Closest point of the union of flagged closed cells, None when empty."""
        if self._tree is None:
            return None
        x = np.asarray(x, dtype=float)
        half = 0.5 * self.spacing
        nearest, _ = self._tree.query(x)
        # any cube beating the nearest centre's cube has its centre within this reach
        reach = nearest + half * np.sqrt(x.size) + 1e-12
        candidates = self.points[self._tree.query_ball_point(x, reach)]
        projected = np.clip(x, candidates - half, candidates + half)
        best = int(np.argmin(np.linalg.norm(projected - x, axis=1)))
        return projected[best]

    def distance(self, x: Sequence[float]) -> float:
        """d(x, S): Euclidean distance to the union of flagged closed cells."""
        point = self.nearest_point(x)
        if point is None:
            return float("inf")
        return float(np.linalg.norm(point - np.asarray(x, dtype=float)))

    def distances(self, points: np.ndarray) -> np.ndarray:
        return np.array([self.distance(p) for p in np.atleast_2d(points)])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cells": len(self),
            "components": self.n_components,
            "spacing": self.spacing,
            "agreement": self.agreement,
        }


# ----- gradient and feedback -----

def _interpolate_gradient(field_: MinimalTimeField, x: np.ndarray, idx: Tuple[int, ...]) -> np.ndarray:
    G = field_.gradient_grid()
    grid = field_.grid
    shape = np.asarray(grid.shape)
    if np.any(shape < 2):
        return G[idx].copy()
    rel = (x - grid.lower) / grid.spacing
    base = np.clip(np.floor(rel).astype(np.int64), 0, shape - 2)
    frac = np.clip(rel - base, 0.0, 1.0)
    usable = field_.usable
    acc = np.zeros(grid.n)
    for corner in itertools.product((0, 1), repeat=grid.n):
        c = tuple(int(v) for v in base + np.asarray(corner))
        if not usable[c]:
            return G[idx].copy()
        weight = float(np.prod(np.where(np.asarray(corner) == 1, frac, 1.0 - frac)))
        acc += weight * G[c]
    return acc


def grad_time(field_: MinimalTimeField, x: Sequence[float]) -> Union[np.ndarray, SingularRegion]:
    """
    ∇T at x, multilinear in the usable nodes around x.

    Returns a SingularRegion marker inside the singular mask; raises
    Uncovered outside the grid or on uncovered cells.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (field_.n,):
        raise InvalidDimension(f"point must have shape ({field_.n},), got {x.shape}")
    idx = field_._covered_index(x)
    if field_.singular_mask[idx]:
        return SingularRegion(x.tolist())
    return _interpolate_gradient(field_, x, idx)


def feedback_from_gradient(
    sys: ControlSystem, x: np.ndarray, gradient: np.ndarray, grad_floor: float = GRAD_FLOOR
) -> ControlVector:
    """u_i = -<∇T, f_i(x)> / |F(x)∇T|."""
    pairing = sys.frame(np.asarray(x, dtype=float)) @ np.asarray(gradient, dtype=float)
    norm = float(np.linalg.norm(pairing))
    if norm < grad_floor:
        raise DegenerateGradient(f"|F(x) grad T| = {norm:.3e} below floor {grad_floor:g}", point=x)
    return ControlVector(-pairing / norm, admissible=True)


def optimal_feedback(
    sys: ControlSystem, field_: MinimalTimeField, x: Sequence[float], grad_floor: float = GRAD_FLOOR
) -> ControlVector:
    x = np.asarray(x, dtype=float)
    target_index = field_.target_index
    if target_index is not None and field_.grid.locate(x) == target_index:
        raise NoOptimalControl("no optimal control in the target cell", point=x)
    gradient = grad_time(field_, x)
    if isinstance(gradient, SingularRegion):
        raise NoOptimalControl("point lies in the singular region", point=x)
    return feedback_from_gradient(sys, x, gradient, grad_floor)


class OptimalController:
    """
    The optimal-region controller k_ω.

    Away from the target it is optimal_feedback, falling back to the
    winner covector of the nearest usable node where the grid gradient is
    unavailable. Inside the terminal radius it follows the nearest
    near-target front sample; homogeneous systems first dilate the query
    out to the terminal sphere, which makes the law degree-0 homogeneous.
    """

    def __init__(self, sys: ControlSystem, field_: MinimalTimeField, grad_floor: float = GRAD_FLOOR):
        self.sys = sys
        self.field = field_
        self.grad_floor = grad_floor
        self.terminal_radius = field_.terminal_radius
        usable = field_.usable
        idx = np.argwhere(usable)
        self._node_points = field_.grid.lower + idx * field_.h if idx.size else np.zeros((0, sys.n))
        self._node_covectors = field_.winner_covector[usable]
        self._node_tree = spatial.cKDTree(self._node_points) if idx.size else None
        self._scale = np.power(self.terminal_radius, 1.0 - sys.weights)
        if field_.near_target_points.shape[0]:
            scaled = (field_.near_target_points - sys.target) * self._scale
            self._terminal_tree: Optional[spatial.cKDTree] = spatial.cKDTree(scaled)
        else:
            self._terminal_tree = None

    def _steer(self, at: np.ndarray, covector: np.ndarray) -> np.ndarray:
        pairing = self.sys.frame(at) @ covector
        norm = float(np.linalg.norm(pairing))
        if not np.isfinite(norm) or norm < self.grad_floor:
            return np.zeros(self.sys.m)
        return -pairing / norm

    def _terminal(self, y: np.ndarray) -> np.ndarray:
        _, i = self._terminal_tree.query((y - self.sys.target) * self._scale)
        return self._steer(self.field.near_target_points[i], self.field.near_target_covectors[i])

    def _nearest_node(self, x: np.ndarray) -> np.ndarray:
        if self._node_tree is None:
            return np.zeros(self.sys.m)
        _, i = self._node_tree.query(x)
        return self._steer(x, self._node_covectors[i])

    def __call__(self, x: Sequence[float]) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.any(x - self.sys.target):
            return np.zeros(self.sys.m)
        quasi = float(self.sys.weighted_norm(x))
        if self._terminal_tree is not None and quasi < self.terminal_radius:
            y = self.sys.dilate(x, self.terminal_radius / quasi) if self.sys.homogeneous else x
            return self._terminal(y)
        try:
            return optimal_feedback(self.sys, self.field, x, self.grad_floor).u
        except (NoOptimalControl, Uncovered, DegenerateGradient):
            return self._nearest_node(x)
