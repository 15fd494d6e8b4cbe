"""
Hybrid feedback (C, D, k, k_d) and its solutions under bounded noise.

A run alternates flow steps of x' = f(x, k(x + e, s)) + d with jump chains
on the label s. Membership is always tested on the measured state x + e.
When both the flow and the jump set are active the executor jumps; a jump
whose only target is the current label is disabled.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BlowUp, InstantZeno, JumpTargetUndefined, QmtError, StuckState
from .flow import EVENT_XTOL, locate_event, next_grid_time, rk4_step
from .noise import ZERO_NOISE, NoiseModel, NoiseSignal
from .system import ControlSystem

logger = logging.getLogger(__name__)

OMEGA = -1

KIND_START = 0
KIND_FLOW = 1
KIND_JUMP = 2
KIND_NAMES = {KIND_START: "start", KIND_FLOW: "flow", KIND_JUMP: "jump"}

DEFAULT_FLOW_STEP = 5e-3
DEFAULT_N_MAX = 8
DEFAULT_BLOW_UP_BOUND = 1e6
DEFAULT_STOP_RADIUS = 1e-3
DEFAULT_CERT_TOL = 1e-6


def label_name(label: int) -> str:
    return "omega" if label == OMEGA else f"patch:{label}"


def parse_label(text: str) -> int:
    text = text.strip().lower()
    if text in ("omega", "w", "ω"):
        return OMEGA
    if text.startswith("patch:"):
        text = text[len("patch:"):]
    return int(text)


@dataclass(eq=False)
class HybridFeedback:
    """
    The 4-tuple plus its label set.

    jump_map returns the k_d targets in preference order (ω first, then by
    label); an empty list at a point of D means k_d is undefined there.
    """

    sys: ControlSystem
    labels: Tuple[int, ...]
    flow_set: Callable[[np.ndarray, int], bool]
    jump_set: Callable[[np.ndarray, int], bool]
    control: Callable[[np.ndarray, int], np.ndarray]
    jump_map: Callable[[np.ndarray, int], List[int]]
    omega: int = OMEGA
    mode: str = "corrected"
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def target(self) -> np.ndarray:
        return self.sys.target

    def jump_enabled(self, x: np.ndarray, s: int) -> bool:
        if not self.jump_set(x, s):
            return False
        return any(t != s for t in self.jump_map(x, s))

    def select_jump(self, x: np.ndarray, s: int) -> int:
        """Preferred k_d target; s itself when only the same label applies."""
        targets = self.jump_map(x, s)
        if not targets:
            raise JumpTargetUndefined(
                f"no jump target for label {label_name(s)} at {np.round(x, 6).tolist()}",
                point=x,
                label=s,
            )
        for t in targets:
            if t != s:
                return t
        return s


@dataclass
class JumpRecord:
    time: float
    j: int                 # jump counter before the chain
    from_label: int
    to_label: int
    chain: List[int]       # labels visited, from_label first
    x: np.ndarray
    e: np.ndarray

    @property
    def chain_length(self) -> int:
        return len(self.chain) - 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "time": self.time,
            "j": self.j,
            "from_label": self.from_label,
            "to_label": self.to_label,
            "chain": list(self.chain),
            "x": np.asarray(self.x).tolist(),
            "e": np.asarray(self.e).tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "JumpRecord":
        return cls(
            time=float(data["time"]),
            j=int(data["j"]),
            from_label=int(data["from_label"]),
            to_label=int(data["to_label"]),
            chain=[int(v) for v in data["chain"]],
            x=np.asarray(data["x"], dtype=float),
            e=np.asarray(data["e"], dtype=float),
        )


@dataclass
class HybridTimeDomain:
    intervals: List[Tuple[float, float, int]]   # (t_j, t_{j+1}, j)

    def abuts(self) -> bool:
        for (a0, b0, j0), (a1, b1, j1) in zip(self.intervals, self.intervals[1:]):
            if b0 != a1 or j1 != j0 + 1:
                return False
        return all(a <= b for a, b, _ in self.intervals)


@dataclass(eq=False)
class HybridArc:
    t: np.ndarray
    j: np.ndarray
    x: np.ndarray
    s: np.ndarray
    u: np.ndarray
    e: np.ndarray
    d: np.ndarray
    xdot: np.ndarray
    in_C: np.ndarray
    in_D: np.ndarray
    kind: np.ndarray
    jumps: List[JumpRecord]
    status: str
    arrival_time: Optional[float]
    target: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.t.size)

    @property
    def positive_jump_times(self) -> List[float]:
        return [r.time for r in self.jumps if r.time > 0.0]

    @property
    def max_chain_length(self) -> int:
        return max((r.chain_length for r in self.jumps), default=0)

    @property
    def max_excursion(self) -> float:
        if not len(self):
            return 0.0
        return float(np.max(np.linalg.norm(self.x - self.target, axis=1)))

    @property
    def final_time(self) -> float:
        return float(self.t[-1]) if len(self) else 0.0

    def domain(self) -> HybridTimeDomain:
        intervals = []
        for jj in np.unique(self.j):
            times = self.t[self.j == jj]
            intervals.append((float(times[0]), float(times[-1]), int(jj)))
        return HybridTimeDomain(intervals)

    def first_time_in(self, label: int) -> Optional[float]:
        hits = np.nonzero((self.s == label) & self.in_C)[0]
        return float(self.t[hits[0]]) if hits.size else None


class _Recorder:
    def __init__(self, n: int, m: int):
        self.rows: Dict[str, List[Any]] = {
            k: [] for k in ("t", "j", "x", "s", "u", "e", "d", "xdot", "in_C", "in_D", "kind")
        }
        self.n = n
        self.m = m

    def add(self, **row: Any) -> None:
        for key, value in row.items():
            self.rows[key].append(value)

    def build(self, jumps, status, arrival, target, meta) -> HybridArc:
        r = self.rows
        return HybridArc(
            t=np.asarray(r["t"], dtype=float),
            j=np.asarray(r["j"], dtype=np.int64),
            x=np.asarray(r["x"], dtype=float).reshape(-1, self.n),
            s=np.asarray(r["s"], dtype=np.int64),
            u=np.asarray(r["u"], dtype=float).reshape(-1, self.m),
            e=np.asarray(r["e"], dtype=float).reshape(-1, self.n),
            d=np.asarray(r["d"], dtype=float).reshape(-1, self.n),
            xdot=np.asarray(r["xdot"], dtype=float).reshape(-1, self.n),
            in_C=np.asarray(r["in_C"], dtype=bool),
            in_D=np.asarray(r["in_D"], dtype=bool),
            kind=np.asarray(r["kind"], dtype=np.int8),
            jumps=list(jumps),
            status=status,
            arrival_time=arrival,
            target=target.copy(),
            meta=meta,
        )


def jump_chain(H: HybridFeedback, x: np.ndarray, s: int, e_sample: np.ndarray, n_max: int = DEFAULT_N_MAX) -> List[int]:
    """Labels visited while the jump set stays active and the label changes."""
    xm = np.asarray(x, dtype=float) + np.asarray(e_sample, dtype=float)
    chain = [s]
    while H.jump_set(xm, chain[-1]):
        if len(chain) > 1 and not H.jump_map(xm, chain[-1]):
            # k_d undefined at an intermediate label: the chain ends and the label flows
            break
        nxt = H.select_jump(xm, chain[-1])
        if nxt == chain[-1]:
            break
        chain.append(nxt)
        if len(chain) - 1 >= n_max:
            if H.jump_enabled(xm, chain[-1]):
                raise InstantZeno(
                    f"jump chain reached n_max={n_max} with a switch still enabled",
                    chain=list(chain),
                    point=xm,
                )
            break
    return chain


def resolve_jump_chain(
    H: HybridFeedback, x: np.ndarray, s: int, e_sample: np.ndarray, n_max: int = DEFAULT_N_MAX
) -> Tuple[int, int]:
    """(final label, chain length n_j)."""
    chain = jump_chain(H, x, s, e_sample, n_max)
    return chain[-1], len(chain) - 1


@dataclass(frozen=True)
class ExecutionOptions:
    flow_step: float = DEFAULT_FLOW_STEP
    n_max: int = DEFAULT_N_MAX
    blow_up_bound: float = DEFAULT_BLOW_UP_BOUND
    event_xtol: float = EVENT_XTOL

    def __post_init__(self):
        if self.flow_step <= 0:
            raise ValueError("flow_step must be positive")
        if self.n_max < 1:
            raise ValueError("n_max must be at least 1")


DEFAULT_EXECUTION = ExecutionOptions()


class _Dynamics:
    """Closed-loop right-hand side with the noise of one run."""

    def __init__(self, H: HybridFeedback, signal: NoiseSignal):
        self.H = H
        self.sys = H.sys
        self.signal = signal
        self.hold_time = 0.0

    def terms(self, t: float, x: np.ndarray, s: int):
        e, d, a = self.signal.at(t, x)
        F = self.sys.frame(x)
        u = np.asarray(self.H.control(x + e, s), dtype=float)
        d_total = d + a @ F if np.any(a) else d
        return u, e, d_total, u @ F + d_total

    def rhs(self, s: int):
        return lambda t, x: self.terms(t, x, s)[3]


def execute_hybrid(
    sys: ControlSystem,
    H: HybridFeedback,
    x0: Sequence[float],
    s0: int,
    noise: NoiseModel = ZERO_NOISE,
    horizon: float = 10.0,
    stop_radius: float = DEFAULT_STOP_RADIUS,
    opts: ExecutionOptions = DEFAULT_EXECUTION,
) -> HybridArc:
    """
    One deterministic hybrid run.

    Terminates at the horizon or on arrival in the stop ball (a zero
    stop radius disables arrival stops). Errors carry the partial arc as
    the attribute partial_arc.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if stop_radius < 0:
        raise ValueError(f"stop_radius must be nonnegative, got {stop_radius}")
    if s0 not in H.labels:
        raise ValueError(f"unknown label {s0}")
    x = np.asarray(x0, dtype=float).copy()
    s = int(s0)
    t = 0.0
    j = 0
    target = sys.target
    dyn = _Dynamics(H, noise.signal(sys.m))
    rec = _Recorder(sys.n, sys.m)
    jumps: List[JumpRecord] = []
    arrival: Optional[float] = None
    meta = {"noise": noise.to_dict(), "horizon": horizon, "stop_radius": stop_radius, "s0": s0}

    def record(kind: int) -> None:
        u, e, d, xdot = dyn.terms(t, x, s)
        xm = x + e
        rec.add(
            t=t, j=j, x=x.copy(), s=s, u=u, e=e, d=d, xdot=xdot,
            in_C=bool(H.flow_set(xm, s)), in_D=bool(H.jump_set(xm, s)), kind=kind,
        )

    def arrived(y: np.ndarray) -> bool:
        return stop_radius > 0 and float(np.linalg.norm(y - target)) <= stop_radius

    status = "horizon"
    try:
        record(KIND_START)
        if float(np.linalg.norm(x - target)) <= stop_radius:
            arrival = 0.0
        while True:
            if arrived(x):
                status = "arrived"
                break
            if t >= horizon - 1e-12:
                break
            e, _, _ = dyn.signal.at(t, x)
            xm = x + e
            if H.jump_enabled(xm, s):
                chain = jump_chain(H, x, s, e, opts.n_max)
                jumps.append(JumpRecord(t, j, s, chain[-1], chain, x.copy(), e.copy()))
                logger.debug(f"jump at t={t:.6f}: {' -> '.join(label_name(c) for c in chain)}")
                j += 1
                s = chain[-1]
                record(KIND_JUMP)
                continue
            if not H.flow_set(xm, s):
                if H.jump_set(xm, s) and not H.jump_map(xm, s):
                    H.select_jump(xm, s)
                raise StuckState(
                    f"label {label_name(s)} can neither flow nor jump at t={t:.6g}",
                    point=x.copy(),
                    label=s,
                    t=t,
                )
            step_start = t

            def changed(y: np.ndarray) -> bool:
                ey, _, _ = dyn.signal.at(step_start, y)
                ym = y + ey
                return arrived(y) or H.jump_enabled(ym, s) or not H.flow_set(ym, s)

            t_next = next_grid_time(t, opts.flow_step, horizon)
            rhs = dyn.rhs(s)
            y = rk4_step(rhs, t, x, t_next - t)
            if changed(y):
                dt, y = locate_event(rhs, t, x, t_next - t, changed, opts.event_xtol)
                t = t + dt
            else:
                t = t_next
            x = y
            dyn.signal.release_before(t)
            if not np.all(np.isfinite(x)) or float(np.linalg.norm(x)) > opts.blow_up_bound:
                raise BlowUp(f"|x| exceeded {opts.blow_up_bound:g} at t={t:.6g}", t=t, label=s)
            record(KIND_FLOW)
            if arrival is None and float(np.linalg.norm(x - target)) <= stop_radius:
                arrival = t
    except QmtError as exc:
        exc.partial_arc = rec.build(jumps, type(exc).__name__, arrival, target, meta)  # type: ignore[attr-defined]
        raise
    arc = rec.build(jumps, status, arrival, target, meta)
    logger.debug(
        f"run from {np.round(np.asarray(x0), 4).tolist()} ({label_name(s0)}): {status} at "
        f"t={arc.final_time:.4f}, {len(jumps)} jumps"
    )
    return arc


# ----- certificates -----

@dataclass
class Violation:
    condition: str
    index: int
    detail: str


@dataclass
class CertificateReport:
    samples: int
    flow_samples_checked: int
    jumps_checked: int
    max_derivative_residual: float
    max_step_residual: float
    violations: List[Violation] = field(default_factory=list)
    tol: float = DEFAULT_CERT_TOL

    @property
    def ok(self) -> bool:
        return not self.violations

    def counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for v in self.violations:
            out[v.condition] = out.get(v.condition, 0) + 1
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ok": self.ok,
            "samples": self.samples,
            "flow_samples_checked": self.flow_samples_checked,
            "jumps_checked": self.jumps_checked,
            "max_derivative_residual": self.max_derivative_residual,
            "max_step_residual": self.max_step_residual,
            "tol": self.tol,
            "violations": self.counts(),
        }

    def to_text(self) -> str:
        lines = [
            f"certificate: {'PASS' if self.ok else 'FAIL'}",
            f"samples: {self.samples}",
            f"flow samples checked: {self.flow_samples_checked}",
            f"jumps checked: {self.jumps_checked}",
            f"max derivative residual: {self.max_derivative_residual:.3e} (tol {self.tol:.1e})",
            f"max step residual: {self.max_step_residual:.3e}",
        ]
        for condition, count in sorted(self.counts().items()):
            lines.append(f"violation {condition}: {count}")
        for v in self.violations[:20]:
            lines.append(f"  [{v.condition}] sample {v.index}: {v.detail}")
        return "\n".join(lines) + "\n"


def certify_arc(
    arc: HybridArc,
    H: HybridFeedback,
    noise_log: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    tol: float = DEFAULT_CERT_TOL,
) -> CertificateReport:
    """
    Re-check a stored arc against the solution conditions.

    flow: (x+e, s) in C at flow samples strictly inside their interval;
    derivative: stored x' equals f(x, k(x+e, s)) + d recomputed;
    jump: every chain link has (x+e, s_i) in D and s_{i+1} in k_d;
    continuity: x unchanged across jumps; label: s constant between jumps
    and equal to the logged jump target; domain: intervals abut.
    """
    sys = H.sys
    e_log, d_log = noise_log if noise_log is not None else (arc.e, arc.d)
    violations: List[Violation] = []
    K = len(arc)
    max_deriv = 0.0
    max_step = 0.0
    checked = 0

    for i in range(K):
        xm = arc.x[i] + e_log[i]
        s = int(arc.s[i])
        u = np.asarray(H.control(xm, s), dtype=float)
        xdot = u @ sys.frame(arc.x[i]) + d_log[i]
        residual = float(np.linalg.norm(xdot - arc.xdot[i]))
        max_deriv = max(max_deriv, residual)
        if residual > tol:
            violations.append(Violation("derivative", i, f"residual {residual:.3e}"))
        if float(np.linalg.norm(u)) > 1.0 + 1e-12:
            violations.append(Violation("constraint", i, f"|u| = {np.linalg.norm(u):.12f}"))
        if arc.kind[i] != KIND_FLOW:
            continue
        last_of_interval = i == K - 1 or arc.j[i + 1] != arc.j[i] or arc.kind[i + 1] == KIND_JUMP
        prev_ok = i > 0 and arc.j[i - 1] == arc.j[i]
        if prev_ok:
            dt = arc.t[i] - arc.t[i - 1]
            if dt > 0:
                chord = (arc.x[i] - arc.x[i - 1]) / dt
                step_res = float(np.linalg.norm(chord - 0.5 * (arc.xdot[i] + arc.xdot[i - 1])))
                max_step = max(max_step, step_res)
        if last_of_interval:
            continue
        checked += 1
        if not H.flow_set(xm, s):
            violations.append(Violation("flow", i, f"(x+e, {label_name(s)}) outside C"))

    jump_rows = np.nonzero(arc.kind == KIND_JUMP)[0]
    if len(jump_rows) != len(arc.jumps):
        violations.append(Violation("domain", -1, f"{len(jump_rows)} jump samples, {len(arc.jumps)} logged jumps"))
    for record_, row in zip(arc.jumps, jump_rows):
        xm = record_.x + record_.e
        for a, b in zip(record_.chain, record_.chain[1:]):
            if not H.jump_set(xm, a):
                violations.append(Violation("jump", int(row), f"(x+e, {label_name(a)}) outside D"))
            if b not in H.jump_map(xm, a):
                violations.append(Violation("jump", int(row), f"{label_name(b)} not in k_d at {label_name(a)}"))
        if record_.chain[0] != record_.from_label or record_.chain[-1] != record_.to_label:
            violations.append(Violation("label", int(row), "jump log chain disagrees with its endpoints"))
        if row == 0:
            violations.append(Violation("domain", int(row), "arc starts with a jump sample"))
            continue
        if not np.array_equal(arc.x[row], arc.x[row - 1]) or not np.array_equal(arc.x[row], record_.x):
            violations.append(Violation("continuity", int(row), "state changed across the jump"))
        if arc.s[row - 1] != record_.from_label or arc.s[row] != record_.to_label:
            violations.append(
                Violation(
                    "label", int(row),
                    f"labels {label_name(int(arc.s[row - 1]))} -> {label_name(int(arc.s[row]))}, "
                    f"logged {label_name(record_.from_label)} -> {label_name(record_.to_label)}",
                )
            )
        if arc.t[row] != arc.t[row - 1] or arc.t[row] != record_.time:
            violations.append(Violation("domain", int(row), "jump does not happen at a single time"))
        if arc.j[row] != arc.j[row - 1] + 1:
            violations.append(Violation("domain", int(row), "jump counter did not advance by one"))

    for i in range(1, K):
        if arc.kind[i] == KIND_JUMP:
            continue
        if arc.s[i] != arc.s[i - 1]:
            violations.append(Violation("label", i, "label changed during flow"))
        if arc.j[i] != arc.j[i - 1]:
            violations.append(Violation("domain", i, "jump counter changed during flow"))
        if arc.t[i] < arc.t[i - 1]:
            violations.append(Violation("domain", i, "time decreased"))
    if K and not arc.domain().abuts():
        violations.append(Violation("domain", -1, "time domain intervals do not abut"))

    return CertificateReport(
        samples=K,
        flow_samples_checked=checked,
        jumps_checked=len(arc.jumps),
        max_derivative_residual=max_deriv,
        max_step_residual=max_step,
        violations=violations,
        tol=tol,
    )
