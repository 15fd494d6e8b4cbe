"""
Normal extremals of the reduced Hamiltonian H1(x, p) = |F(x)^T p|.

Shooting is batched: a batch of B arcs is one solve_ivp call whose state
stacks, per arc, x, p and the n-1 variational columns (dx; dp) seeded with
the slice tangent. Variational right-hand sides are directional central
differences of the batched Hamiltonian vector field, so only first
derivatives of the fields are ever required.

J(t) = [x'(t) | dx(t)] is the n x n sensitivity of exp(t, p0) to
(t, chart coords); its first sign change marks the first conjugate time.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, linalg, optimize

from .errors import DegenerateCovector, IntegrationFailure, InvalidDimension, OffSlice
from .system import ControlSystem, ControlVector

logger = logging.getLogger(__name__)

SLICE_TOL = 1e-10
ON_SLICE_TOL = 1e-8
CONJUGATE_XTOL = 1e-8


@dataclass(frozen=True)
class IntegratorOptions:
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    max_step: float = np.inf
    h1_tol: float = 1e-6
    sample_stride: float = 1e-2
    h1_floor: float = 1e-8
    method: str = "DOP853"
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("integrator tolerances must be positive")
        if self.sample_stride <= 0:
            raise ValueError("sample_stride must be positive")
        if self.h1_tol <= 0 or self.h1_floor <= 0:
            raise ValueError("h1_tol and h1_floor must be positive")

    def to_dict(self) -> dict:
        return {
            "abs_tol": self.abs_tol,
            "rel_tol": self.rel_tol,
            "max_step": None if np.isinf(self.max_step) else self.max_step,
            "h1_tol": self.h1_tol,
            "sample_stride": self.sample_stride,
            "h1_floor": self.h1_floor,
            "method": self.method,
        }


DEFAULT_OPTIONS = IntegratorOptions()


# ----- Hamiltonian -----

def _check_pair(sys: ControlSystem, x, p) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if x.shape != (sys.n,) or p.shape != (sys.n,):
        raise InvalidDimension(
            f"state and covector must have shape ({sys.n},), got {x.shape} and {p.shape}"
        )
    return x, p


def hamiltonian_h1(sys: ControlSystem, x: np.ndarray, p: np.ndarray) -> float:
    """sqrt(sum_i <p, f_i(x)>^2)."""
    x, p = _check_pair(sys, x, p)
    return float(np.linalg.norm(sys.frame(x) @ p))


def extremal_control(
    sys: ControlSystem, x: np.ndarray, p: np.ndarray, h1_floor: float = DEFAULT_OPTIONS.h1_floor
) -> ControlVector:
    x, p = _check_pair(sys, x, p)
    pairing = sys.frame(x) @ p
    h1 = float(np.linalg.norm(pairing))
    if h1 <= h1_floor:
        raise DegenerateCovector(f"H1 = {h1:.3e} at or below floor {h1_floor:g}", x=x, p=p)
    return ControlVector(pairing / h1, admissible=True)


def _hamiltonian_field(
    sys: ControlSystem, X: np.ndarray, P: np.ndarray, h1_floor: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched (x', p', H1) for X, P of shape (n, B)."""
    F = sys.frame(X)                      # (m, n, B)
    pairing = np.einsum("inb,nb->ib", F, P)
    h1 = np.sqrt(np.sum(pairing * pairing, axis=0))
    u = pairing / np.maximum(h1, h1_floor)
    x_dot = np.einsum("inb,ib->nb", F, u)
    jac = sys.jacobian_stack(X)           # (m, n, n, B)
    p_dot = -np.einsum("ib,ijkb,jb->kb", u, jac, P)
    return x_dot, p_dot, h1


def extremal_rhs(
    sys: ControlSystem, x: np.ndarray, p: np.ndarray, h1_floor: float = DEFAULT_OPTIONS.h1_floor
) -> Tuple[np.ndarray, np.ndarray]:
    """x' = dH1/dp, p' = -dH1/dx."""
    x, p = _check_pair(sys, x, p)
    x_dot, p_dot, h1 = _hamiltonian_field(sys, x[:, None], p[:, None], h1_floor)
    if h1[0] <= h1_floor:
        raise DegenerateCovector(f"H1 = {h1[0]:.3e} at or below floor {h1_floor:g}", x=x, p=p)
    return x_dot[:, 0], p_dot[:, 0]


# ----- normalization slice -----

def _sphere_point(angles: np.ndarray) -> np.ndarray:
    """Hyperspherical angles (..., m-1) -> unit vectors (..., m)."""
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    m = angles.shape[-1] + 1
    out = np.empty(angles.shape[:-1] + (m,))
    running = np.ones(angles.shape[:-1])
    for k in range(m - 1):
        out[..., k] = running * np.cos(angles[..., k])
        running = running * np.sin(angles[..., k])
    out[..., m - 1] = running
    return out


def _sphere_tangent(angles: np.ndarray) -> np.ndarray:
    """d(sphere point)/d(angles): (m, m-1) for a single angle vector."""
    angles = np.asarray(angles, dtype=float).reshape(-1)
    m = angles.size + 1
    jac = np.zeros((m, m - 1))
    for i in range(m - 1):
        running = 1.0
        derivative = 0.0
        for k in range(m - 1):
            if k < i:
                running *= np.sin(angles[k])
            elif k == i:
                jac[k, i] = -running * np.sin(angles[k])
                derivative = running * np.cos(angles[k])
            else:
                jac[k, i] = derivative * np.cos(angles[k])
                derivative *= np.sin(angles[k])
        jac[m - 1, i] = derivative
    return jac


def _sphere_angles(direction: np.ndarray) -> np.ndarray:
    direction = np.asarray(direction, dtype=float)
    m = direction.size
    angles = np.empty(m - 1)
    for k in range(m - 2):
        angles[k] = np.arctan2(np.linalg.norm(direction[k + 1:]), direction[k])
    angles[m - 2] = np.arctan2(direction[m - 1], direction[m - 2])
    return angles


class CovectorSlice:
    """
    Chart of {p0 : H1(x̄, p0) = 1} by m-1 angles and n-m transverse values.

    p0 = P a(angles) + N z, where P is the right pseudo-inverse of F(x̄)^T and
    the columns of N span its kernel (each column signed so that its largest
    component is positive). For Brockett this is (θ, λ) -> (cos θ, sin θ, λ).
    """

    def __init__(self, sys: ControlSystem):
        if sys.m < 2:
            raise InvalidDimension("slice chart needs at least two control fields")
        self.sys = sys
        frame = sys.frame(sys.target).T    # (n, m)
        gram = frame.T @ frame
        if np.linalg.matrix_rank(gram) < sys.m:
            raise DegenerateCovector("control fields are dependent at the target")
        self.frame = frame
        self.pseudo_inverse = frame @ np.linalg.inv(gram)
        kernel = linalg.null_space(frame.T)
        for j in range(kernel.shape[1]):
            if kernel[np.argmax(np.abs(kernel[:, j])), j] < 0:
                kernel[:, j] = -kernel[:, j]
        self.kernel = kernel
        self.n_angles = sys.m - 1
        self.dim = sys.n - 1

    def to_covector(self, coords: np.ndarray) -> np.ndarray:
        """Chart coords (..., n-1) -> covectors (..., n)."""
        coords = np.asarray(coords, dtype=float)
        direction = _sphere_point(coords[..., : self.n_angles])
        p0 = direction @ self.pseudo_inverse.T
        if self.kernel.shape[1]:
            p0 = p0 + coords[..., self.n_angles:] @ self.kernel.T
        return p0

    def tangent(self, coords: np.ndarray) -> np.ndarray:
        """d p0 / d coords, shape (n, n-1)."""
        coords = np.asarray(coords, dtype=float).reshape(-1)
        angle_part = self.pseudo_inverse @ _sphere_tangent(coords[: self.n_angles])
        return np.hstack([angle_part, self.kernel])

    def from_covector(self, p0: np.ndarray) -> np.ndarray:
        p0 = np.asarray(p0, dtype=float).reshape(-1)
        direction = self.frame.T @ p0
        return np.concatenate([_sphere_angles(direction), self.kernel.T @ p0])

    def defect(self, p0: np.ndarray) -> float:
        """|H1(x̄, p0) - 1|."""
        return abs(hamiltonian_h1(self.sys, self.sys.target, p0) - 1.0)

    def require(self, p0: np.ndarray) -> np.ndarray:
        p0 = np.asarray(p0, dtype=float).reshape(-1)
        if p0.shape != (self.sys.n,):
            raise InvalidDimension(f"covector must have shape ({self.sys.n},)")
        defect = self.defect(p0)
        if defect > ON_SLICE_TOL:
            raise OffSlice(f"p0 is off the normalization slice (|H1 - 1| = {defect:.3e})", p0=p0)
        return self.from_covector(p0)


# ----- arcs -----

@dataclass
class ExtremalArc:
    t: np.ndarray            # (K,)
    x: np.ndarray            # (K, n)
    p: np.ndarray            # (K, n)
    jacobian: np.ndarray     # (K, n, n), columns [x' | dx]
    variations: np.ndarray   # (K, 2n, n-1), stacked (dx; dp)
    h1: np.ndarray           # (K,)
    p0: np.ndarray
    coords: np.ndarray

    @property
    def determinants(self) -> np.ndarray:
        return np.linalg.det(self.jacobian)

    @property
    def max_h1_drift(self) -> float:
        return float(np.max(np.abs(self.h1 - 1.0))) if self.h1.size else 0.0

    def initial_rank(self) -> int:
        """Rank of the stacked Jacobi data at t = 0 (state and covector parts)."""
        n = self.x.shape[1]
        x_dot0 = self.jacobian[0][:, 0]
        p_dot0 = np.zeros(n)
        stacked = np.hstack([np.concatenate([x_dot0, p_dot0])[:, None], self.variations[0]])
        return int(np.linalg.matrix_rank(stacked))

    def controls(self, sys: ControlSystem) -> np.ndarray:
        """Extremal controls along the samples, shape (K, m)."""
        F = sys.frame(self.x.T)
        pairing = np.einsum("inb,nb->bi", F, self.p.T)
        return pairing / np.linalg.norm(pairing, axis=1, keepdims=True)


def sample_times(t_max: float, stride: float) -> np.ndarray:
    count = int(np.floor(t_max / stride + 1e-9))
    times = stride * np.arange(count + 1)
    if t_max - times[-1] > 1e-12:
        times = np.append(times, t_max)
    return times


class _BatchShooter:
    """Packs B arcs into one flat solve_ivp state."""

    def __init__(self, sys: ControlSystem, opts: IntegratorOptions, batch: int):
        self.sys = sys
        self.opts = opts
        self.batch = batch
        self.k = sys.n - 1
        self.width = 2 * sys.n + 2 * sys.n * self.k

    def pack(self, p0: np.ndarray, tangents: np.ndarray) -> np.ndarray:
        n, B = self.sys.n, self.batch
        Y = np.zeros((self.width, B))
        Y[:n] = self.sys.target[:, None]
        Y[n: 2 * n] = p0.T
        V = np.zeros((2 * n, self.k, B))
        V[n:] = np.transpose(tangents, (1, 2, 0))
        Y[2 * n:] = V.reshape(2 * n * self.k, B)
        return Y.reshape(-1)

    def unpack(self, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.sys.n
        return Y[:n], Y[n: 2 * n], Y[2 * n:].reshape(2 * n, self.k, Y.shape[-1])

    def rhs(self, _t: float, y: np.ndarray) -> np.ndarray:
        n, B, k = self.sys.n, self.batch, self.k
        Y = y.reshape(self.width, B)
        X, P, V = self.unpack(Y)
        x_dot, p_dot, _ = _hamiltonian_field(self.sys, X, P, self.opts.h1_floor)

        # directional central differences for all k columns in one call
        Z = np.concatenate([X, P])                        # (2n, B)
        scale = np.linalg.norm(V, axis=0)                 # (k, B)
        step = self.opts.fd_step * np.maximum(1.0, np.linalg.norm(Z, axis=0))[None, :]
        step = step / np.maximum(scale, 1e-300)
        shift = V * step[None, :, :]                      # (2n, k, B)
        plus = (Z[:, None, :] + shift).reshape(2 * n, k * B)
        minus = (Z[:, None, :] - shift).reshape(2 * n, k * B)
        both = np.concatenate([plus, minus], axis=1)
        xd, pd, _ = _hamiltonian_field(self.sys, both[:n], both[n:], self.opts.h1_floor)
        dz = np.concatenate([xd, pd])
        half = k * B
        V_dot = (dz[:, :half] - dz[:, half:]).reshape(2 * n, k, B) / (2.0 * step[None, :, :])

        out = np.empty((self.width, B))
        out[:n] = x_dot
        out[n: 2 * n] = p_dot
        out[2 * n:] = V_dot.reshape(2 * n * k, B)
        return out.reshape(-1)

    def arcs(self, times: np.ndarray, Ys: np.ndarray, p0: np.ndarray, coords: np.ndarray) -> List[ExtremalArc]:
        """Ys: (width*B, K) from solve_ivp."""
        n, B = self.sys.n, self.batch
        K = times.size
        Y = Ys.reshape(self.width, B, K)
        X = Y[:n]                                          # (n, B, K)
        P = Y[n: 2 * n]
        V = Y[2 * n:].reshape(2 * n, self.k, B, K)
        flat_x = X.reshape(n, B * K)
        flat_p = P.reshape(n, B * K)
        x_dot, _, h1 = _hamiltonian_field(self.sys, flat_x, flat_p, self.opts.h1_floor)
        x_dot = x_dot.reshape(n, B, K)
        h1 = h1.reshape(B, K)
        out = []
        for b in range(B):
            variations = np.transpose(V[:, :, b, :], (2, 0, 1))            # (K, 2n, k)
            jac = np.concatenate([x_dot[:, b, :].T[:, :, None], variations[:, :n, :]], axis=2)
            out.append(
                ExtremalArc(
                    t=times.copy(),
                    x=X[:, b, :].T.copy(),
                    p=P[:, b, :].T.copy(),
                    jacobian=jac,
                    variations=variations.copy(),
                    h1=h1[b].copy(),
                    p0=p0[b].copy(),
                    coords=coords[b].copy(),
                )
            )
        return out


def _solve(shooter: _BatchShooter, y0: np.ndarray, times: np.ndarray, dense: bool):
    opts = shooter.opts
    # RMS error control over B arcs: tighten so each arc keeps single-arc accuracy
    shrink = np.sqrt(shooter.batch)
    return integrate.solve_ivp(
        shooter.rhs,
        (0.0, float(times[-1])),
        y0,
        method=opts.method,
        t_eval=times,
        rtol=opts.rel_tol / shrink,
        atol=opts.abs_tol / shrink,
        max_step=opts.max_step,
        dense_output=dense,
    )


def shoot_batch(
    sys: ControlSystem,
    chart: CovectorSlice,
    coords: np.ndarray,
    t_max: float,
    opts: IntegratorOptions = DEFAULT_OPTIONS,
) -> List[Union[ExtremalArc, IntegrationFailure]]:
    """
    Shoot every chart point to t_max in one vectorized solve.

    A failed batch is retried arc by arc so one bad covector cannot take
    its neighbours down. Per-arc H1 drift beyond h1_tol is a failure.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if coords.shape[0] == 0:
        return []
    times = sample_times(t_max, opts.sample_stride)
    p0 = chart.to_covector(coords)
    tangents = np.stack([chart.tangent(c) for c in coords])
    shooter = _BatchShooter(sys, opts, coords.shape[0])
    try:
        sol = _solve(shooter, shooter.pack(p0, tangents), times, dense=False)
        ok = sol.success and sol.y.shape[1] == times.size
    except (FloatingPointError, ValueError) as exc:
        logger.debug(f"batch of {coords.shape[0]} raised {exc}")
        ok = False
    if not ok:
        if coords.shape[0] == 1:
            return [IntegrationFailure("solver failed", coords=coords[0])]
        logger.debug(f"batch of {coords.shape[0]} failed, retrying arc by arc")
        results: List[Union[ExtremalArc, IntegrationFailure]] = []
        for c in coords:
            results.extend(shoot_batch(sys, chart, c[None, :], t_max, opts))
        return results
    results = []
    for arc in shooter.arcs(times, sol.y, p0, coords):
        drift = arc.max_h1_drift
        if drift > opts.h1_tol:
            results.append(IntegrationFailure(f"H1 drift {drift:.3e} exceeds tolerance", coords=arc.coords))
        else:
            results.append(arc)
    return results


def _shoot_dense(sys: ControlSystem, p0: np.ndarray, t: float, opts: IntegratorOptions):
    chart = CovectorSlice(sys)
    coords = chart.require(p0)
    times = sample_times(t, opts.sample_stride)
    shooter = _BatchShooter(sys, opts, 1)
    p0 = np.asarray(p0, dtype=float).reshape(1, -1)
    sol = _solve(shooter, shooter.pack(p0, chart.tangent(coords)[None]), times, dense=True)
    if not sol.success or sol.y.shape[1] != times.size:
        raise IntegrationFailure(f"solver failed: {sol.message}", p0=p0[0])
    arc = shooter.arcs(times, sol.y, p0, coords[None, :])[0]
    drift = arc.max_h1_drift
    if drift > opts.h1_tol:
        raise IntegrationFailure(f"H1 drift {drift:.3e} exceeds tolerance {opts.h1_tol:g}", p0=p0[0])
    return arc, sol, shooter


def exponential_map(
    sys: ControlSystem,
    p0: np.ndarray,
    t: float,
    opts: IntegratorOptions = DEFAULT_OPTIONS,
) -> Tuple[np.ndarray, np.ndarray, ExtremalArc]:
    """Endpoint and covector of the normal extremal from (x̄, p0) at time t."""
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    p0 = np.asarray(p0, dtype=float).reshape(-1)
    if t == 0:
        chart = CovectorSlice(sys)
        coords = chart.require(p0)
        n = sys.n
        x_dot0, _, h1 = _hamiltonian_field(sys, sys.target[:, None], p0[:, None], opts.h1_floor)
        variations = np.zeros((1, 2 * n, n - 1))
        variations[0, n:] = chart.tangent(coords)
        jac = np.concatenate([x_dot0.T[:, :, None], variations[:, :n, :]], axis=2)
        arc = ExtremalArc(
            t=np.zeros(1), x=sys.target[None, :].copy(), p=p0[None, :].copy(),
            jacobian=jac, variations=variations, h1=h1.copy(), p0=p0.copy(), coords=coords,
        )
        return sys.target.copy(), p0.copy(), arc
    arc, _, _ = _shoot_dense(sys, p0, t, opts)
    return arc.x[-1].copy(), arc.p[-1].copy(), arc


def first_sign_change(values: np.ndarray, start: int = 1) -> Optional[int]:
    """Index k >= start+1 where values[k] has left the sign of values[start]."""
    values = np.asarray(values, dtype=float)
    if values.size <= start:
        return None
    reference = np.sign(values[start])
    if reference == 0:
        return start
    crossed = np.nonzero(np.sign(values[start + 1:]) != reference)[0]
    if crossed.size == 0:
        return None
    return int(start + 1 + crossed[0])


def conjugate_time(
    sys: ControlSystem,
    p0: np.ndarray,
    t_max: float,
    opts: IntegratorOptions = DEFAULT_OPTIONS,
) -> Optional[float]:
    """First t in (0, t_max] where det J changes sign, refined by bisection."""
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    arc, sol, shooter = _shoot_dense(sys, p0, t_max, opts)
    dets = arc.determinants
    k = first_sign_change(dets)
    if k is None:
        return None
    if dets[k] == 0.0:
        return float(arc.t[k])

    n = sys.n

    def det_at(t: float) -> float:
        X, P, V = shooter.unpack(sol.sol(t).reshape(shooter.width, 1))
        x_dot, _, _ = _hamiltonian_field(sys, X, P, opts.h1_floor)
        return float(np.linalg.det(np.hstack([x_dot, V[:n, :, 0]])))

    root = optimize.bisect(det_at, float(arc.t[k - 1]), float(arc.t[k]), xtol=CONJUGATE_XTOL)
    logger.debug(f"conjugate time {root:.9f} for p0={np.round(arc.p0, 6).tolist()}")
    return float(root)
