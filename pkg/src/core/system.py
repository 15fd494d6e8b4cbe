"""
Driftless control-affine systems  x' = sum_i u_i f_i(x),  |u| <= 1.

Vector fields are plain numpy closures. Every evaluator accepts a state of
shape (n,) or a batch of shape (n, B) and returns (n,) / (n, B) for fields
and (n, n) / (n, n, B) for Jacobians, so the same closure serves single
queries and vectorized shooting.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConstraintViolation, InvalidDimension, NonFiniteField

logger = logging.getLogger(__name__)

FieldEval = Callable[[np.ndarray], np.ndarray]

DEFAULT_CONTROL_TOL = 1e-9
# rounding slack on top of the caller's tolerance
NORM_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class ControlSystem:
    """m vector fields on R^n with their Jacobians and the target point."""

    n: int
    m: int
    fields: Tuple[FieldEval, ...]
    jacobians: Tuple[FieldEval, ...]
    target: np.ndarray
    name: str = "custom"
    dilation_weights: Optional[np.ndarray] = None
    # fields homogeneous of degree -1 under the dilation about the target
    homogeneous: bool = False

    def __post_init__(self):
        if self.n <= 0 or self.m <= 0:
            raise InvalidDimension(f"n and m must be positive, got n={self.n} m={self.m}")
        if len(self.fields) != self.m or len(self.jacobians) != self.m:
            raise InvalidDimension(
                f"expected {self.m} fields and jacobians, "
                f"got {len(self.fields)} and {len(self.jacobians)}"
            )
        target = np.asarray(self.target, dtype=float).reshape(-1)
        if target.shape != (self.n,):
            raise InvalidDimension(f"target must have shape ({self.n},)", shape=target.shape)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "jacobians", tuple(self.jacobians))
        if self.dilation_weights is not None:
            weights = np.asarray(self.dilation_weights, dtype=float).reshape(-1)
            if weights.shape != (self.n,):
                raise InvalidDimension("dilation weights must have one entry per state")
            object.__setattr__(self, "dilation_weights", weights)

    @property
    def weights(self) -> np.ndarray:
        """Dilation weights, all ones when the system declares none."""
        if self.dilation_weights is None:
            return np.ones(self.n)
        return self.dilation_weights

    def frame(self, x: np.ndarray) -> np.ndarray:
        """Stacked fields F(x): shape (m, n) or (m, n, B)."""
        stacked = np.stack([np.asarray(f(x), dtype=float) for f in self.fields])
        if not np.all(np.isfinite(stacked)):
            raise NonFiniteField(f"{self.name}: field evaluator returned non-finite values")
        return stacked

    def jacobian_stack(self, x: np.ndarray) -> np.ndarray:
        """Stacked Jacobians: shape (m, n, n) or (m, n, n, B)."""
        stacked = np.stack([np.asarray(j(x), dtype=float) for j in self.jacobians])
        if not np.all(np.isfinite(stacked)):
            raise NonFiniteField(f"{self.name}: jacobian evaluator returned non-finite values")
        return stacked

    def dilate(self, x: np.ndarray, mu: float) -> np.ndarray:
        """Anisotropic dilation about the target: x̄ + mu^w (x - x̄)."""
        x = np.asarray(x, dtype=float)
        scale = np.power(mu, self.weights)
        if x.ndim == 2:
            scale = scale[:, None]
            return self.target[:, None] + scale * (x - self.target[:, None])
        return self.target + scale * (x - self.target)

    def weighted_norm(self, x: np.ndarray) -> np.ndarray:
        """Homogeneous quasi-norm max_k |x_k - x̄_k|^(1/w_k); batch axis last."""
        x = np.asarray(x, dtype=float)
        delta = np.abs(x - (self.target[:, None] if x.ndim == 2 else self.target))
        powers = 1.0 / self.weights
        if x.ndim == 2:
            powers = powers[:, None]
        return np.max(np.power(delta, powers), axis=0)


@dataclass(frozen=True)
class ControlVector:
    u: np.ndarray
    admissible: bool = True

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.u))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.u, dtype=dtype)


ControlLike = Union[ControlVector, Sequence[float], np.ndarray]


def _as_control(u: ControlLike) -> np.ndarray:
    if isinstance(u, ControlVector):
        return np.asarray(u.u, dtype=float)
    return np.asarray(u, dtype=float)


def eval_dynamics(sys: ControlSystem, x: np.ndarray, u: ControlLike) -> np.ndarray:
    """f(x, u) = sum_i u_i f_i(x)."""
    x = np.asarray(x, dtype=float)
    u_arr = _as_control(u)
    if x.shape != (sys.n,):
        raise InvalidDimension(f"state must have shape ({sys.n},), got {x.shape}")
    if u_arr.shape != (sys.m,):
        raise InvalidDimension(f"control must have shape ({sys.m},), got {u_arr.shape}")
    return u_arr @ sys.frame(x)


def validate_control(u: Sequence[float], tol: float = DEFAULT_CONTROL_TOL) -> ControlVector:
    """Admit u when |u| <= 1 + tol, renormalizing values just above 1."""
    if tol < 0:
        raise ValueError(f"tol must be nonnegative, got {tol}")
    u_arr = np.array(u, dtype=float).reshape(-1)
    norm = float(np.linalg.norm(u_arr))
    if norm > 1.0 + tol + NORM_SLACK:
        raise ConstraintViolation(f"|u| = {norm:.6g} exceeds 1 + {tol:g}", u=u_arr, norm=norm)
    if norm > 1.0:
        u_arr = u_arr / norm
    return ControlVector(u_arr, admissible=True)


# ----- reference instances -----

def _zeros_like_state(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(x, dtype=float)[0])


def _jacobian_with(x: np.ndarray, row: int, col: int, value: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros((3, 3) + x.shape[1:])
    out[row, col] = value
    return out


def _at_origin(target: Optional[Sequence[float]]) -> bool:
    return target is None or not np.any(np.asarray(target, dtype=float))


def brockett_system(target: Optional[Sequence[float]] = None) -> ControlSystem:
    """f1 = (1, 0, x2), f2 = (0, 1, -x1)."""

    def f1(x):
        zero = _zeros_like_state(x)
        return np.stack([zero + 1.0, zero, np.asarray(x, dtype=float)[1] + zero])

    def f2(x):
        zero = _zeros_like_state(x)
        return np.stack([zero, zero + 1.0, -np.asarray(x, dtype=float)[0] + zero])

    return ControlSystem(
        n=3,
        m=2,
        fields=(f1, f2),
        jacobians=(
            lambda x: _jacobian_with(x, 2, 1, 1.0),
            lambda x: _jacobian_with(x, 2, 0, -1.0),
        ),
        target=np.zeros(3) if target is None else np.asarray(target, dtype=float),
        name="brockett",
        dilation_weights=np.array([1.0, 1.0, 2.0]),
        homogeneous=_at_origin(target),
    )


def heisenberg_system(target: Optional[Sequence[float]] = None) -> ControlSystem:
    """Symmetric normal form f1 = (1, 0, -x2/2), f2 = (0, 1, x1/2)."""

    def f1(x):
        zero = _zeros_like_state(x)
        return np.stack([zero + 1.0, zero, -0.5 * np.asarray(x, dtype=float)[1] + zero])

    def f2(x):
        zero = _zeros_like_state(x)
        return np.stack([zero, zero + 1.0, 0.5 * np.asarray(x, dtype=float)[0] + zero])

    return ControlSystem(
        n=3,
        m=2,
        fields=(f1, f2),
        jacobians=(
            lambda x: _jacobian_with(x, 2, 1, -0.5),
            lambda x: _jacobian_with(x, 2, 0, 0.5),
        ),
        target=np.zeros(3) if target is None else np.asarray(target, dtype=float),
        name="heisenberg",
        dilation_weights=np.array([1.0, 1.0, 2.0]),
        homogeneous=_at_origin(target),
    )


SYSTEMS = {
    "brockett": brockett_system,
    "heisenberg": heisenberg_system,
}


def system_by_name(name: str) -> ControlSystem:
    factory = SYSTEMS.get(name)
    if factory is None:
        raise ValueError(f"Unknown system: {name} (known: {', '.join(sorted(SYSTEMS))})")
    return factory()


def jacobian_defect(
    sys: ControlSystem,
    probes: int = 100,
    radius: float = 2.0,
    step: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative gap between jacobians and central differences of fields."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    eye = np.eye(sys.n)
    for x in rng.uniform(-radius, radius, size=(probes, sys.n)):
        analytic = sys.jacobian_stack(x)
        numeric = np.empty_like(analytic)
        for k in range(sys.n):
            forward = sys.frame(x + step * eye[k])
            backward = sys.frame(x - step * eye[k])
            numeric[:, :, k] = (forward - backward) / (2.0 * step)
        scale = max(1.0, float(np.max(np.abs(analytic))))
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / scale)
    logger.debug(f"{sys.name}: jacobian defect {worst:.3e} over {probes} probes")
    return worst
