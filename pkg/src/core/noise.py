"""
Bounded seeded noise: measurement error e, disturbance d, actuator error a.

Directions are drawn once per hold interval from a generator seeded by
(seed, interval index); magnitudes follow the bound at the current state,
so e(., t) and d(., t) are continuous in x and never exceed the bound.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

NOISE_MODES = ("zero", "random", "adversarial")

Bound = Callable[[np.ndarray], float]
Attractor = Callable[[np.ndarray], Optional[np.ndarray]]


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0 else np.zeros_like(v)


@dataclass(frozen=True)
class NoiseModel:
    """
    mode: zero | random | adversarial (pushes e and d toward the point
    returned by toward(x), typically the nearest singular point).
    """

    mode: str = "zero"
    scale: float = 1.0
    bound: Optional[Bound] = None
    seed: int = 0
    hold_step: float = 1e-2
    actuator_scale: float = 0.0
    toward: Optional[Attractor] = None

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValueError(f"noise mode must be one of {NOISE_MODES}, got {self.mode!r}")
        if self.scale < 0 or self.actuator_scale < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.hold_step <= 0:
            raise ValueError("hold_step must be positive")

    @property
    def silent(self) -> bool:
        return self.mode == "zero" or self.bound is None or (self.scale == 0 and self.actuator_scale == 0)

    def with_seed(self, seed: int) -> "NoiseModel":
        return NoiseModel(
            self.mode, self.scale, self.bound, seed, self.hold_step, self.actuator_scale, self.toward
        )

    def hold_index(self, t: float) -> int:
        return int(np.floor(t / self.hold_step + 1e-9))

    def directions(self, k: int, x: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, k])
        n = x.size
        e_dir = _unit(rng.normal(size=n))
        d_dir = _unit(rng.normal(size=n))
        a_dir = _unit(rng.normal(size=m))
        if self.mode == "adversarial" and self.toward is not None:
            goal = self.toward(x)
            if goal is not None:
                push = _unit(np.asarray(goal, dtype=float) - x)
                if np.any(push):
                    e_dir = d_dir = push
        return e_dir, d_dir, a_dir

    def signal(self, m: int) -> "NoiseSignal":
        return NoiseSignal(self, m)

    def to_dict(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "scale": self.scale,
            "seed": self.seed,
            "hold_step": self.hold_step,
            "actuator_scale": self.actuator_scale,
        }


ZERO_NOISE = NoiseModel()


class NoiseSignal:
    """One run's noise; held directions are cached per interval index until released."""

    def __init__(self, model: NoiseModel, m: int):
        self.model = model
        self.m = m
        self._held: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def radius(self, x: np.ndarray) -> float:
        if self.model.bound is None:
            return 0.0
        return float(self.model.bound(x))

    def release_before(self, t: float) -> None:
        """Drop held directions for intervals before the one holding t."""
        floor = self.model.hold_index(t)
        for k in [k for k in self._held if k < floor]:
            del self._held[k]

    def at(self, t: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(e, d, a) at time t and state x."""
        n = x.size
        if self.model.silent:
            return np.zeros(n), np.zeros(n), np.zeros(self.m)
        k = self.model.hold_index(t)
        held = self._held.get(k)
        if held is None:
            held = self.model.directions(k, x, self.m)
            self._held[k] = held
        radius = self.radius(x)
        e_dir, d_dir, a_dir = held
        scale = self.model.scale * radius
        return scale * e_dir, scale * d_dir, self.model.actuator_scale * radius * a_dir
