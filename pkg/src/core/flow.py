"""
Fixed-step RK4 flows with bisection event location.

Steps land on multiples of the step size so any piecewise-constant input
held on a coarser multiple of it is never straddled. An event is a change
of a boolean predicate along the flow; it is bracketed inside one step and
located with scipy's bisection to EVENT_XTOL, then stepped past by
2*EVENT_XTOL so the predicate has actually flipped at the returned state.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import optimize

from .errors import BlowUp

logger = logging.getLogger(__name__)

EVENT_XTOL = 1e-8

RHS = Callable[[float, np.ndarray], np.ndarray]
Predicate = Callable[[np.ndarray], bool]


def rk4_step(rhs: RHS, t: float, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = rhs(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def next_grid_time(t: float, step: float, horizon: float) -> float:
    """The next multiple of step after t, capped at horizon."""
    k = np.floor(t / step + 1e-9) + 1.0
    return float(min(horizon, k * step))


def locate_event(
    rhs: RHS,
    t: float,
    x: np.ndarray,
    dt: float,
    changed: Callable[[np.ndarray], bool],
    xtol: float = EVENT_XTOL,
) -> Tuple[float, np.ndarray]:
    """
    First sub-step s in (0, dt] after which changed(x(s)) holds.

    changed(rk4_step(..., dt)) must be True and changed(x) False. Returns
    the sub-step and the state just past the located crossing.
    """

    def sign(s: float) -> float:
        return -1.0 if changed(rk4_step(rhs, t, x, s)) else 1.0

    if dt <= 2.0 * xtol:
        return dt, rk4_step(rhs, t, x, dt)
    root = optimize.bisect(sign, 0.0, dt, xtol=xtol)
    s = min(dt, root + 2.0 * xtol)
    x_s = rk4_step(rhs, t, x, s)
    if not changed(x_s):
        s, x_s = dt, rk4_step(rhs, t, x, dt)
    return s, x_s


@dataclass
class FlowTrace:
    t: np.ndarray            # (K,)
    x: np.ndarray            # (K, n)
    event_time: Optional[float]
    status: str              # "event" | "horizon"

    @property
    def end(self) -> np.ndarray:
        return self.x[-1]


def flow_until(
    rhs: RHS,
    x0: np.ndarray,
    horizon: float,
    step: float,
    stop: Optional[Predicate] = None,
    t0: float = 0.0,
    blow_up_bound: Optional[float] = None,
    xtol: float = EVENT_XTOL,
) -> FlowTrace:
    """Integrate from t0 until stop(x) first holds (located) or until horizon."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.asarray(x0, dtype=float).copy()
    t = float(t0)
    times: List[float] = [t]
    states: List[np.ndarray] = [x.copy()]
    if stop is not None and stop(x):
        return FlowTrace(np.array(times), np.array(states), t, "event")
    while t < horizon - 1e-12:
        t_next = next_grid_time(t, step, horizon)
        dt = t_next - t
        x_next = rk4_step(rhs, t, x, dt)
        if stop is not None and stop(x_next):
            s, x_next = locate_event(rhs, t, x, dt, stop, xtol)
            t += s
            times.append(t)
            states.append(x_next)
            return FlowTrace(np.array(times), np.array(states), t, "event")
        t, x = t_next, x_next
        if blow_up_bound is not None and not np.linalg.norm(x) <= blow_up_bound:
            raise BlowUp(f"|x| exceeded {blow_up_bound:g} at t={t:.6g}", t=t, x=x)
        times.append(t)
        states.append(x.copy())
    return FlowTrace(np.array(times), np.array(states), None, "horizon")
