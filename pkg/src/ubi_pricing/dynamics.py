"""Driver behavioral model: discount-responsive claim probability and severity.

Each driver carries two state quantities, the claim probability ``p`` and the
expected claim amount ``y``.  A discount ``c`` (fraction of the premium) pulls
both down in proportion to their current level, while mean reversion drags
them back toward the driver's baselines::

    p' = -beta_p * c * p + theta_p * (p - P) + P
    y' = -beta_y * c * y + theta_y * (y - Y) + Y

Both recurrences are clamped to ``[0, 1] x [0, y_max]`` so that every
component downstream (estimator, DP grid, simulator) sees the same world.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

DEFAULT_ETA = 0.2


@dataclass(frozen=True)
class DriverParams:
    """Per-driver behavioral constants."""

    beta_p: float
    beta_y: float
    theta_p: float
    theta_y: float
    baseline_p: float
    baseline_y: float
    premium: float

    def __post_init__(self):
        for name in ("beta_p", "beta_y", "theta_p", "theta_y", "baseline_p", "baseline_y", "premium"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
        if self.beta_p < 0 or self.beta_y < 0:
            raise ValueError("sensitivities must be >= 0")
        if not (0.0 < self.theta_p <= 1.0 and 0.0 < self.theta_y <= 1.0):
            raise ValueError("reversion rates must lie in (0, 1]")
        if not 0.0 <= self.baseline_p <= 1.0:
            raise ValueError("baseline_p must lie in [0, 1]")
        if self.baseline_y < 0:
            raise ValueError("baseline_y must be >= 0")
        if self.premium <= 0:
            raise ValueError("premium must be > 0")

    def baseline_state(self) -> "DriverState":
        return DriverState(self.baseline_p, self.baseline_y)

    def as_array(self) -> np.ndarray:
        """Pack as ``[beta_p, beta_y, theta_p, theta_y, P, Y, premium]`` for kernels."""
        return np.array([self.beta_p, self.beta_y, self.theta_p, self.theta_y,
                         self.baseline_p, self.baseline_y, self.premium], dtype=np.float64)


@dataclass(frozen=True)
class DriverState:
    """Claim probability ``p`` and expected claim amount ``y`` at one period."""

    p: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.p) and math.isfinite(self.y)):
            raise ValueError(f"state must be finite, got ({self.p}, {self.y})")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.y < 0:
            raise ValueError(f"y must be >= 0, got {self.y}")


@dataclass(frozen=True)
class DiscountSchedule:
    """Discounts ``c_t`` indexed by period, each in ``[0, eta]``."""

    values: tuple[float, ...]
    eta: float = DEFAULT_ETA

    def __init__(self, values: Sequence[float], eta: float = DEFAULT_ETA):
        vals = tuple(float(v) for v in values)
        for v in vals:
            if not (math.isfinite(v) and 0.0 <= v <= eta):
                raise ValueError(f"discount {v} outside [0, {eta}]")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "eta", float(eta))

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, k):
        return self.values[k]

    def __iter__(self):
        return iter(self.values)


# -- scalar kernels shared with the numba-compiled solvers ---------------------

@njit(cache=True, inline="always")
def next_p(p, c, beta_p, theta_p, base_p):
    v = -beta_p * c * p + theta_p * (p - base_p) + base_p
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


@njit(cache=True, inline="always")
def next_y(y, c, beta_y, theta_y, base_y, y_max):
    v = -beta_y * c * y + theta_y * (y - base_y) + base_y
    if v < 0.0:
        return 0.0
    if v > y_max:
        return y_max
    return v


def _raw_next(state: DriverState, params: DriverParams, discount: float) -> tuple[float, float]:
    p, y, c = state.p, state.y, discount
    p_next = -params.beta_p * c * p + params.theta_p * (p - params.baseline_p) + params.baseline_p
    y_next = -params.beta_y * c * y + params.theta_y * (y - params.baseline_y) + params.baseline_y
    return p_next, y_next


def step(state: DriverState, params: DriverParams, discount: float,
         y_max: float = math.inf, eta: float | None = None) -> DriverState:
    """Advance one period under ``discount``; result clamped to the domain."""
    if not math.isfinite(discount):
        raise ValueError(f"discount must be finite, got {discount}")
    cap = 1.0 if eta is None else eta
    if not 0.0 <= discount <= cap:
        raise ValueError(f"discount {discount} outside [0, {cap}]")
    p_next, y_next = _raw_next(state, params, discount)
    return DriverState(min(max(p_next, 0.0), 1.0), min(max(y_next, 0.0), y_max))


def rollout(initial: DriverState, params: DriverParams, schedule: Sequence[float] | DiscountSchedule,
            y_max: float = math.inf) -> list[DriverState]:
    """States for periods ``s..s+len(schedule)``, initial state included."""
    eta = schedule.eta if isinstance(schedule, DiscountSchedule) else None
    states = [initial]
    for c in schedule:
        states.append(step(states[-1], params, c, y_max=y_max, eta=eta))
    return states


def stage_cost(params: DriverParams, discount: float, nxt: DriverState) -> float:
    """Reward outlay plus expected claims for one period: ``c * B + p' * y'``."""
    return discount * params.premium + nxt.p * nxt.y


def trajectory_cost(initial: DriverState, params: DriverParams, schedule: Sequence[float],
                    y_max: float = math.inf, penalties: Sequence[float] | None = None) -> float:
    """Total (optionally penalized) cost of following ``schedule`` from ``initial``.

    With ``penalties`` the reward term of period t is scaled by ``1 + penalties[t]``.
    """
    total = 0.0
    state = initial
    for t, c in enumerate(schedule):
        state = step(state, params, c, y_max=y_max)
        scale = 1.0 if penalties is None else 1.0 + penalties[t]
        total += scale * c * params.premium + state.p * state.y
    return total
