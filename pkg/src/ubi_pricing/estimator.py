"""Per-driver sensitivity estimation by least absolute deviation.

Given observed claim probabilities ``p_obs[t]`` and amounts ``y_obs[t]`` after
discounts ``c[t-1]``, find the behavioral constants and the pre-sample state
``(p0, y0)`` minimizing::

    sum_t |p_t - p_obs[t]| + w * |y_t - y_obs[t]|

where ``(p_t, y_t)`` follow the clamped dynamics.  The objective splits into
a probability block ``(beta_p, theta_p, P, p0)`` and a severity block
``(beta_y, theta_y, Y, y0)``; each block is minimized by multistart projected
coordinate descent whose line searches are a coarse scan followed by
golden-section refinement inside the parameter box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .dynamics import DriverParams, DriverState, rollout

BETA_MAX = 5.0
THETA_MIN = 1e-6
_SCAN_POINTS = 9
_GOLDEN_ITERS = 40
_INVGR = 0.5 * (math.sqrt(5.0) - 1.0)


@dataclass(frozen=True)
class ObservationSeries:
    observed_p: tuple[float, ...]
    observed_y: tuple[float, ...]
    discounts: tuple[float, ...]

    def __init__(self, observed_p: Sequence[float], observed_y: Sequence[float], discounts: Sequence[float]):
        p = tuple(float(v) for v in observed_p)
        y = tuple(float(v) for v in observed_y)
        c = tuple(float(v) for v in discounts)
        if not (len(p) == len(y) == len(c)):
            raise ValueError(f"length mismatch: p={len(p)}, y={len(y)}, discounts={len(c)}")
        if len(p) < 2:
            raise ValueError("need at least 2 observations")
        if any(not 0.0 <= v <= 1.0 for v in p):
            raise ValueError("observed probabilities must lie in [0, 1]")
        if any(v < 0 for v in y):
            raise ValueError("observed amounts must be >= 0")
        if any(not (math.isfinite(v) and v >= 0) for v in c):
            raise ValueError("discounts must be finite and >= 0")
        object.__setattr__(self, "observed_p", p)
        object.__setattr__(self, "observed_y", y)
        object.__setattr__(self, "discounts", c)

    def __len__(self) -> int:
        return len(self.observed_p)

    def is_low_excitation(self) -> bool:
        """Fewer than two distinct discount levels leave the sensitivities unidentified."""
        return len(set(self.discounts)) < 2


@dataclass(frozen=True)
class EstimatorConfig:
    """``loss_weight=None`` uses ``1 / mean(y_obs)`` so both loss terms are O(1)."""

    loss_weight: float | None = None
    multistart_count: int = 6
    max_iterations: int = 60
    tolerance: float = 1e-12
    y_max: float = 10_000.0

    def __post_init__(self):
        if self.loss_weight is not None and self.loss_weight <= 0:
            raise ValueError("loss_weight must be > 0")
        if self.multistart_count < 1 or self.max_iterations < 1:
            raise ValueError("multistart_count and max_iterations must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.y_max <= 0:
            raise ValueError("y_max must be > 0")

    def weight_for(self, obs: ObservationSeries) -> float:
        if self.loss_weight is not None:
            return self.loss_weight
        mean_y = sum(obs.observed_y) / len(obs)
        return 1.0 / mean_y if mean_y > 0 else 1.0


@dataclass
class FitResult:
    params: DriverParams
    initial_state: DriverState
    objective: float
    warnings: list[str] = field(default_factory=list)

    def predicted(self, discounts: Sequence[float], y_max: float) -> list[DriverState]:
        """Fitted trajectory for periods 1..T (the pre-sample state excluded)."""
        return rollout(self.initial_state, self.params, discounts, y_max=y_max)[1:]


# -- kernels -------------------------------------------------------------------

@njit(cache=True)
def _block_loss(x, disc, obs, upper):
    """Absolute deviations of one state component; ``x = [beta, theta, base, x0]``."""
    beta, theta, base = x[0], x[1], x[2]
    v = x[3]
    total = 0.0
    for t in range(disc.shape[0]):
        v = -beta * disc[t] * v + theta * (v - base) + base
        if v < 0.0:
            v = 0.0
        elif v > upper:
            v = upper
        total += abs(v - obs[t])
    return total


@njit(cache=True)
def _profile(beta, theta, disc, obs, upper, lo, hi, out):
    """Minimize the block loss over ``(base, x0)`` with ``beta, theta`` held fixed.

    Without clamping every predicted value is affine in ``(base, x0)``, so an
    L1 minimizer sits where two residuals vanish or where one residual vanishes
    on a box face.  Each such vertex is projected into the box and scored with
    the clamped loss; the best is written to ``out``.  The incumbent in ``out``
    is scored too, so the result never gets worse.
    """
    n = disc.shape[0]
    a = np.empty(n)
    b = np.empty(n)
    ap, bp = 1.0, 0.0
    for t in range(n):
        m = theta - beta * disc[t]
        ap = ap * m
        bp = bp * m + (1.0 - theta)
        a[t] = ap
        b[t] = bp
    x = np.empty(4)
    x[0] = beta
    x[1] = theta
    x[2] = out[0]
    x[3] = out[1]
    best = _block_loss(x, disc, obs, upper)
    best_base, best_x0 = out[0], out[1]
    # candidates: pairwise interpolation, then one residual zero on each face
    for i in range(n):
        for j in range(i + 1, n):
            det = a[i] * b[j] - a[j] * b[i]
            if abs(det) < 1e-14:
                continue
            x[3] = (obs[i] * b[j] - obs[j] * b[i]) / det
            x[2] = (a[i] * obs[j] - a[j] * obs[i]) / det
            x[2] = min(max(x[2], lo[2]), hi[2])
            x[3] = min(max(x[3], lo[3]), hi[3])
            f = _block_loss(x, disc, obs, upper)
            if f < best:
                best, best_base, best_x0 = f, x[2], x[3]
    for i in range(n):
        for face in range(4):
            if face < 2:
                x[2] = lo[2] if face == 0 else hi[2]
                if abs(a[i]) < 1e-14:
                    continue
                x[3] = min(max((obs[i] - b[i] * x[2]) / a[i], lo[3]), hi[3])
            else:
                x[3] = lo[3] if face == 2 else hi[3]
                if abs(b[i]) < 1e-14:
                    continue
                x[2] = min(max((obs[i] - a[i] * x[3]) / b[i], lo[2]), hi[2])
            f = _block_loss(x, disc, obs, upper)
            if f < best:
                best, best_base, best_x0 = f, x[2], x[3]
    out[0] = best_base
    out[1] = best_x0
    return best


@njit(cache=True)
def _eval_at(x, j, value, disc, obs, upper, lo, hi, profiled):
    old = x[j]
    x[j] = value
    if profiled:
        tmp = np.empty(2)
        tmp[0] = x[2]
        tmp[1] = x[3]
        f = _profile(x[0], x[1], disc, obs, upper, lo, hi, tmp)
    else:
        f = _block_loss(x, disc, obs, upper)
    x[j] = old
    return f


@njit(cache=True)
def _line_search(x, j, lo, hi, disc, obs, upper, f_now, profiled):
    """Coarse scan of the box, golden section around the best scan point."""
    best_v = x[j]
    best_f = f_now
    h = (hi[j] - lo[j]) / (_SCAN_POINTS - 1)
    best_k = -1
    for k in range(_SCAN_POINTS):
        v = lo[j] + k * h
        f = _eval_at(x, j, v, disc, obs, upper, lo, hi, profiled)
        if f < best_f:
            best_f = f
            best_v = v
            best_k = k
    centre = best_v if best_k >= 0 else x[j]
    a = max(lo[j], centre - h)
    b = min(hi[j], centre + h)
    x1 = b - _INVGR * (b - a)
    x2 = a + _INVGR * (b - a)
    f1 = _eval_at(x, j, x1, disc, obs, upper, lo, hi, profiled)
    f2 = _eval_at(x, j, x2, disc, obs, upper, lo, hi, profiled)
    for _ in range(_GOLDEN_ITERS):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVGR * (b - a)
            f1 = _eval_at(x, j, x1, disc, obs, upper, lo, hi, profiled)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVGR * (b - a)
            f2 = _eval_at(x, j, x2, disc, obs, upper, lo, hi, profiled)
    if f1 < best_f:
        best_f = f1
        best_v = x1
    if f2 < best_f:
        best_f = f2
        best_v = x2
    return best_v, best_f


@njit(cache=True)
def _descend(x, lo, hi, disc, obs, upper, max_iter, tol):
    """Coordinate descent on ``(beta, theta)`` with ``(base, x0)`` profiled out,
    alternated with plain sweeps over all four coordinates."""
    tmp = np.empty(2)
    tmp[0] = x[2]
    tmp[1] = x[3]
    f = _profile(x[0], x[1], disc, obs, upper, lo, hi, tmp)
    x[2] = tmp[0]
    x[3] = tmp[1]
    for _ in range(max_iter):
        f_start = f
        for j in range(2):
            v, fv = _line_search(x, j, lo, hi, disc, obs, upper, f, True)
            if fv < f:
                x[j] = v
                tmp[0] = x[2]
                tmp[1] = x[3]
                f = _profile(x[0], x[1], disc, obs, upper, lo, hi, tmp)
                x[2] = tmp[0]
                x[3] = tmp[1]
        for j in range(4):
            v, fv = _line_search(x, j, lo, hi, disc, obs, upper, f, False)
            if fv < f:
                x[j] = v
                f = fv
        if f_start - f <= tol:
            break
    return f


@njit(cache=True, nogil=True)
def _fit_block(starts, lo, hi, disc, obs, upper, max_iter, tol):
    best_f = np.inf
    best_x = starts[0].copy()
    for s in range(starts.shape[0]):
        x = starts[s].copy()
        f = _descend(x, lo, hi, disc, obs, upper, max_iter, tol)
        if f < best_f:
            best_f = f
            best_x = x.copy()
    return best_x, best_f


# -- public API ----------------------------------------------------------------

def _arrays(obs: ObservationSeries):
    return (np.array(obs.discounts), np.array(obs.observed_p), np.array(obs.observed_y))


def _candidate_params(candidate: FitResult | DriverParams, initial: DriverState | None):
    if isinstance(candidate, FitResult):
        return candidate.params, candidate.initial_state
    if initial is None:
        raise ValueError("initial state required when passing DriverParams")
    return candidate, initial


def loss(candidate: FitResult | DriverParams, obs: ObservationSeries, cfg: EstimatorConfig,
         initial: DriverState | None = None) -> float:
    """Weighted absolute deviation of the candidate's rollout from the observations."""
    params, init = _candidate_params(candidate, initial)
    disc, p_obs, y_obs = _arrays(obs)
    w = cfg.weight_for(obs)
    xp = np.array([params.beta_p, params.theta_p, params.baseline_p, init.p])
    xy = np.array([params.beta_y, params.theta_y, params.baseline_y, init.y])
    return float(_block_loss(xp, disc, p_obs, 1.0) + w * _block_loss(xy, disc, y_obs, cfg.y_max))


def _boxes(y_max: float):
    lo_p = np.array([0.0, THETA_MIN, 0.0, 0.0])
    hi_p = np.array([BETA_MAX, 1.0, 1.0, 1.0])
    lo_y = np.array([0.0, THETA_MIN, 0.0, 0.0])
    hi_y = np.array([BETA_MAX, 1.0, y_max, y_max])
    return lo_p, hi_p, lo_y, hi_y


@njit(cache=True, nogil=True)
def _scan_start(lo, hi, disc, obs, upper, points):
    """Best profiled point of a coarse ``(beta, theta)`` lattice."""
    best = np.empty(4)
    best_f = np.inf
    tmp = np.empty(2)
    for i in range(points):
        beta = lo[0] + (hi[0] - lo[0]) * i / (points - 1)
        for k in range(points):
            theta = lo[1] + (hi[1] - lo[1]) * k / (points - 1)
            tmp[0] = 0.5 * (lo[2] + hi[2])
            tmp[1] = obs[0]
            f = _profile(beta, theta, disc, obs, upper, lo, hi, tmp)
            if f < best_f:
                best_f = f
                best[0], best[1], best[2], best[3] = beta, theta, tmp[0], tmp[1]
    return best


def _starts(obs_vals: np.ndarray, lo: np.ndarray, hi: np.ndarray, disc: np.ndarray, upper: float,
            count: int, rng) -> np.ndarray:
    first = _scan_start(lo, hi, disc, obs_vals, upper, 11)
    rest = lo + (hi - lo) * rng.uniform(size=(count - 1, 4))
    return np.clip(np.vstack([first, rest]), lo, hi)


def fit(obs: ObservationSeries, premium: float, cfg: EstimatorConfig, seed: int = 0) -> FitResult:
    """Best candidate over ``cfg.multistart_count`` coordinate-descent starts."""
    disc, p_obs, y_obs = _arrays(obs)
    w = cfg.weight_for(obs)
    lo_p, hi_p, lo_y, hi_y = _boxes(cfg.y_max)
    rng = np.random.default_rng(seed)
    warnings: list[str] = []

    degenerate = (np.all(disc == 0) and np.all(p_obs == p_obs[0]) and np.all(y_obs == y_obs[0]))
    if degenerate:
        # constant series at rest: the baseline explains it and beta is unidentified
        xp = np.array([0.0, 1.0, p_obs[0], p_obs[0]])
        xy = np.array([0.0, 1.0, min(y_obs[0], cfg.y_max), min(y_obs[0], cfg.y_max)])
        fp = _block_loss(xp, disc, p_obs, 1.0)
        fy = _block_loss(xy, disc, y_obs, cfg.y_max)
        warnings.append("degenerate")
    else:
        starts_p = _starts(p_obs, lo_p, hi_p, disc, 1.0, cfg.multistart_count, rng)
        starts_y = _starts(y_obs, lo_y, hi_y, disc, cfg.y_max, cfg.multistart_count, rng)
        xp, fp = _fit_block(starts_p, lo_p, hi_p, disc, p_obs, 1.0, cfg.max_iterations, cfg.tolerance)
        xy, fy = _fit_block(starts_y, lo_y, hi_y, disc, y_obs, cfg.y_max, cfg.max_iterations,
                            cfg.tolerance * max(1.0, 1.0 / w))
    if obs.is_low_excitation():
        warnings.append("low_excitation")

    params = DriverParams(beta_p=float(xp[0]), beta_y=float(xy[0]), theta_p=float(xp[1]),
                          theta_y=float(xy[1]), baseline_p=float(xp[2]), baseline_y=float(xy[2]),
                          premium=premium)
    return FitResult(params, DriverState(float(xp[3]), float(xy[3])), float(fp + w * fy), warnings)


def default_oracle_ranges(y_max: float) -> dict[str, tuple[float, float]]:
    return {
        "beta_p": (0.0, 2.0), "beta_y": (0.0, 2.0),
        "theta_p": (0.1, 0.9), "theta_y": (0.1, 0.9),
        "baseline_p": (0.0, 0.1), "baseline_y": (0.0, y_max),
        "p0": (0.0, 0.1), "y0": (0.0, y_max),
    }


def brute_force_fit(obs: ObservationSeries, premium: float, grid_points_per_axis: int,
                    cfg: EstimatorConfig | None = None,
                    ranges: dict[str, tuple[float, float]] | None = None) -> FitResult:
    """Exhaustive loss minimization over the full 8-D Cartesian grid.

    Independent of :func:`fit`: plain vectorized numpy over every grid point.
    Ties go to the first point in C order of
    ``(beta_p, beta_y, theta_p, theta_y, P, Y, p0, y0)``.
    """
    if grid_points_per_axis < 3:
        raise ValueError("grid_points_per_axis must be >= 3")
    cfg = cfg or EstimatorConfig()
    ranges = ranges or default_oracle_ranges(cfg.y_max)
    names = ("beta_p", "beta_y", "theta_p", "theta_y", "baseline_p", "baseline_y", "p0", "y0")
    axes = [np.linspace(*ranges[name], grid_points_per_axis) for name in names]
    w = cfg.weight_for(obs)
    mesh = np.meshgrid(*axes, indexing="ij", sparse=True)
    bp, by, tp, ty, P, Y, p, y = mesh
    total = np.zeros(np.broadcast_shapes(*(m.shape for m in mesh)))
    for c, po, yo in zip(obs.discounts, obs.observed_p, obs.observed_y):
        p = np.clip(-bp * c * p + tp * (p - P) + P, 0.0, 1.0)
        y = np.clip(-by * c * y + ty * (y - Y) + Y, 0.0, cfg.y_max)
        total = total + np.abs(p - po) + w * np.abs(y - yo)
    flat = int(np.argmin(total))
    idx = np.unravel_index(flat, total.shape)
    v = [float(axis[i]) for axis, i in zip(axes, idx)]
    params = DriverParams(beta_p=v[0], beta_y=v[1], theta_p=v[2], theta_y=v[3],
                          baseline_p=v[4], baseline_y=v[5], premium=premium)
    return FitResult(params, DriverState(v[6], v[7]), float(total[idx]))


def one_step_predictions(result: FitResult, obs: ObservationSeries, y_max: float) -> list[DriverState]:
    """Predict each observation from the previous observed state (first from the fitted p0, y0)."""
    preds = []
    prev = result.initial_state
    for c, po, yo in zip(obs.discounts, obs.observed_p, obs.observed_y):
        params = result.params
        p = -params.beta_p * c * prev.p + params.theta_p * (prev.p - params.baseline_p) + params.baseline_p
        y = -params.beta_y * c * prev.y + params.theta_y * (prev.y - params.baseline_y) + params.baseline_y
        preds.append(DriverState(min(max(p, 0.0), 1.0), min(max(y, 0.0), y_max)))
        prev = DriverState(po, min(yo, y_max))
    return preds


__all__ = ["ObservationSeries", "EstimatorConfig", "FitResult", "loss", "fit", "brute_force_fit",
           "one_step_predictions", "default_oracle_ranges"]
