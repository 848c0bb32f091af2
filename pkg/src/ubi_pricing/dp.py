"""Per-driver penalized subproblem: backward induction on a (p, y) grid.

For one driver and multipliers ``lam[t]`` the value function satisfies::

    V_t(p, y) = min_c (1 + lam[t]) * B * c + p' * y' + V_{t+1}(p', y'),   V_T = 0

with ``(p', y')`` from the clamped dynamics.  States are discretized on a
uniform grid; off-grid continuation values come from bilinear interpolation.
The minimization over ``c`` scans ``K`` evenly spaced candidates in
``[0, eta]`` (optionally polished by a golden-section search between the best
candidate's neighbours).

The portfolio-level entry point :func:`solve_drivers` restricts backward
induction to the grid nodes reachable from each driver's initial state.  The
arithmetic on those nodes is identical to the full-grid recursion, so the
forward pass produces bit-identical schedules at a fraction of the cost.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .dynamics import DEFAULT_ETA, DiscountSchedule, DriverParams, DriverState, next_p, next_y

_GOLDEN = 0.5 * (math.sqrt(5.0) - 1.0)
_REFINE_ITERS = 24


@dataclass(frozen=True)
class GridSpec:
    """Uniform state grid over ``[0, 1] x [0, y_max]`` plus the discount candidates."""

    p_nodes: int = 41
    y_nodes: int = 41
    y_max: float = 10_000.0
    discount_candidates: int = 21
    eta: float = DEFAULT_ETA
    refine: bool = False

    def __post_init__(self):
        if self.p_nodes < 2 or self.y_nodes < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if self.discount_candidates < 2:
            raise ValueError("need at least 2 discount candidates")
        if not (math.isfinite(self.y_max) and self.y_max > 0):
            raise ValueError("y_max must be finite and positive")
        if not (math.isfinite(self.eta) and 0 < self.eta < 1):
            raise ValueError("eta must lie in (0, 1)")

    @property
    def p_grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.p_nodes)

    @property
    def y_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.y_max, self.y_nodes)

    @property
    def candidates(self) -> np.ndarray:
        return np.linspace(0.0, self.eta, self.discount_candidates)

    @property
    def spacing(self) -> float:
        return max(1.0 / (self.p_nodes - 1), self.y_max / (self.y_nodes - 1))


@dataclass
class ValueTable:
    """Value layers ``values[t]`` for t = s..T and greedy policy for t = s..T-1.

    Layer index 0 corresponds to period ``s``.  When the table was built on a
    restricted region, nodes outside it hold NaN.
    """

    values: np.ndarray
    policy: np.ndarray
    lambdas: np.ndarray
    grid: GridSpec = field(repr=False)

    @property
    def periods(self) -> int:
        return self.policy.shape[0]


# -- kernels -------------------------------------------------------------------

@njit(cache=True, inline="always")
def _cell(v, inv_h, n):
    f = v * inv_h
    i = int(f)
    if i > n - 2:
        i = n - 2
    if i < 0:
        i = 0
    return i, f - i


@njit(cache=True)
def _interp(layer, p, y, inv_dp, inv_dy):
    n_p, n_y = layer.shape
    i, wp = _cell(p, inv_dp, n_p)
    k, wy = _cell(y, inv_dy, n_y)
    lo = (1.0 - wy) * layer[i, k] + wy * layer[i, k + 1]
    hi = (1.0 - wy) * layer[i + 1, k] + wy * layer[i + 1, k + 1]
    return (1.0 - wp) * lo + wp * hi


@njit(cache=True)
def _q_value(c, p, y, pen, layer, par, y_max, inv_dp, inv_dy):
    pn = next_p(p, c, par[0], par[2], par[4])
    yn = next_y(y, c, par[1], par[3], par[5], y_max)
    return pen * c + pn * yn + _interp(layer, pn, yn, inv_dp, inv_dy)


@njit(cache=True)
def _golden(lo, hi, p, y, pen, layer, par, y_max, inv_dp, inv_dy):
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1 = _q_value(x1, p, y, pen, layer, par, y_max, inv_dp, inv_dy)
    f2 = _q_value(x2, p, y, pen, layer, par, y_max, inv_dp, inv_dy)
    for _ in range(_REFINE_ITERS):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = _q_value(x1, p, y, pen, layer, par, y_max, inv_dp, inv_dy)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = _q_value(x2, p, y, pen, layer, par, y_max, inv_dp, inv_dy)
    if f1 <= f2:
        return x1, f1
    return x2, f2


@njit(cache=True)
def _best_action(p, y, pen, layer, par, cands, y_max, inv_dp, inv_dy, refine):
    """Minimize Q over the candidates at a continuous state; ties -> smaller c."""
    n_c = cands.shape[0]
    best_q = np.inf
    best_i = 0
    for ci in range(n_c):
        q = _q_value(cands[ci], p, y, pen, layer, par, y_max, inv_dp, inv_dy)
        if q < best_q:
            best_q = q
            best_i = ci
    best_c = cands[best_i]
    if refine:
        lo = cands[best_i - 1] if best_i > 0 else cands[0]
        hi = cands[best_i + 1] if best_i < n_c - 1 else cands[n_c - 1]
        c_r, q_r = _golden(lo, hi, p, y, pen, layer, par, y_max, inv_dp, inv_dy)
        if q_r < best_q:
            best_q = q_r
            best_c = c_r
    return best_c, best_q


@njit(cache=True)
def _node_range(vmin, vmax, inv_h, n):
    i_lo, _ = _cell(vmin, inv_h, n)
    i_hi, _ = _cell(vmax, inv_h, n)
    # one node of padding guards against last-ulp differences at cell edges
    lo = i_lo - 1
    hi = i_hi + 2
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    return lo, hi


@njit(cache=True)
def _reachable_boxes(par, p0, y0, n_periods, eta, p_grid, y_grid, y_max, inv_dp, inv_dy):
    """Inclusive node-index boxes per layer covering every reachable state."""
    n_p = p_grid.shape[0]
    n_y = y_grid.shape[0]
    boxes = np.empty((n_periods + 1, 4), dtype=np.int64)
    lo_p, hi_p = _node_range(p0, p0, inv_dp, n_p)
    lo_y, hi_y = _node_range(y0, y0, inv_dy, n_y)
    boxes[0, 0] = lo_p
    boxes[0, 1] = hi_p
    boxes[0, 2] = lo_y
    boxes[0, 3] = hi_y
    for t in range(n_periods):
        # bilinear in (state, c): extremes over the box sit at the corners
        pmin = np.inf
        pmax = -np.inf
        ymin = np.inf
        ymax = -np.inf
        for pv in (p_grid[boxes[t, 0]], p_grid[boxes[t, 1]]):
            for c in (0.0, eta):
                v = next_p(pv, c, par[0], par[2], par[4])
                pmin = min(pmin, v)
                pmax = max(pmax, v)
        for yv in (y_grid[boxes[t, 2]], y_grid[boxes[t, 3]]):
            for c in (0.0, eta):
                v = next_y(yv, c, par[1], par[3], par[5], y_max)
                ymin = min(ymin, v)
                ymax = max(ymax, v)
        lo_p, hi_p = _node_range(pmin, pmax, inv_dp, n_p)
        lo_y, hi_y = _node_range(ymin, ymax, inv_dy, n_y)
        boxes[t + 1, 0] = lo_p
        boxes[t + 1, 1] = hi_p
        boxes[t + 1, 2] = lo_y
        boxes[t + 1, 3] = hi_y
    return boxes


@njit(cache=True)
def _backward(par, lambdas, p_grid, y_grid, cands, y_max, boxes, refine, values, policy):
    n_periods = lambdas.shape[0]
    n_c = cands.shape[0]
    inv_dp = (p_grid.shape[0] - 1) / 1.0
    inv_dy = (y_grid.shape[0] - 1) / y_max
    values[n_periods, :, :] = 0.0
    for t in range(n_periods - 1, -1, -1):
        pen = (1.0 + lambdas[t]) * par[6]
        nxt = values[t + 1]
        lo_p, hi_p, lo_y, hi_y = boxes[t, 0], boxes[t, 1], boxes[t, 2], boxes[t, 3]
        for j in range(lo_p, hi_p + 1):
            p = p_grid[j]
            for k in range(lo_y, hi_y + 1):
                y = y_grid[k]
                best_q = np.inf
                best_i = 0
                for ci in range(n_c):
                    c = cands[ci]
                    pn = next_p(p, c, par[0], par[2], par[4])
                    yn = next_y(y, c, par[1], par[3], par[5], y_max)
                    q = pen * c + pn * yn + _interp(nxt, pn, yn, inv_dp, inv_dy)
                    if q < best_q:
                        best_q = q
                        best_i = ci
                best_c = cands[best_i]
                if refine:
                    lo = cands[best_i - 1] if best_i > 0 else cands[0]
                    hi = cands[best_i + 1] if best_i < n_c - 1 else cands[n_c - 1]
                    c_r, q_r = _golden(lo, hi, p, y, pen, nxt, par, y_max, inv_dp, inv_dy)
                    if q_r < best_q:
                        best_q = q_r
                        best_c = c_r
                values[t, j, k] = best_q
                policy[t, j, k] = best_c


@njit(cache=True)
def _forward(par, lambdas, values, p0, y0, cands, y_max, refine, guard, sched, states):
    """Greedy pass from a continuous state; returns (realized, penalized) cost."""
    n_periods = lambdas.shape[0]
    n_p = values.shape[1]
    n_y = values.shape[2]
    inv_dp = (n_p - 1) / 1.0
    inv_dy = (n_y - 1) / y_max
    p = p0
    y = y0
    states[0, 0] = p
    states[0, 1] = y
    realized = 0.0
    penalized = 0.0
    for t in range(n_periods):
        pen = (1.0 + lambdas[t]) * par[6]
        c, _ = _best_action(p, y, pen, values[t + 1], par, cands, y_max, inv_dp, inv_dy, refine)
        sched[t] = c
        p = next_p(p, c, par[0], par[2], par[4])
        y = next_y(y, c, par[1], par[3], par[5], y_max)
        states[t + 1, 0] = p
        states[t + 1, 1] = y
        realized += c * par[6] + p * y
        penalized += pen * c + p * y
    if guard:
        # never pay for a schedule that loses to doing nothing
        zero_cost = 0.0
        p = p0
        y = y0
        for t in range(n_periods):
            p = next_p(p, 0.0, par[0], par[2], par[4])
            y = next_y(y, 0.0, par[1], par[3], par[5], y_max)
            zero_cost += p * y
        if penalized >= zero_cost:
            any_discount = False
            for t in range(n_periods):
                if sched[t] > 0.0:
                    any_discount = True
            if any_discount:
                p = p0
                y = y0
                for t in range(n_periods):
                    sched[t] = 0.0
                    p = next_p(p, 0.0, par[0], par[2], par[4])
                    y = next_y(y, 0.0, par[1], par[3], par[5], y_max)
                    states[t + 1, 0] = p
                    states[t + 1, 1] = y
                realized = zero_cost
                penalized = zero_cost
    return realized, penalized


@njit(cache=True, nogil=True)
def _solve_batch(pars, inits, lambdas, p_grid, y_grid, cands, y_max, eta, refine, guard, restrict,
                 sched, states, realized, penalized):
    n_drivers = pars.shape[0]
    n_periods = lambdas.shape[0]
    n_p = p_grid.shape[0]
    n_y = y_grid.shape[0]
    inv_dp = (n_p - 1) / 1.0
    inv_dy = (n_y - 1) / y_max
    values = np.empty((n_periods + 1, n_p, n_y))
    policy = np.empty((n_periods, n_p, n_y))
    full = np.empty((n_periods + 1, 4), dtype=np.int64)
    for t in range(n_periods + 1):
        full[t, 0] = 0
        full[t, 1] = n_p - 1
        full[t, 2] = 0
        full[t, 3] = n_y - 1
    for i in range(n_drivers):
        par = pars[i]
        if restrict:
            boxes = _reachable_boxes(par, inits[i, 0], inits[i, 1], n_periods, eta,
                                     p_grid, y_grid, y_max, inv_dp, inv_dy)
        else:
            boxes = full
        _backward(par, lambdas, p_grid, y_grid, cands, y_max, boxes, refine, values, policy)
        r, q = _forward(par, lambdas, values, inits[i, 0], inits[i, 1], cands, y_max, refine, guard,
                        sched[i], states[i])
        realized[i] = r
        penalized[i] = q


# -- public API ----------------------------------------------------------------

def _check_lambdas(lambda_schedule) -> np.ndarray:
    lam = np.asarray(lambda_schedule, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(lam)):
        raise ValueError("multipliers must be finite")
    if np.any(lam < 0):
        raise ValueError("multipliers must be >= 0")
    return lam


def interpolate(table_layer: np.ndarray, query: DriverState, grid: GridSpec) -> float:
    """Bilinear interpolation of one value layer at an off-grid state."""
    layer = np.asarray(table_layer, dtype=np.float64)
    if layer.shape != (grid.p_nodes, grid.y_nodes):
        raise ValueError(f"layer shape {layer.shape} does not match grid")
    if not (0.0 <= query.p <= 1.0 and 0.0 <= query.y <= grid.y_max):
        raise ValueError(f"query ({query.p}, {query.y}) outside the grid domain")
    return float(_interp(layer, query.p, query.y, grid.p_nodes - 1.0, (grid.y_nodes - 1) / grid.y_max))


def backward_induction(params: DriverParams, lambda_schedule: Sequence[float], grid: GridSpec,
                       initial: DriverState | None = None) -> ValueTable:
    """Fill value and policy layers from the last period back to the first.

    ``len(lambda_schedule)`` fixes the number of periods.  With ``initial``
    only nodes reachable from that state are computed (others are NaN).
    """
    lam = _check_lambdas(lambda_schedule)
    n = lam.shape[0]
    par = params.as_array()
    values = np.full((n + 1, grid.p_nodes, grid.y_nodes), np.nan)
    policy = np.full((n, grid.p_nodes, grid.y_nodes), np.nan)
    inv_dp = grid.p_nodes - 1.0
    inv_dy = (grid.y_nodes - 1) / grid.y_max
    if initial is None:
        boxes = np.zeros((n + 1, 4), dtype=np.int64)
        boxes[:, 1] = grid.p_nodes - 1
        boxes[:, 3] = grid.y_nodes - 1
    else:
        boxes = _reachable_boxes(par, initial.p, initial.y, n, grid.eta, grid.p_grid, grid.y_grid,
                                 grid.y_max, inv_dp, inv_dy)
    _backward(par, lam, grid.p_grid, grid.y_grid, grid.candidates, grid.y_max, boxes, grid.refine,
              values, policy)
    return ValueTable(values=values, policy=policy, lambdas=lam, grid=grid)


def greedy_rollout(table: ValueTable, initial: DriverState, params: DriverParams, grid: GridSpec,
                   guard: bool = True) -> tuple[DiscountSchedule, list[DriverState], float]:
    """Forward pass re-minimizing Q at each continuous state.

    Returns the schedule, visited states (initial included) and the realized
    unpenalized cost.  With ``guard`` the all-zero schedule is returned
    whenever the chosen one does not beat it on the penalized objective.
    """
    if not (0.0 <= initial.p <= 1.0 and 0.0 <= initial.y <= grid.y_max):
        raise ValueError("initial state outside the grid domain")
    n = table.periods
    sched = np.zeros(n)
    states = np.zeros((n + 1, 2))
    realized, _ = _forward(params.as_array(), table.lambdas, table.values, initial.p, initial.y,
                           grid.candidates, grid.y_max, grid.refine, guard, sched, states)
    visited = [DriverState(float(p), float(y)) for p, y in states]
    return DiscountSchedule(sched.tolist(), eta=grid.eta), visited, float(realized)


@dataclass
class BatchSolution:
    """Per-driver outcome of the penalized subproblems for one multiplier vector."""

    schedules: np.ndarray   # (N, M)
    states: np.ndarray      # (N, M + 1, 2)
    realized: np.ndarray    # (N,) unpenalized cost
    penalized: np.ndarray   # (N,) cost with (1 + lam_t) on rewards


def solve_drivers(pars: np.ndarray, inits: np.ndarray, lambda_schedule: Sequence[float], grid: GridSpec,
                  threads: int = 1, restrict: bool = True, guard: bool = True) -> BatchSolution:
    """Backward induction + greedy forward pass for every driver.

    ``pars`` is (N, 7) in :meth:`DriverParams.as_array` order, ``inits`` is
    (N, 2).  Drivers are split into contiguous chunks across ``threads``
    workers; results do not depend on the thread count.
    """
    lam = _check_lambdas(lambda_schedule)
    pars = np.ascontiguousarray(pars, dtype=np.float64)
    inits = np.ascontiguousarray(inits, dtype=np.float64)
    n_drivers = pars.shape[0]
    n = lam.shape[0]
    sched = np.zeros((n_drivers, n))
    states = np.zeros((n_drivers, n + 1, 2))
    realized = np.zeros(n_drivers)
    penalized = np.zeros(n_drivers)
    args = (grid.p_grid, grid.y_grid, grid.candidates, grid.y_max, grid.eta, grid.refine, guard, restrict)

    def run(lo: int, hi: int) -> None:
        _solve_batch(pars[lo:hi], inits[lo:hi], lam, *args,
                     sched[lo:hi], states[lo:hi], realized[lo:hi], penalized[lo:hi])

    threads = max(1, min(int(threads), n_drivers))
    if threads == 1:
        run(0, n_drivers)
    else:
        bounds = np.linspace(0, n_drivers, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, bounds[:-1], bounds[1:]))
    return BatchSolution(sched, states, realized, penalized)


def enumerate_schedules(params: DriverParams, initial: DriverState, candidates: np.ndarray,
                        n_periods: int, y_max: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All ``K**n_periods`` candidate schedules with their exact costs.

    Returns ``(schedules, cost, usage)`` where ``cost`` is unpenalized and
    ``usage[:, t] = c_t * premium``.  Rows are in lexicographic order of
    candidate indices, so ``argmin`` breaks ties toward smaller early discounts.
    """
    cands = np.asarray(candidates, dtype=np.float64)
    idx = np.indices((len(cands),) * n_periods).reshape(n_periods, -1).T
    schedules = cands[idx]
    p = np.full(schedules.shape[0], initial.p)
    y = np.full(schedules.shape[0], initial.y)
    cost = np.zeros(schedules.shape[0])
    for t in range(n_periods):
        c = schedules[:, t]
        p = np.clip(-params.beta_p * c * p + params.theta_p * (p - params.baseline_p) + params.baseline_p, 0.0, 1.0)
        y = np.clip(-params.beta_y * c * y + params.theta_y * (y - params.baseline_y) + params.baseline_y, 0.0, y_max)
        cost += c * params.premium + p * y
    return schedules, cost, schedules * params.premium
