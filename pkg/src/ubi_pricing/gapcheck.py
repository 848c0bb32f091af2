"""Exhaustive primal optimum for tiny portfolios, and duality-gap measurement.

The oracle searches the same discrete discount candidates the DP uses, so the
gap it reports against :func:`dual.solve` is a pure duality gap rather than a
mix of duality and discretization error.  The dual side therefore runs with
``subproblem="exact"``: each driver's penalized problem is solved by
enumeration, which makes the dual value a true lower bound.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .dp import GridSpec
from .dual import SolverConfig, solve
from .dynamics import DriverParams, DriverState, step

SEARCH_CAP_BITS = 24


@dataclass(frozen=True)
class GapReport:
    n: int
    n_periods: int
    primal_optimum: float
    dual_value: float
    gap: float
    bound: float

    @property
    def gap_per_driver(self) -> float:
        return self.gap / self.n


def search_bits(n_drivers: int, n_periods: int, n_candidates: int) -> float:
    return n_drivers * n_periods * math.log2(n_candidates)


def _check_cap(n_drivers: int, n_periods: int, n_candidates: int) -> None:
    bits = search_bits(n_drivers, n_periods, n_candidates)
    if bits > SEARCH_CAP_BITS + 1e-9:
        raise ValueError(f"search space of {bits:.1f} bits exceeds the {SEARCH_CAP_BITS}-bit cap")


def _driver_table(params: DriverParams, initial: DriverState, candidates, n_periods: int, y_max: float):
    """Cost and per-period outlay of every schedule, by direct simulation."""
    costs = []
    usage = []
    for sched in itertools.product(candidates, repeat=n_periods):
        state = initial
        total = 0.0
        for c in sched:
            state = step(state, params, c, y_max=y_max)
            total += c * params.premium + state.p * state.y
        costs.append(total)
        usage.append([c * params.premium for c in sched])
    return np.array(costs), np.array(usage).reshape(len(costs), n_periods)


def exhaustive_primal(portfolio, grid: GridSpec, cfg: SolverConfig, n_periods: int):
    """Feasible minimizer of total cost over all joint candidate schedules.

    Returns ``(schedules, optimum)`` with ``schedules`` of shape ``(N, n_periods)``.
    Ties go to the first joint schedule in lexicographic order.
    """
    candidates = [float(c) for c in grid.candidates]
    k = len(candidates)
    _check_cap(len(portfolio), n_periods, k)
    joint_cost = np.zeros(1)
    joint_usage = np.zeros((1, n_periods))
    for params, initial in portfolio:
        cost, usage = _driver_table(params, initial, candidates, n_periods, grid.y_max)
        joint_cost = (joint_cost[:, None] + cost[None, :]).reshape(-1)
        joint_usage = (joint_usage[:, None, :] + usage[None, :, :]).reshape(-1, n_periods)
    feasible = np.all(joint_usage <= cfg.budget + 1e-9 * max(1.0, cfg.budget), axis=1)
    masked = np.where(feasible, joint_cost, np.inf)
    best = int(np.argmin(masked))
    digits = np.unravel_index(best, (k ** n_periods,) * len(portfolio))
    schedules = np.array([list(itertools.product(candidates, repeat=n_periods))[d] for d in digits])
    return schedules, float(masked[best])


def gap_bound(portfolio, grid: GridSpec, n_periods: int) -> float:
    """``(M + 1) * y_max + max premium``; the severity range stands in for the
    state-space diameter because ``p <= 1``."""
    return (n_periods + 1) * grid.y_max + max(params.premium for params, _ in portfolio)


def gap_report(portfolio, grid: GridSpec, cfg: SolverConfig, n_periods: int, seed: int = 0) -> GapReport:
    _, primal = exhaustive_primal(portfolio, grid, cfg, n_periods)
    res = solve(portfolio, grid, replace(cfg, subproblem="exact"), seed=seed, n_periods=n_periods)
    dual_value = res.best_dual_value
    return GapReport(len(portfolio), n_periods, primal, dual_value, primal - dual_value,
                     gap_bound(portfolio, grid, n_periods))


def measure_gap(base_instance, replication_counts, grid: GridSpec, cfg: SolverConfig,
                seed: int = 0, n_periods: int = 2) -> list[GapReport]:
    """Gap for the base drivers copied ``N`` times with budget ``N * cfg.budget``."""
    counts = list(replication_counts)
    for n in counts:
        if n < 1:
            raise ValueError("replication counts must be >= 1")
        _check_cap(n * len(base_instance), n_periods, grid.discount_candidates)
    reports = []
    for n in counts:
        replicated = list(base_instance) * n
        reports.append(gap_report(replicated, grid, replace(cfg, budget=n * cfg.budget), n_periods, seed))
    return reports


__all__ = ["GapReport", "exhaustive_primal", "measure_gap", "gap_report", "gap_bound", "search_bits",
           "SEARCH_CAP_BITS"]
