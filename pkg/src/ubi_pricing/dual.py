"""Lagrangian dual decomposition over the per-period budget constraints.

Relaxing ``sum_i c[i, t] * B_i <= budget`` with multipliers ``lam[t] >= 0``
splits the portfolio problem into independent driver subproblems (see
:mod:`ubi_pricing.dp`).  The outer loop here evaluates the dual function,
moves the multipliers by projected subgradient ascent and keeps the cheapest
budget-feasible iterate.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import dp
from .dp import GridSpec
from .dynamics import DriverParams, DriverState, next_p, next_y

log = logging.getLogger(__name__)

SUBPROBLEM_METHODS = ("grid", "exact")


@dataclass(frozen=True)
class SolverConfig:
    """Outer-loop settings.

    ``step_size`` is the initial step ``alpha_0``; ``None`` picks
    ``1 / (N * max premium * eta)`` so the first update moves the multipliers
    by O(1).  ``eps_feasibility`` of ``None`` means 0.1% of the budget.
    """

    budget: float
    eta: float = 0.2
    step_size: float | None = None
    step_decay: float = 0.5
    eps_feasibility: float | None = None
    eps_lambda: float = 1e-3
    max_outer_iterations: int = 60
    subproblem: str = "grid"

    def __post_init__(self):
        if not np.isfinite(self.budget) or self.budget < 0:
            raise ValueError("budget must be finite and >= 0")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.eps_feasibility is not None and self.eps_feasibility <= 0:
            raise ValueError("eps_feasibility must be > 0")
        if self.eps_lambda <= 0:
            raise ValueError("eps_lambda must be > 0")
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if self.subproblem not in SUBPROBLEM_METHODS:
            raise ValueError(f"subproblem must be one of {SUBPROBLEM_METHODS}")

    @property
    def feasibility_tol(self) -> float:
        if self.eps_feasibility is not None:
            return self.eps_feasibility
        return max(1e-3 * self.budget, 1e-9)


@dataclass
class DualState:
    lambdas: np.ndarray
    iteration: int = 0
    usage: np.ndarray | None = None
    dual_value: float = -np.inf

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if np.any(self.lambdas < 0) or not np.all(np.isfinite(self.lambdas)):
            raise ValueError("multipliers must be finite and >= 0")


@dataclass
class DualEvaluation:
    schedules: np.ndarray    # (N, M)
    usage: np.ndarray        # (M,)
    dual_value: float
    states: np.ndarray       # (N, M + 1, 2)
    realized: np.ndarray     # (N,)
    penalized: np.ndarray    # (N,)


@dataclass
class SolveResult:
    schedules: np.ndarray
    states: np.ndarray
    realized: np.ndarray
    usage: np.ndarray
    dual: DualState
    converged: bool
    repaired: bool
    history: list[dict] = field(default_factory=list)
    best_dual_value: float = -np.inf
    best_iteration: int = -1

    @property
    def total_cost(self) -> float:
        return float(self.realized.sum())


def portfolio_arrays(portfolio: Sequence[tuple[DriverParams, DriverState]]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``(params, state)`` pairs into (N, 7) and (N, 2) arrays."""
    if len(portfolio) == 0:
        raise ValueError("portfolio is empty")
    pars = np.array([params.as_array() for params, _ in portfolio])
    inits = np.array([[state.p, state.y] for _, state in portfolio], dtype=np.float64)
    return pars, inits


def _unpack(portfolio):
    if isinstance(portfolio, tuple) and len(portfolio) == 2 and isinstance(portfolio[0], np.ndarray):
        pars, inits = portfolio
        if pars.shape[0] == 0:
            raise ValueError("portfolio is empty")
        return pars, inits
    return portfolio_arrays(portfolio)


class _ExactSubproblems:
    """Enumerated candidate schedules per driver, reused across multiplier updates."""

    def __init__(self, pars, inits, grid: GridSpec, n_periods: int):
        self.tables = []
        for par, init in zip(pars, inits):
            params = DriverParams(*par)
            self.tables.append(dp.enumerate_schedules(params, DriverState(*init), grid.candidates,
                                                      n_periods, grid.y_max))

    def solve(self, lam: np.ndarray, pars, inits, y_max: float):
        n = len(self.tables)
        m = lam.shape[0]
        sched = np.zeros((n, m))
        realized = np.zeros(n)
        penalized = np.zeros(n)
        for i, (schedules, cost, usage) in enumerate(self.tables):
            pen = cost + usage @ lam
            j = int(np.argmin(pen))
            sched[i] = schedules[j]
            realized[i] = cost[j]
            penalized[i] = pen[j]
        states = _roll_states(pars, inits, sched, y_max)
        return sched, states, realized, penalized


def _roll_states(pars, inits, sched, y_max):
    n, m = sched.shape
    states = np.zeros((n, m + 1, 2))
    for i in range(n):
        par = pars[i]
        p, y = inits[i]
        states[i, 0] = p, y
        for t in range(m):
            p = next_p(p, sched[i, t], par[0], par[2], par[4])
            y = next_y(y, sched[i, t], par[1], par[3], par[5], y_max)
            states[i, t + 1] = p, y
    return states


def _realized_costs(pars, states, sched):
    claims = states[:, 1:, 0] * states[:, 1:, 1]
    return (sched * pars[:, 6:7] + claims).sum(axis=1)


def evaluate_dual(portfolio, dual: DualState, grid: GridSpec, cfg: SolverConfig,
                  threads: int = 1, _exact: _ExactSubproblems | None = None) -> DualEvaluation:
    """Solve every driver's penalized subproblem at ``dual.lambdas``.

    ``dual_value = sum_i penalized_i - budget * sum_t lam_t`` is the
    Lagrangian at the returned schedules.
    """
    pars, inits = _unpack(portfolio)
    lam = dual.lambdas
    if cfg.subproblem == "exact":
        exact = _exact or _ExactSubproblems(pars, inits, grid, lam.shape[0])
        sched, states, realized, penalized = exact.solve(lam, pars, inits, grid.y_max)
    else:
        sol = dp.solve_drivers(pars, inits, lam, grid, threads=threads)
        sched, states, realized, penalized = sol.schedules, sol.states, sol.realized, sol.penalized
    usage = (sched * pars[:, 6:7]).sum(axis=0)
    dual_value = float(penalized.sum() - cfg.budget * lam.sum())
    return DualEvaluation(sched, usage, dual_value, states, realized, penalized)


def subgradient_step(dual: DualState, usage: np.ndarray, cfg: SolverConfig) -> DualState:
    """``lam <- max(0, lam + alpha_k * (usage - budget))`` with a decaying step."""
    usage = np.asarray(usage, dtype=np.float64)
    if usage.shape != dual.lambdas.shape:
        raise ValueError("usage length must match the multipliers")
    if cfg.step_size is None:
        raise ValueError("step_size must be resolved before stepping (see resolve_step_size)")
    alpha = cfg.step_size / (1.0 + dual.iteration) ** cfg.step_decay
    lam = np.maximum(0.0, dual.lambdas + alpha * (usage - cfg.budget))
    return DualState(lam, iteration=dual.iteration + 1, usage=usage, dual_value=dual.dual_value)


def resolve_step_size(cfg: SolverConfig, pars: np.ndarray) -> SolverConfig:
    if cfg.step_size is not None:
        return cfg
    alpha0 = 1.0 / (pars.shape[0] * float(pars[:, 6].max()) * cfg.eta)
    return replace(cfg, step_size=alpha0)


def repair(pars, inits, sched, budget: float, grid: GridSpec) -> np.ndarray:
    """Cut discounts until every period's usage fits the budget.

    Within an over-spent period, discounts are withdrawn first from drivers
    paying the most reward per unit of one-step claim reduction.  The last
    withdrawn driver keeps the largest candidate discount that still fits.
    Drivers whose repaired schedule loses to no discount at all get zeros.
    """
    sched = sched.copy()
    n, m = sched.shape
    cands = grid.candidates
    premium = pars[:, 6]
    for t in range(m):
        usage = float(sched[:, t] @ premium)
        if usage <= budget:
            continue
        states = _roll_states(pars, inits, sched, grid.y_max)
        active = np.flatnonzero(sched[:, t] > 0)
        ratios = np.empty(active.shape[0])
        for j, i in enumerate(active):
            par = pars[i]
            p, y = states[i, t]
            c = sched[i, t]
            claims0 = next_p(p, 0.0, par[0], par[2], par[4]) * next_y(y, 0.0, par[1], par[3], par[5], grid.y_max)
            claims_c = next_p(p, c, par[0], par[2], par[4]) * next_y(y, c, par[1], par[3], par[5], grid.y_max)
            ratios[j] = premium[i] * c / max(claims0 - claims_c, 1e-12)
        order = active[np.argsort(-ratios, kind="stable")]
        for i in order:
            excess = usage - budget
            if excess <= 0:
                break
            spend = sched[i, t] * premium[i]
            if spend <= excess:
                sched[i, t] = 0.0
                usage -= spend
            else:
                allowed = (spend - excess) / premium[i]
                keep = cands[cands <= allowed + 1e-15].max()
                usage -= (sched[i, t] - keep) * premium[i]
                sched[i, t] = keep
    states = _roll_states(pars, inits, sched, grid.y_max)
    realized = _realized_costs(pars, states, sched)
    zero = _realized_costs(pars, _roll_states(pars, inits, np.zeros_like(sched), grid.y_max), np.zeros_like(sched))
    sched[realized > zero] = 0.0
    return sched


def solve(portfolio, grid: GridSpec, cfg: SolverConfig, seed: int = 0, threads: int = 1,
          initial_lambdas: Sequence[float] | None = None, n_periods: int | None = None) -> SolveResult:
    """Projected subgradient ascent on the dual; returns the best feasible iterate.

    ``n_periods`` (or the length of ``initial_lambdas``) sets the horizon
    ``T - s``.  ``seed`` is accepted for interface symmetry; the algorithm
    itself is deterministic.
    """
    del seed
    pars, inits = _unpack(portfolio)
    if initial_lambdas is None:
        if n_periods is None:
            raise ValueError("give n_periods or initial_lambdas")
        lam0 = np.zeros(n_periods)
    else:
        lam0 = np.asarray(initial_lambdas, dtype=np.float64).copy()
    m = lam0.shape[0]
    cfg = resolve_step_size(cfg, pars)
    tol = cfg.feasibility_tol
    exact = _ExactSubproblems(pars, inits, grid, m) if cfg.subproblem == "exact" else None

    dual = DualState(lam0)
    history: list[dict] = []
    best = None
    best_dual = -np.inf
    best_dual_iter = -1
    converged = False
    ev = None
    t_start = time.perf_counter()
    for k in range(cfg.max_outer_iterations):
        ev = evaluate_dual((pars, inits), dual, grid, cfg, threads=threads, _exact=exact)
        if ev.dual_value > best_dual:
            best_dual = ev.dual_value
            best_dual_iter = k
        violation = ev.usage - cfg.budget
        feasible = bool(np.all(violation <= tol))
        cost = float(ev.realized.sum())
        if feasible and (best is None or cost < best[1]):
            best = (ev, cost, dual.lambdas.copy())
        new = subgradient_step(replace(dual, dual_value=ev.dual_value), ev.usage, cfg)
        moved = float(np.linalg.norm(new.lambdas - dual.lambdas))
        history.append({
            "iteration": k,
            "dual_value": ev.dual_value,
            "primal_cost": cost,
            "max_violation": float(violation.max()) if m else 0.0,
            "lambda_step": moved,
            "feasible": feasible,
            "wall_time": time.perf_counter() - t_start,
        })
        slack_ok = bool(np.all((dual.lambdas <= cfg.eps_lambda) | (-violation <= tol)))
        if feasible and slack_ok and moved <= cfg.eps_lambda:
            converged = True
            dual = replace(dual, usage=ev.usage, dual_value=ev.dual_value)
            break
        dual = new
    log.debug("dual solve: %d iterations, converged=%s", len(history), converged)

    if best is not None:
        ev_best, _, lam_best = best
        final_dual = DualState(lam_best, iteration=len(history), usage=ev_best.usage,
                               dual_value=ev_best.dual_value)
        return SolveResult(ev_best.schedules, ev_best.states, ev_best.realized, ev_best.usage, final_dual,
                           converged=converged, repaired=False, history=history,
                           best_dual_value=best_dual, best_iteration=best_dual_iter)

    sched = repair(pars, inits, ev.schedules, cfg.budget, grid)
    states = _roll_states(pars, inits, sched, grid.y_max)
    realized = _realized_costs(pars, states, sched)
    usage = (sched * pars[:, 6:7]).sum(axis=0)
    return SolveResult(sched, states, realized, usage, replace(dual, usage=usage), converged=False,
                       repaired=True, history=history, best_dual_value=best_dual,
                       best_iteration=best_dual_iter)
