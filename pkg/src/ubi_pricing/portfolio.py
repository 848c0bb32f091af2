"""Synthetic portfolios and the receding-horizon discount program.

Years are numbered ``0..T-1``.  Year 0 is observed before any incentive; the
discount decided at index ``k`` is paid in year ``k + 1`` and moves the state
observed in that year.  The first ``warmup_periods`` decisions are random;
every later year re-solves the remaining horizon and applies only its first
decision to the true dynamics.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dp import GridSpec
from .dual import SolverConfig, portfolio_arrays, solve
from .dynamics import DriverParams, DriverState
from .estimator import EstimatorConfig, ObservationSeries, fit

log = logging.getLogger(__name__)

Portfolio = list[tuple[DriverParams, DriverState]]
MODES = ("oracle-params", "estimated-params")

# stream purposes mixed into each per-driver seed
_GENERATE, _WARMUP, _NOISE, _FIT = 0, 1, 2, 3


def _driver_rng(seed: int, purpose: int, index: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, index, *extra)))


@dataclass(frozen=True)
class GenerationRanges:
    beta_range: tuple[float, float] = (1.0, 1.5)
    theta_range: tuple[float, float] = (0.1, 0.5)
    premium_range: tuple[float, float] = (600.0, 1000.0)
    baseline_p_range: tuple[float, float] = (0.02, 0.08)
    baseline_y_range: tuple[float, float] = (2000.0, 10000.0)

    def __post_init__(self):
        for name in ("beta_range", "theta_range", "premium_range", "baseline_p_range", "baseline_y_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi or lo < 0:
                raise ValueError(f"{name} must satisfy 0 <= low <= high, got ({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.theta_range[0] <= 0 or self.theta_range[1] > 1:
            raise ValueError("theta_range must lie inside (0, 1]")
        if self.baseline_p_range[1] > 1:
            raise ValueError("baseline_p_range must lie inside [0, 1]")
        if self.premium_range[0] <= 0:
            raise ValueError("premium_range must be positive")


def generate(n: int, ranges: GenerationRanges, seed: int) -> Portfolio:
    """Independent uniform draws per driver; each driver starts at its baselines.

    Every driver consumes the same seven uniforms in a fixed order from its own
    stream, so two portfolios built with the same seed but different ranges are
    paired draw for draw.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lohi = (ranges.beta_range, ranges.beta_range, ranges.theta_range, ranges.theta_range,
            ranges.baseline_p_range, ranges.baseline_y_range, ranges.premium_range)
    out: Portfolio = []
    for i in range(n):
        u = _driver_rng(seed, _GENERATE, i).uniform(size=7)
        v = [lo + (hi - lo) * ui for (lo, hi), ui in zip(lohi, u)]
        params = DriverParams(beta_p=v[0], beta_y=v[1], theta_p=v[2], theta_y=v[3],
                              baseline_p=v[4], baseline_y=v[5], premium=v[6])
        out.append((params, params.baseline_state()))
    return out


def default_y_max(portfolio: Portfolio) -> float:
    """Severity cap shared by the grid and the simulator: 25% above the largest level present."""
    return 1.25 * max(max(params.baseline_y, state.y) for params, state in portfolio)


def default_budget(portfolio: Portfolio, fraction: float = 0.03) -> float:
    return fraction * sum(params.premium for params, _ in portfolio)


def _advance(pars: np.ndarray, states: np.ndarray, c: np.ndarray, y_max: float) -> np.ndarray:
    """True clamped dynamics for every driver at once."""
    out = np.empty_like(states)
    out[:, 0] = np.clip(-pars[:, 0] * c * states[:, 0] + pars[:, 2] * (states[:, 0] - pars[:, 4]) + pars[:, 4],
                        0.0, 1.0)
    out[:, 1] = np.clip(-pars[:, 1] * c * states[:, 1] + pars[:, 3] * (states[:, 1] - pars[:, 5]) + pars[:, 5],
                        0.0, y_max)
    return out


def _observe(states: np.ndarray, noise: float, y_max: float, seed: int, year: int) -> np.ndarray:
    if noise == 0:
        return states.copy()
    obs = states.copy()
    for i in range(states.shape[0]):
        u = _driver_rng(seed, _NOISE, i, year).uniform(-noise, noise, size=2)
        obs[i, 0] = min(max(states[i, 0] + u[0], 0.0), 1.0)
        obs[i, 1] = min(max(states[i, 1] + u[1] * y_max, 0.0), y_max)
    return obs


@dataclass
class WarmupResult:
    """Random-discount burn-in.

    ``discounts[i, k]`` is decision ``k`` for driver ``i``; ``true_states`` and
    ``observed`` hold years ``0..w`` (shape ``(w + 1, N, 2)``).
    """

    discounts: np.ndarray
    true_states: np.ndarray
    observed: np.ndarray

    def series(self) -> list[ObservationSeries]:
        """Per-driver observations; year 0 is preceded by a zero discount."""
        n, w = self.discounts.shape
        out = []
        for i in range(n):
            disc = np.concatenate([[0.0], self.discounts[i]])
            out.append(ObservationSeries(self.observed[:, i, 0], self.observed[:, i, 1], disc))
        return out


def warmup(portfolio: Portfolio, seed: int, periods: int = 1, budget: float | None = None,
           noise: float = 0.0, eta: float = 0.2, y_max: float | None = None) -> WarmupResult:
    """Apply ``periods`` rounds of uniform random discounts in ``[0, min(0.2, eta)]``.

    When ``budget`` is given, a round whose outlay exceeds it is scaled down
    proportionally so the program never overspends, even while exploring.
    Observations carry additive uniform noise of half-width ``noise`` (``noise * y_max``
    for amounts), clamped to the valid domain.
    """
    if periods < 1:
        raise ValueError("periods must be >= 1")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    pars, states = portfolio_arrays(portfolio)
    y_max = default_y_max(portfolio) if y_max is None else y_max
    cap = min(0.2, eta)
    n = len(portfolio)
    draws = np.array([_driver_rng(seed, _WARMUP, i).uniform(0.0, cap, size=periods) for i in range(n)])
    discounts = np.empty((n, periods))
    true_states = [states]
    for k in range(periods):
        c = draws[:, k].copy()
        if budget is not None:
            outlay = float(c @ pars[:, 6])
            if outlay > budget:
                c *= budget / outlay
        discounts[:, k] = c
        true_states.append(_advance(pars, true_states[-1], c, y_max))
    observed = np.stack([_observe(s, noise, y_max, seed, year) for year, s in enumerate(true_states)])
    return WarmupResult(discounts, np.stack(true_states), observed)


@dataclass(frozen=True)
class YearRecord:
    year: int
    expected_claim_cost: float
    reward_outlay: float
    total_loss: float
    mean_claim_prob: float


@dataclass
class ExperimentReport:
    per_year: list[YearRecord]
    solves: list[dict] = field(default_factory=list)

    @property
    def baseline_total_loss(self) -> float:
        return self.per_year[0].total_loss

    @property
    def mean_subsequent_loss(self) -> float:
        later = [r.total_loss for r in self.per_year[1:]]
        return sum(later) / len(later) if later else self.baseline_total_loss

    @property
    def reduction_fraction(self) -> float:
        base = self.baseline_total_loss
        if base == 0:
            return 0.0
        return (base - self.mean_subsequent_loss) / base


def _year_record(year: int, pars: np.ndarray, states: np.ndarray, c: np.ndarray | None) -> YearRecord:
    claims = float(np.sum(states[:, 0] * states[:, 1]))
    outlay = 0.0 if c is None else float(np.sum(c * pars[:, 6]))
    return YearRecord(year, claims, outlay, claims + outlay, float(np.mean(states[:, 0])))


def no_incentive_baseline(portfolio: Portfolio, horizon_T: int, y_max: float | None = None) -> ExperimentReport:
    """Every driver rolled with zero discounts for years ``0..T-1``."""
    if horizon_T < 1:
        raise ValueError("horizon_T must be >= 1")
    pars, states = portfolio_arrays(portfolio)
    y_max = default_y_max(portfolio) if y_max is None else y_max
    zero = np.zeros(len(portfolio))
    rows = [_year_record(0, pars, states, None)]
    for year in range(1, horizon_T):
        states = _advance(pars, states, zero, y_max)
        rows.append(_year_record(year, pars, states, zero))
    return ExperimentReport(rows)


def _fit_all(series: list[ObservationSeries], premiums: np.ndarray, cfg: EstimatorConfig, seed: int,
             year: int, threads: int) -> np.ndarray:
    def one(i):
        res = fit(series[i], float(premiums[i]), cfg, seed=int(np.random.SeedSequence(
            seed, spawn_key=(_FIT, i, year)).generate_state(1)[0]))
        return res.params.as_array()

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(len(series))))
    else:
        rows = [one(i) for i in range(len(series))]
    return np.array(rows)


def run_experiment(portfolio: Portfolio, grid: GridSpec, solver_cfg: SolverConfig,
                   estimator_cfg: EstimatorConfig | None, horizon_T: int, mode: str = "oracle-params",
                   seed: int = 0, warmup_periods: int = 1, noise: float = 0.0,
                   threads: int = 1) -> ExperimentReport:
    """Receding-horizon program over years ``0..T-1``.

    Each solve covers decisions ``s..T-2`` (the last year only receives the
    state left by the previous discount).  In ``estimated-params`` mode every
    driver is refit from all observations so far and the solver starts from the
    observed, not the true, state.
    """
    if horizon_T < 2:
        raise ValueError("horizon_T must be >= 2")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "estimated-params" and estimator_cfg is None:
        estimator_cfg = EstimatorConfig(y_max=grid.y_max)
    pars, _ = portfolio_arrays(portfolio)
    y_max = grid.y_max
    w = min(warmup_periods, horizon_T - 1)
    warm = warmup(portfolio, seed, periods=w, budget=solver_cfg.budget, noise=noise, eta=grid.eta, y_max=y_max)

    rows = [_year_record(0, pars, warm.true_states[0], None)]
    for k in range(w):
        rows.append(_year_record(k + 1, pars, warm.true_states[k + 1], warm.discounts[:, k]))
    true_state = warm.true_states[-1]
    obs_p = list(warm.observed[:, :, 0])
    obs_y = list(warm.observed[:, :, 1])
    disc_hist = [np.zeros(len(portfolio))] + [warm.discounts[:, k] for k in range(w)]

    solves = []
    for s in range(w, horizon_T - 1):
        if mode == "oracle-params":
            model, start = pars, true_state
        else:
            series = [ObservationSeries([o[i] for o in obs_p], [o[i] for o in obs_y], [d[i] for d in disc_hist])
                      for i in range(len(portfolio))]
            model = _fit_all(series, pars[:, 6], estimator_cfg, seed, s, threads)
            start = np.column_stack([obs_p[-1], np.minimum(obs_y[-1], y_max)])
        res = solve((model, start), grid, solver_cfg, seed=seed, threads=threads, n_periods=horizon_T - 1 - s)
        c = res.schedules[:, 0].copy()
        solves.append({
            "year": s,
            "iterations": len(res.history),
            "converged": res.converged,
            "repaired": res.repaired,
            "best_dual_value": res.best_dual_value,
            "usage": float(res.usage[0]),
            "history": [{k: v for k, v in h.items() if k != "wall_time"} for h in res.history],
        })
        if not res.converged:
            log.info("year %d: dual solve stopped without convergence (repaired=%s)", s, res.repaired)
        true_state = _advance(pars, true_state, c, y_max)
        rows.append(_year_record(s + 1, pars, true_state, c))
        noisy = _observe(true_state, noise, y_max, seed, s + 1)
        obs_p.append(noisy[:, 0])
        obs_y.append(noisy[:, 1])
        disc_hist.append(c)
    return ExperimentReport(rows, solves)


__all__ = ["GenerationRanges", "generate", "warmup", "WarmupResult", "run_experiment",
           "no_incentive_baseline", "ExperimentReport", "YearRecord", "default_y_max",
           "default_budget", "MODES"]
