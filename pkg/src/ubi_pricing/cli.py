"""Command-line entry point: ``ubi-pricing <command> [--config FILE] ...``.

Each command writes into an output directory (``--out``, else
``$UBI_PRICING_OUT/<command>``, else ``runs/<command>``) together with
``config.json``, the fully resolved configuration.  Outputs depend only on the
config, the input files and the seed; numbers are written with 17 significant
digits so reruns are byte-identical.

Exit codes of ``optimize``: 0 converged, 3 stopped at the iteration cap with a
feasible iterate, 4 no feasible iterate so the schedule was budget-repaired.
Any command exits with 1 on invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import config as config_mod
from .dual import portfolio_arrays, solve
from .dynamics import DriverParams, DriverState
from .estimator import ObservationSeries, fit
from .gapcheck import measure_gap
from .portfolio import (default_budget, default_y_max, generate, no_incentive_baseline, run_experiment,
                        warmup)

log = logging.getLogger("ubi_pricing")

OUT_ENV = "UBI_PRICING_OUT"
PORTFOLIO_COLUMNS = ["id", "beta_p", "beta_y", "theta_p", "theta_y", "baseline_p", "baseline_y",
                     "premium", "p0", "y0"]
OBSERVATION_COLUMNS = ["id", "period", "discount", "observed_p", "observed_y", "premium"]
EXPERIMENT_COLUMNS = ["year", "expected_claim_cost", "reward_outlay", "total_loss", "mean_claim_prob"]
FIT_COLUMNS = ["id", "objective", "beta_p", "beta_y", "theta_p", "theta_y", "baseline_p", "baseline_y",
               "premium", "p0", "y0", "warnings"]
HISTORY_COLUMNS = ["iteration", "dual_value", "primal_cost", "max_violation", "lambda_step", "feasible"]
GAP_COLUMNS = ["n", "n_periods", "primal_optimum", "dual_value", "gap", "gap_per_driver", "bound"]

EXIT_CONVERGED, EXIT_INVALID, EXIT_CAPPED, EXIT_REPAIRED = 0, 1, 3, 4


class InputError(ValueError):
    pass


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_rows(path: Path, columns: list[str]) -> list[tuple[int, dict[str, str]]]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InputError(f"{path}: file is empty")
        missing = [c for c in columns if c not in reader.fieldnames]
        if missing:
            raise InputError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = [(reader.line_num, row) for row in reader]
    if not rows:
        raise InputError(f"{path}: no data rows")
    return rows


def _floats(row: dict[str, str], names: list[str], where: str) -> list[float]:
    try:
        return [float(row[n]) for n in names]
    except (TypeError, ValueError) as exc:
        raise InputError(f"{where}: {exc}") from exc


def save_portfolio(path: Path, portfolio) -> None:
    write_csv(path, PORTFOLIO_COLUMNS, (
        [i, par.beta_p, par.beta_y, par.theta_p, par.theta_y, par.baseline_p, par.baseline_y, par.premium,
         st.p, st.y] for i, (par, st) in enumerate(portfolio)))


def load_portfolio(path: Path):
    portfolio = []
    for line, row in _read_rows(path, PORTFOLIO_COLUMNS):
        where = f"{path}:{line}"
        v = _floats(row, PORTFOLIO_COLUMNS[1:], where)
        try:
            portfolio.append((DriverParams(*v[:7]), DriverState(v[7], v[8])))
        except ValueError as exc:
            raise InputError(f"{where}: {exc}") from exc
    return portfolio


def load_observations(path: Path) -> tuple[list[str], list[ObservationSeries], list[float]]:
    grouped: dict[str, list] = defaultdict(list)
    premiums: dict[str, float] = {}
    for line, row in _read_rows(path, OBSERVATION_COLUMNS):
        where = f"{path}:{line}"
        period, c, p, y, premium = _floats(row, OBSERVATION_COLUMNS[1:], where)
        key = row["id"]
        if key in premiums and premiums[key] != premium:
            raise InputError(f"{where}: premium differs from earlier rows of driver {key}")
        premiums[key] = premium
        grouped[key].append((period, c, p, y, line))
    ids, series, prem = [], [], []
    for key, rows in grouped.items():
        rows.sort()
        try:
            series.append(ObservationSeries([r[2] for r in rows], [r[3] for r in rows], [r[1] for r in rows]))
        except ValueError as exc:
            raise InputError(f"{path}:{rows[0][4]}: driver {key}: {exc}") from exc
        if premiums[key] <= 0:
            raise InputError(f"{path}:{rows[0][4]}: driver {key}: premium must be > 0")
        ids.append(key)
        prem.append(premiums[key])
    return ids, series, prem


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _y_max(cfg, portfolio) -> float:
    return cfg.scenario.y_max if cfg.scenario.y_max is not None else default_y_max(portfolio)


def _budget(cfg, portfolio) -> float:
    if cfg.scenario.budget is not None:
        return cfg.scenario.budget
    return default_budget(portfolio, cfg.scenario.budget_fraction)


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    portfolio = generate(cfg.scenario.n_drivers, cfg.ranges.to_ranges(), cfg.seed)
    y_max = _y_max(cfg, portfolio)
    warm = warmup(portfolio, cfg.seed, periods=cfg.scenario.warmup_periods, budget=_budget(cfg, portfolio),
                  noise=cfg.scenario.noise, eta=cfg.scenario.eta, y_max=y_max)
    out = _out_dir(args, "generate")
    save_portfolio(out / "portfolio.csv", portfolio)
    rows = []
    for i, (series, (par, _)) in enumerate(zip(warm.series(), portfolio)):
        for t in range(len(series)):
            rows.append([i, t, series.discounts[t], series.observed_p[t], series.observed_y[t], par.premium])
    write_csv(out / "observations.csv", OBSERVATION_COLUMNS, rows)
    config_mod.dump(cfg, out / "config.json")
    print(out / "portfolio.csv")
    return 0


def _fit_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1)[0])


def cmd_estimate(args) -> int:
    cfg = _resolve(args)
    ids, series, premiums = load_observations(Path(args.observations))
    largest = max(max(s.observed_y) for s in series)
    y_max = cfg.scenario.y_max if cfg.scenario.y_max is not None else 1.25 * largest
    if largest > y_max:
        raise InputError(f"observed amount {largest} exceeds scenario.y_max {y_max}")
    est_cfg = cfg.estimator_config(y_max)
    results = [fit(s, prem, est_cfg, seed=_fit_seed(cfg.seed, i)) for i, (s, prem) in enumerate(zip(series, premiums))]
    out = _out_dir(args, "estimate")
    write_csv(out / "fits.csv", FIT_COLUMNS, (
        [key, r.objective, r.params.beta_p, r.params.beta_y, r.params.theta_p, r.params.theta_y,
         r.params.baseline_p, r.params.baseline_y, r.params.premium, r.initial_state.p, r.initial_state.y,
         ";".join(r.warnings)] for key, r in zip(ids, results)))
    write_json(out / "summary.json", {
        "drivers": len(results),
        "mean_objective": float(np.mean([r.objective for r in results])),
        "max_objective": float(np.max([r.objective for r in results])),
        "low_excitation": sum("low_excitation" in r.warnings for r in results),
        "degenerate": sum("degenerate" in r.warnings for r in results),
        "y_max": y_max,
    })
    config_mod.dump(cfg, out / "config.json")
    print(out / "fits.csv")
    return 0


def cmd_optimize(args) -> int:
    cfg = _resolve(args)
    portfolio = load_portfolio(Path(args.portfolio))
    y_max = _y_max(cfg, portfolio)
    if max(st.y for _, st in portfolio) > y_max:
        raise InputError("an initial claim amount exceeds scenario.y_max")
    n_periods = cfg.scenario.horizon_T - 1 - cfg.scenario.start
    grid = cfg.grid_spec(y_max)
    res = solve(portfolio, grid, cfg.solver_config(_budget(cfg, portfolio)), seed=cfg.seed,
                threads=args.threads, n_periods=n_periods)
    pars, inits = portfolio_arrays(portfolio)
    zero = zero_discount_costs(pars, inits, n_periods, y_max)
    out = _out_dir(args, "optimize")
    periods = range(cfg.scenario.start, cfg.scenario.start + n_periods)
    write_csv(out / "schedules.csv", ["id"] + [f"c_{t}" for t in periods] + ["realized_cost", "zero_discount_cost"],
              ([i, *res.schedules[i], res.realized[i], zero[i]] for i in range(len(portfolio))))
    write_csv(out / "history.csv", HISTORY_COLUMNS, ([h[k] for k in HISTORY_COLUMNS] for h in res.history))
    # wall time is kept apart so history.csv stays byte-reproducible
    write_csv(out / "timing.csv", ["iteration", "wall_time"], ([h["iteration"], h["wall_time"]] for h in res.history))
    write_csv(out / "lambdas.csv", ["period", "lambda", "usage"],
              ([t, lam, u] for t, lam, u in zip(periods, res.dual.lambdas, res.usage)))
    write_json(out / "summary.json", {
        "converged": res.converged, "repaired": res.repaired, "iterations": len(res.history),
        "total_cost": res.total_cost, "zero_discount_cost": float(zero.sum()),
        "best_dual_value": res.best_dual_value, "budget": _budget(cfg, portfolio), "y_max": y_max,
    })
    config_mod.dump(cfg, out / "config.json")
    print(out / "schedules.csv")
    if res.converged:
        return EXIT_CONVERGED
    return EXIT_REPAIRED if res.repaired else EXIT_CAPPED


def zero_discount_costs(pars: np.ndarray, inits: np.ndarray, n_periods: int, y_max: float) -> np.ndarray:
    p, y = inits[:, 0].copy(), inits[:, 1].copy()
    total = np.zeros(len(pars))
    for _ in range(n_periods):
        p = np.clip(pars[:, 2] * (p - pars[:, 4]) + pars[:, 4], 0.0, 1.0)
        y = np.clip(pars[:, 3] * (y - pars[:, 5]) + pars[:, 5], 0.0, y_max)
        total += p * y
    return total


def _year_rows(report):
    return ([r.year, r.expected_claim_cost, r.reward_outlay, r.total_loss, r.mean_claim_prob]
            for r in report.per_year)


def cmd_experiment(args) -> int:
    cfg = _resolve(args)
    sc = cfg.scenario
    portfolio = generate(sc.n_drivers, cfg.ranges.to_ranges(), cfg.seed)
    y_max = _y_max(cfg, portfolio)
    grid = cfg.grid_spec(y_max)
    report = run_experiment(portfolio, grid, cfg.solver_config(_budget(cfg, portfolio)),
                            cfg.estimator_config(y_max), sc.horizon_T, mode=sc.mode, seed=cfg.seed,
                            warmup_periods=sc.warmup_periods, noise=sc.noise, threads=args.threads)
    baseline = no_incentive_baseline(portfolio, sc.horizon_T, y_max=y_max)
    out = _out_dir(args, "experiment")
    write_csv(out / "experiment.csv", EXPERIMENT_COLUMNS, _year_rows(report))
    write_csv(out / "baseline.csv", EXPERIMENT_COLUMNS, _year_rows(baseline))
    write_csv(out / "claim_probability.csv", ["year", "mean_claim_prob"],
              ([r.year, r.mean_claim_prob] for r in report.per_year))
    write_json(out / "summary.json", {
        "baseline_total_loss": report.baseline_total_loss,
        "mean_subsequent_loss": report.mean_subsequent_loss,
        "reduction_fraction": report.reduction_fraction,
        "budget": _budget(cfg, portfolio), "y_max": y_max, "solves": report.solves,
    })
    config_mod.dump(cfg, out / "config.json")
    print(f"reduction_fraction {report.reduction_fraction:.6f}")
    return 0


def cmd_gap(args) -> int:
    cfg = _resolve(args)
    g = cfg.gap
    base = generate(g.base_drivers, cfg.ranges.to_ranges(), cfg.seed)
    y_max = _y_max(cfg, base)
    grid = cfg.grid_spec(y_max, discount_candidates=g.discount_candidates)
    b = default_budget(base, g.budget_fraction)
    try:
        reports = measure_gap(base, g.replication_counts, grid, cfg.solver_config(b), seed=cfg.seed,
                              n_periods=g.n_periods)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = _out_dir(args, "gap")
    write_csv(out / "gap.csv", GAP_COLUMNS, ([r.n, r.n_periods, r.primal_optimum, r.dual_value, r.gap,
                                              r.gap_per_driver, r.bound] for r in reports))
    config_mod.dump(cfg, out / "config.json")
    print(out / "gap.csv")
    return 0


def cmd_config_reference(args) -> int:
    text = config_mod.config_reference()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ubi-pricing", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="JSON config (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("generate", help="synthetic portfolio and warmup observations")
    common(p)
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("estimate", help="fit every driver in an observations CSV")
    common(p)
    p.add_argument("observations", help=f"CSV with columns {', '.join(OBSERVATION_COLUMNS)}")
    p.set_defaults(func=cmd_estimate)
    p = sub.add_parser("optimize", help="one dual solve from a portfolio's initial states")
    common(p)
    p.add_argument("portfolio", help=f"CSV with columns {', '.join(PORTFOLIO_COLUMNS)}")
    p.set_defaults(func=cmd_optimize)
    p = sub.add_parser("experiment", help="full receding-horizon run")
    common(p)
    p.set_defaults(func=cmd_experiment)
    p = sub.add_parser("gap", help="duality gap on replicated tiny instances")
    common(p)
    p.set_defaults(func=cmd_gap)
    p = sub.add_parser("config-reference", help="print the documented config defaults")
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_config_reference)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (InputError, ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
