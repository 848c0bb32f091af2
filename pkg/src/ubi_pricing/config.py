"""Run configuration: nested dataclasses loaded from JSON.

Every field has a default, unknown keys are rejected, and
:func:`config_reference` renders the documented defaults as Markdown.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dp import GridSpec
from .dual import SolverConfig
from .estimator import EstimatorConfig
from .portfolio import MODES, GenerationRanges


def _doc(text: str, default=dataclasses.MISSING, factory=dataclasses.MISSING):
    if factory is not dataclasses.MISSING:
        return field(default_factory=factory, metadata={"doc": text})
    return field(default=default, metadata={"doc": text})


@dataclass
class ScenarioSection:
    n_drivers: int = _doc("portfolio size", 1000)
    horizon_T: int = _doc("number of report years 0..T-1", 8)
    start: int = _doc("first decision index solved by `optimize`", 0)
    budget: float | None = _doc("per-period reward budget; null uses budget_fraction", None)
    budget_fraction: float = _doc("per-period budget as a fraction of total premium", 0.03)
    eta: float = _doc("discount cap (fraction of premium)", 0.2)
    y_max: float | None = _doc("severity cap; null uses 1.25 x the largest baseline or initial amount", None)
    warmup_periods: int = _doc("random-discount periods before the first solve", 1)
    noise: float = _doc("half-width of uniform observation noise (amounts scale by y_max)", 0.0)
    mode: str = _doc("`oracle-params` or `estimated-params`", "oracle-params")

    def validate(self):
        if self.n_drivers < 1:
            raise ValueError("scenario.n_drivers must be >= 1")
        if self.horizon_T < 2:
            raise ValueError("scenario.horizon_T must be >= 2")
        if not 0 <= self.start <= self.horizon_T - 2:
            raise ValueError("scenario.start must lie in [0, horizon_T - 2]")
        if self.budget is not None and self.budget < 0:
            raise ValueError("scenario.budget must be >= 0")
        if self.budget_fraction < 0:
            raise ValueError("scenario.budget_fraction must be >= 0")
        if not 0 < self.eta <= 1:
            raise ValueError("scenario.eta must lie in (0, 1]")
        if self.y_max is not None and self.y_max <= 0:
            raise ValueError("scenario.y_max must be > 0")
        if self.warmup_periods < 1:
            raise ValueError("scenario.warmup_periods must be >= 1")
        if self.noise < 0:
            raise ValueError("scenario.noise must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"scenario.mode must be one of {MODES}")


@dataclass
class GridSection:
    p_nodes: int = _doc("grid nodes along the claim-probability axis", 41)
    y_nodes: int = _doc("grid nodes along the claim-amount axis", 41)
    discount_candidates: int = _doc("evenly spaced discount levels in [0, eta]", 21)
    refine: bool = _doc("golden-section refinement around the best discrete level", False)


@dataclass
class SolverSection:
    step_size: float | None = _doc("initial subgradient step; null uses 1 / (N * max premium * eta)", None)
    step_decay: float = _doc("step exponent: alpha_k = alpha_0 / (1 + k)^decay", 0.5)
    eps_feasibility: float | None = _doc("allowed budget overrun per period; null uses 0.1% of budget", None)
    eps_lambda: float = _doc("multiplier stopping threshold", 1e-3)
    max_outer_iterations: int = _doc("subgradient iteration cap", 60)
    subproblem: str = _doc("`grid` (DP) or `exact` (enumeration, tiny instances only)", "grid")


@dataclass
class EstimatorSection:
    loss_weight: float | None = _doc("weight on amount residuals; null uses 1 / mean observed amount", None)
    multistart_count: int = _doc("coordinate-descent starts per parameter block", 6)
    max_iterations: int = _doc("sweeps per start", 60)
    tolerance: float = _doc("stop a start when a sweep improves less than this", 1e-12)


@dataclass
class RangesSection:
    beta_range: list[float] = _doc("uniform range of both sensitivities", factory=lambda: [1.0, 1.5])
    theta_range: list[float] = _doc("uniform range of both reversion rates", factory=lambda: [0.1, 0.5])
    premium_range: list[float] = _doc("uniform range of premiums", factory=lambda: [600.0, 1000.0])
    baseline_p_range: list[float] = _doc("uniform range of baseline claim probabilities",
                                         factory=lambda: [0.02, 0.08])
    baseline_y_range: list[float] = _doc("uniform range of baseline claim amounts",
                                         factory=lambda: [2000.0, 10000.0])

    def to_ranges(self) -> GenerationRanges:
        return GenerationRanges(**{name: tuple(getattr(self, name)) for name in
                                   ("beta_range", "theta_range", "premium_range", "baseline_p_range",
                                    "baseline_y_range")})


@dataclass
class GapSection:
    base_drivers: int = _doc("drivers in the base instance", 1)
    replication_counts: list[int] = _doc("copies of the base instance to test", factory=lambda: [1, 2, 3])
    n_periods: int = _doc("decisions per driver (M)", 2)
    discount_candidates: int = _doc("discount levels searched by both oracle and dual", 5)
    budget_fraction: float = _doc("per-copy budget as a fraction of base-instance premium", 0.05)


@dataclass
class RunConfig:
    seed: int = _doc("master seed", 0)
    scenario: ScenarioSection = _doc("horizon, budget and experiment mode", factory=ScenarioSection)
    grid: GridSection = _doc("DP grid", factory=GridSection)
    solver: SolverSection = _doc("dual subgradient solver", factory=SolverSection)
    estimator: EstimatorSection = _doc("parameter estimator", factory=EstimatorSection)
    ranges: RangesSection = _doc("portfolio generation ranges", factory=RangesSection)
    gap: GapSection = _doc("duality-gap check", factory=GapSection)

    def validate(self) -> "RunConfig":
        self.scenario.validate()
        self.ranges.to_ranges()
        self.grid_spec(1.0)
        self.solver_config(0.0)
        self.estimator_config(1.0)
        if self.gap.base_drivers < 1 or self.gap.n_periods < 1 or not self.gap.replication_counts:
            raise ValueError("gap.base_drivers, gap.n_periods and gap.replication_counts must be positive")
        return self

    def grid_spec(self, y_max: float, discount_candidates: int | None = None) -> GridSpec:
        k = self.grid.discount_candidates if discount_candidates is None else discount_candidates
        return GridSpec(p_nodes=self.grid.p_nodes, y_nodes=self.grid.y_nodes, y_max=y_max,
                        discount_candidates=k, eta=self.scenario.eta, refine=self.grid.refine)

    def solver_config(self, budget: float) -> SolverConfig:
        s = self.solver
        return SolverConfig(budget=budget, eta=self.scenario.eta, step_size=s.step_size,
                            step_decay=s.step_decay, eps_feasibility=s.eps_feasibility,
                            eps_lambda=s.eps_lambda, max_outer_iterations=s.max_outer_iterations,
                            subproblem=s.subproblem)

    def estimator_config(self, y_max: float) -> EstimatorConfig:
        e = self.estimator
        return EstimatorConfig(loss_weight=e.loss_weight, multistart_count=e.multistart_count,
                               max_iterations=e.max_iterations, tolerance=e.tolerance, y_max=y_max)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"{path or 'config'} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING \
            else known[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    with open(path, encoding="utf-8") as fh:
        return from_dict(json.load(fh))


def dump(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def config_reference() -> str:
    """Markdown table of every key, its default and meaning."""
    lines = ["# Configuration reference", "",
             "Generated by `ubi-pricing config-reference`. Every key is optional; unknown keys are rejected.", ""]

    def section(cls, prefix):
        rows = []
        for f in dataclasses.fields(cls):
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
            if dataclasses.is_dataclass(default):
                continue
            rows.append(f"| `{prefix}{f.name}` | `{json.dumps(default)}` | {f.metadata.get('doc', '')} |")
        return rows

    lines += ["| key | default | meaning |", "|---|---|---|"]
    lines += section(RunConfig, "")
    for f in dataclasses.fields(RunConfig):
        if f.default_factory is not dataclasses.MISSING:
            lines += section(type(f.default_factory()), f"{f.name}.")
    return "\n".join(lines) + "\n"
