import numpy as np
import pytest

from ubi_pricing.dp import GridSpec, enumerate_schedules
from ubi_pricing.dual import SolverConfig
from ubi_pricing.dynamics import DriverParams, DriverState, trajectory_cost
from ubi_pricing.gapcheck import exhaustive_primal, gap_bound, gap_report, measure_gap, search_bits
from ubi_pricing.portfolio import GenerationRanges, default_y_max, generate

GRID = GridSpec(p_nodes=11, y_nodes=11, y_max=12_500.0, discount_candidates=5)


def tiny(n=2, seed=0):
    return generate(n, GenerationRanges(), seed)


def test_single_driver_unconstrained_matches_enumeration():
    (par, init), = tiny(1, seed=3)
    sched, opt = exhaustive_primal([(par, init)], GRID, SolverConfig(budget=1e9), 3)
    _, cost, _ = enumerate_schedules(par, init, GRID.candidates, 3, GRID.y_max)
    assert opt == pytest.approx(cost.min(), rel=1e-12)
    assert opt == pytest.approx(trajectory_cost(init, par, sched[0], y_max=GRID.y_max), rel=1e-12)


def test_zero_budget_optimum_is_baseline_rollout():
    pf = tiny(2, seed=1)
    sched, opt = exhaustive_primal(pf, GRID, SolverConfig(budget=0.0), 3)
    assert np.all(sched == 0)
    assert opt == pytest.approx(sum(trajectory_cost(i, p, [0.0] * 3, y_max=GRID.y_max) for p, i in pf))


def test_insensitive_drivers_never_discount():
    par = DriverParams(0.0, 0.0, 0.3, 0.3, 0.05, 5000.0, 800.0)
    pf = [(par, DriverState(0.08, 7000.0))] * 2
    sched, opt = exhaustive_primal(pf, GRID, SolverConfig(budget=1e6), 2)
    assert np.all(sched == 0)


def test_search_cap_is_enforced():
    assert search_bits(3, 3, 5) < 24
    with pytest.raises(ValueError):
        exhaustive_primal(tiny(3), GridSpec(y_max=12_500.0, discount_candidates=9), SolverConfig(budget=1.0), 3)
    with pytest.raises(ValueError):
        measure_gap(tiny(1), [1, 4], GRID, SolverConfig(budget=1.0), n_periods=3)


def test_joint_budget_is_respected():
    pf = tiny(3, seed=2)
    budget = 0.05 * sum(p.premium for p, _ in pf)
    sched, _ = exhaustive_primal(pf, GRID, SolverConfig(budget=budget), 2)
    usage = (sched * np.array([[p.premium] for p, _ in pf])).sum(axis=0)
    assert np.all(usage <= budget + 1e-9)


def test_weak_duality_and_bound_on_replications():
    pf = tiny(1, seed=4)
    b = 0.06 * pf[0][0].premium
    reports = measure_gap(pf, [1, 2, 3], GRID, SolverConfig(budget=b), n_periods=2)
    assert [r.n for r in reports] == [1, 2, 3]
    for r in reports:
        assert r.dual_value <= r.primal_optimum + 1e-6
        assert r.gap <= r.bound
        assert r.bound == gap_bound(pf * r.n, GRID, 2)
    # replication keeps the feasible set of N copies of a single-driver solution
    assert reports[2].gap_per_driver <= reports[0].gap_per_driver + 1e-6
    assert reports[1].gap_per_driver <= reports[0].gap_per_driver + 1e-6


def test_gap_report_fields():
    pf = tiny(2, seed=5)
    g = GridSpec(p_nodes=11, y_nodes=11, y_max=default_y_max(pf), discount_candidates=3)
    r = gap_report(pf, g, SolverConfig(budget=60.0), 2)
    assert r.gap == pytest.approx(r.primal_optimum - r.dual_value)
    assert r.gap_per_driver == pytest.approx(r.gap / 2)
    assert r.bound == pytest.approx(3 * g.y_max + max(p.premium for p, _ in pf))
