import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubi_pricing.dp import (GridSpec, backward_induction, enumerate_schedules, greedy_rollout, interpolate,
                            solve_drivers)
from ubi_pricing.dynamics import DriverParams, DriverState, rollout, step, trajectory_cost

Y_MAX = 12_500.0


def driver(beta=1.3, theta=0.3, base_p=0.05, base_y=6000.0, premium=800.0):
    return DriverParams(beta_p=beta, beta_y=beta, theta_p=theta, theta_y=theta, baseline_p=base_p,
                        baseline_y=base_y, premium=premium)


params_st = st.builds(
    DriverParams,
    beta_p=st.floats(0, 2), beta_y=st.floats(0, 2),
    theta_p=st.floats(0.05, 1), theta_y=st.floats(0.05, 1),
    baseline_p=st.floats(0, 0.3), baseline_y=st.floats(0, 10_000),
    premium=st.floats(100, 1500),
)
state_st = st.builds(DriverState, p=st.floats(0, 0.5), y=st.floats(0, Y_MAX))


def test_gridspec_validation_and_spacing():
    g = GridSpec(p_nodes=41, y_nodes=41, y_max=4000.0)
    assert g.spacing == pytest.approx(100.0)
    assert g.candidates[0] == 0.0 and g.candidates[-1] == pytest.approx(0.2)
    for bad in (dict(p_nodes=1), dict(y_nodes=1), dict(discount_candidates=1), dict(y_max=0.0)):
        with pytest.raises(ValueError):
            GridSpec(**bad)


def test_interpolate_node_cell_center_and_constant():
    g = GridSpec(p_nodes=2, y_nodes=2, y_max=1.0)
    layer = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert interpolate(layer, DriverState(0.5, 0.5), g) == pytest.approx(1.5)
    assert interpolate(layer, DriverState(1.0, 0.0), g) == 2.0
    assert interpolate(np.full((2, 2), 7.0), DriverState(0.3, 0.9), g) == pytest.approx(7.0)


def test_interpolate_rejects_outside_domain():
    g = GridSpec(p_nodes=3, y_nodes=3, y_max=10.0)
    with pytest.raises(ValueError):
        interpolate(np.zeros((3, 3)), DriverState(0.5, 11.0), g)


@given(st.lists(st.floats(-1e4, 1e4), min_size=16, max_size=16), st.floats(0, 1), st.floats(0, 1))
def test_interpolation_is_non_expansive(vals, p, yf):
    g = GridSpec(p_nodes=4, y_nodes=4, y_max=100.0)
    layer = np.array(vals).reshape(4, 4)
    v = interpolate(layer, DriverState(p, yf * 100.0), g)
    assert layer.min() - 1e-9 <= v <= layer.max() + 1e-9


def _bilinear(layer, p, y, p_grid, y_grid):
    i = min(int(p / p_grid[1]), len(p_grid) - 2)
    j = min(int(y / y_grid[1]), len(y_grid) - 2)
    u = (p - p_grid[i]) / p_grid[1]
    w = (y - y_grid[j]) / y_grid[1]
    return ((1 - u) * (1 - w) * layer[i][j] + u * (1 - w) * layer[i + 1][j]
            + (1 - u) * w * layer[i][j + 1] + u * w * layer[i + 1][j + 1])


def test_backward_induction_matches_hand_recursion_on_3x3_grid():
    g = GridSpec(p_nodes=3, y_nodes=3, y_max=8000.0, discount_candidates=3, eta=0.2)
    par = DriverParams(beta_p=1.5, beta_y=0.8, theta_p=0.4, theta_y=0.5, baseline_p=0.1, baseline_y=3000.0,
                       premium=900.0)
    lams = [0.1, 0.3]
    p_grid, y_grid = [0.0, 0.5, 1.0], [0.0, 4000.0, 8000.0]
    nxt = [[0.0] * 3 for _ in range(3)]
    for t in (1, 0):
        layer = [[0.0] * 3 for _ in range(3)]
        for i, p in enumerate(p_grid):
            for j, y in enumerate(y_grid):
                best = None
                for c in (0.0, 0.1, 0.2):
                    s = step(DriverState(p, y), par, c, y_max=8000.0)
                    q = (1 + lams[t]) * c * 900.0 + s.p * s.y + _bilinear(nxt, s.p, s.y, p_grid, y_grid)
                    best = q if best is None or q < best else best
                layer[i][j] = best
        nxt = layer
    table = backward_induction(par, lams, g)
    assert np.allclose(table.values[0], np.array(nxt), rtol=1e-12)
    assert np.all(table.values[-1] == 0)


def test_insensitive_driver_never_discounts():
    par = driver(beta=0.0)
    g = GridSpec(p_nodes=11, y_nodes=11, y_max=Y_MAX)
    table = backward_induction(par, [0.0] * 4, g)
    assert np.all(table.policy == 0)
    init = DriverState(0.2, 9000.0)
    sched, states, realized = greedy_rollout(table, init, par, g)
    assert list(sched) == [0.0] * 4
    assert realized == pytest.approx(trajectory_cost(init, par, [0.0] * 4, y_max=Y_MAX))


def test_terminal_layer_is_single_stage_minimum():
    par = driver()
    g = GridSpec(p_nodes=5, y_nodes=5, y_max=Y_MAX, discount_candidates=5)
    lam = 0.4
    table = backward_induction(par, [0.0, lam], g)
    i, j = 2, 3
    s0 = DriverState(float(g.p_grid[i]), float(g.y_grid[j]))
    costs = [(1 + lam) * c * par.premium + (lambda s: s.p * s.y)(step(s0, par, c, y_max=Y_MAX))
             for c in g.candidates]
    assert table.values[1, i, j] == pytest.approx(min(costs), rel=1e-12)


def test_greedy_follows_node_policy_on_grid_closed_dynamics():
    # theta = 1 and beta * eta = 1: each candidate maps a node to itself or to zero
    par = DriverParams(beta_p=5.0, beta_y=5.0, theta_p=1.0, theta_y=1.0, baseline_p=0.0, baseline_y=0.0,
                       premium=50.0)
    g = GridSpec(p_nodes=5, y_nodes=5, y_max=8000.0, discount_candidates=2, eta=0.2)
    table = backward_induction(par, [0.0, 0.0, 0.0], g)
    sched, states, _ = greedy_rollout(table, DriverState(1.0, 8000.0), par, g, guard=False)
    for t, (c, s) in enumerate(zip(sched, states)):
        i = int(round(s.p * 4))
        j = int(round(s.y / 2000.0))
        assert (g.p_grid[i], g.y_grid[j]) == (s.p, s.y)
        assert c == table.policy[t, i, j]
    assert sched[0] == pytest.approx(0.2)


@settings(max_examples=25, deadline=None)
@given(params_st, state_st, st.lists(st.floats(0, 5), min_size=1, max_size=5))
def test_never_worse_than_zero_discount(par, init, lams):
    g = GridSpec(p_nodes=9, y_nodes=9, y_max=Y_MAX, discount_candidates=5)
    table = backward_induction(par, lams, g)
    _, _, realized = greedy_rollout(table, init, par, g)
    zero = trajectory_cost(init, par, [0.0] * len(lams), y_max=Y_MAX)
    assert realized <= zero * (1 + 1e-12) + 1e-12


def test_policy_nonincreasing_in_own_multiplier():
    par = driver(beta=1.4, theta=0.2)
    g = GridSpec(p_nodes=9, y_nodes=9, y_max=Y_MAX, discount_candidates=11)
    prev = None
    for lam1 in np.linspace(0, 3, 13):
        table = backward_induction(par, [0.2, lam1, 0.1], g)
        if prev is not None:
            assert np.all(table.policy[1] <= prev + 1e-15)
        prev = table.policy[1]


def test_restricted_tables_give_identical_forward_pass():
    par = driver()
    g = GridSpec(p_nodes=21, y_nodes=21, y_max=Y_MAX)
    init = DriverState(0.06, 6500.0)
    lams = [0.3, 0.0, 0.5, 0.1]
    full = greedy_rollout(backward_induction(par, lams, g), init, par, g)
    restricted_table = backward_induction(par, lams, g, initial=init)
    restricted = greedy_rollout(restricted_table, init, par, g)
    assert np.isnan(restricted_table.values[1]).any()
    assert full[0] == restricted[0] and full[2] == restricted[2]


def test_single_period_matches_enumeration():
    par = driver()
    g = GridSpec(p_nodes=11, y_nodes=11, y_max=Y_MAX, discount_candidates=7)
    init = DriverState(0.07, 7000.0)
    scheds, cost, usage = enumerate_schedules(par, init, g.candidates, 1, Y_MAX)
    lam = 0.25
    j = int(np.argmin(cost + usage[:, 0] * lam))
    sched, _, realized = greedy_rollout(backward_induction(par, [lam], g), init, par, g, guard=False)
    assert sched[0] == scheds[j, 0]
    assert realized == pytest.approx(cost[j], rel=1e-12)


def test_enumerate_schedules_costs_match_rollout():
    par = driver()
    init = DriverState(0.05, 5000.0)
    scheds, cost, usage = enumerate_schedules(par, init, np.array([0.0, 0.1, 0.2]), 3, Y_MAX)
    assert scheds.shape == (27, 3)
    assert list(scheds[1]) == [0.0, 0.0, 0.1]
    for k in (0, 5, 26):
        assert cost[k] == pytest.approx(trajectory_cost(init, par, scheds[k], y_max=Y_MAX), rel=1e-12)
    assert np.allclose(usage, scheds * par.premium)


def test_batch_solver_is_thread_count_invariant():
    rng = np.random.default_rng(3)
    n = 40
    pars = np.column_stack([rng.uniform(1, 1.5, n), rng.uniform(1, 1.5, n), rng.uniform(0.1, 0.5, n),
                            rng.uniform(0.1, 0.5, n), rng.uniform(0.02, 0.08, n), rng.uniform(2000, 10000, n),
                            rng.uniform(600, 1000, n)])
    inits = pars[:, 4:6].copy()
    g = GridSpec(p_nodes=21, y_nodes=21, y_max=Y_MAX)
    a = solve_drivers(pars, inits, [0.2, 0.1, 0.0], g, threads=1)
    b = solve_drivers(pars, inits, [0.2, 0.1, 0.0], g, threads=4)
    assert np.array_equal(a.schedules, b.schedules)
    assert np.array_equal(a.realized, b.realized)
    for i in (0, 17):
        par = DriverParams(*pars[i])
        states = rollout(DriverState(*inits[i]), par, a.schedules[i], y_max=Y_MAX)
        assert np.allclose(a.states[i], [[s.p, s.y] for s in states])


def test_lambda_validation():
    g = GridSpec(p_nodes=3, y_nodes=3, y_max=10.0)
    for bad in ([-0.1], [np.nan]):
        with pytest.raises(ValueError):
            backward_induction(driver(), bad, g)
