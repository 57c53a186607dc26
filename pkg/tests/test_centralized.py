"""Convex solver: analytic optima, an independent oracle, KKT residuals."""

import math

import numpy as np
import pytest

from mcastmech import (
    AgentId,
    PrimalSolution,
    check_a4,
    constraint_violation,
    kkt_residuals,
    random_instance,
    solution_to_json,
    solve_cp,
    welfare,
)
from mcastmech.errors import SolverError


# ---------------------------------------------------------------------------
# Independent oracle for the one-link, two-group instance:
# maximize 3*log(1+m1) + log(1+m2) subject to m1 + m2 = 6.
# Coarse grid to bracket, then bisection on the first-order condition
# 3/(1+m1) - 1/(1+m2) = 0.  No solver code shared.


def oracle_two_group_split(capacity, weight1, weight2):
    def foc(m1):
        m2 = capacity - m1
        return weight1 / (1.0 + m1) - weight2 / (1.0 + m2)

    grid = np.linspace(1e-9, capacity - 1e-9, 2001)
    values = [weight1 * math.log1p(m) + weight2 * math.log1p(capacity - m) for m in grid]
    best = int(np.argmax(values))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    # foc is decreasing in m1: positive at lo, negative at hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if foc(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_oracle_matches_closed_form():
    # 3(1+m2) = 1+m1 with m1+m2=6 has the exact solution m1=5
    assert oracle_two_group_split(6.0, 3.0, 1.0) == pytest.approx(5.0, abs=1e-10)


# ---------------------------------------------------------------------------
# fixed instances


def test_symmetric_split(symmetric_instance, solved_symmetric):
    primal, dual = solved_symmetric
    for ki in symmetric_instance.agents:
        assert primal.x[ki] == pytest.approx(5.0, abs=1e-8)
    assert dual.lam["l1"] == pytest.approx(1.0 / 6.0, abs=1e-8)
    for ki in symmetric_instance.agents:
        assert dual.mu[(ki, "l1")] == pytest.approx(1.0 / 6.0, abs=1e-8)


def test_asymmetric_matches_oracle(oracle_instance, solved_oracle):
    primal, dual = solved_oracle
    m1 = oracle_two_group_split(6.0, 3.0, 1.0)
    m2 = 6.0 - m1
    assert primal.x[AgentId(1, 1)] == pytest.approx(m1, abs=1e-6)
    assert primal.x[AgentId(1, 2)] == pytest.approx(m1, abs=1e-6)
    assert primal.x[AgentId(2, 1)] == pytest.approx(m2, abs=1e-6)
    assert primal.m[(1, "l1")] == pytest.approx(m1, abs=1e-6)
    # lambda = total grp-2 marginal value = 1/(1+m2) = 1/2
    assert dual.lam["l1"] == pytest.approx(0.5, abs=1e-7)
    assert dual.mu[(AgentId(1, 1), "l1")] == pytest.approx(1.0 / 6.0, abs=1e-7)
    assert dual.mu[(AgentId(1, 2), "l1")] == pytest.approx(1.0 / 3.0, abs=1e-7)
    assert dual.mu[(AgentId(2, 1), "l1")] == pytest.approx(0.5, abs=1e-7)


def test_slack_link_gets_zero_dual(slack_instance, solved_slack):
    primal, dual = solved_slack
    for ki in slack_instance.agents:
        assert primal.x[ki] == pytest.approx(2.0, abs=1e-8)
    assert dual.lam["l1"] == pytest.approx(1.0 / 3.0, abs=1e-8)
    assert dual.lam["l2"] == pytest.approx(0.0, abs=1e-8)


def test_two_member_group_shares_rate(two_member_instance, solved_two_member):
    primal, dual = solved_two_member
    assert primal.x[AgentId(1, 1)] == pytest.approx(7.0, abs=1e-7)
    assert primal.x[AgentId(1, 2)] == pytest.approx(7.0, abs=1e-7)
    assert primal.x[AgentId(2, 1)] == pytest.approx(3.0, abs=1e-7)
    assert dual.lam["l1"] == pytest.approx(0.25, abs=1e-7)
    assert dual.mu[(AgentId(1, 1), "l1")] == pytest.approx(0.125, abs=1e-7)


# ---------------------------------------------------------------------------
# KKT residual machinery


def test_solved_residuals_meet_tolerance(symmetric_instance, solved_symmetric):
    primal, dual = solved_symmetric
    report = kkt_residuals(symmetric_instance, primal, dual.lam, dual.mu)
    assert report.max_residual <= 1e-9


def test_random_instances_solve_to_tolerance():
    for seed in (1, 5, 9, 13, 17):
        inst = random_instance(seed, n_groups=3, max_group_size=2, n_links=2)
        primal, dual = solve_cp(inst, tol=1e-8)
        report = kkt_residuals(inst, primal, dual.lam, dual.mu)
        assert report.max_residual <= 1e-8, f"seed {seed}"
        assert constraint_violation(inst, primal.x, primal.m) <= 1e-8


def test_perturbed_multiplier_shows_in_comp_slack(slack_instance, solved_slack):
    primal, dual = solved_slack
    ki = slack_instance.agents[0]
    mu = dict(dual.mu)
    mu[(ki, "l2")] += 0.1  # the member bound on l2 is far from tight
    report = kkt_residuals(slack_instance, primal, dual.lam, mu)
    slack = primal.m[(ki.group, "l2")] - primal.x[ki]  # alpha = 1
    assert slack > 1.0
    assert report.comp_slack >= 0.1 * slack - 1e-6


def test_zero_point_stationarity_is_max_initial_slope(symmetric_instance):
    zero = PrimalSolution(
        x={ki: 0.0 for ki in symmetric_instance.agents},
        m={key: 0.0 for key in [(1, "l1"), (2, "l1")]},
    )
    lam = {"l1": 0.0}
    mu = {(ki, "l1"): 0.0 for ki in symmetric_instance.agents}
    report = kkt_residuals(symmetric_instance, zero, lam, mu)
    # v'(0) = 1 for both agents and the inequality branch is violated by 1
    assert report.stationarity == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# A4


def test_a4_holds_on_symmetric(symmetric_instance, solved_symmetric):
    primal, _ = solved_symmetric
    report = check_a4(symmetric_instance, primal)
    assert report.holds
    assert report.s_sizes["l1"] == 2


def test_a4_zero_point(symmetric_instance):
    zero = PrimalSolution(
        x={ki: 0.0 for ki in symmetric_instance.agents},
        m={(1, "l1"): 0.0, (2, "l1"): 0.0},
    )
    report = check_a4(symmetric_instance, zero)
    assert not report.holds
    assert report.s_sizes["l1"] == 0


def test_a4_fails_when_one_group_starved(a4_fail_instance):
    primal, _ = solve_cp(a4_fail_instance, tol=1e-9)
    assert primal.x[AgentId(1, 1)] == pytest.approx(10.0, abs=1e-6)
    assert primal.x[AgentId(2, 1)] == pytest.approx(0.0, abs=1e-6)
    assert not check_a4(a4_fail_instance, primal).holds


# ---------------------------------------------------------------------------
# optimality properties


def test_interior_start_does_not_matter(oracle_instance):
    pa, _ = solve_cp(oracle_instance, tol=1e-9, init_seed=1)
    pb, _ = solve_cp(oracle_instance, tol=1e-9, init_seed=2)
    for ki in oracle_instance.agents:
        assert pa.x[ki] == pytest.approx(pb.x[ki], abs=1e-6)


def test_welfare_dominates_random_feasible_points(chain_instance):
    primal, _ = solve_cp(chain_instance, tol=1e-9)
    best = welfare(chain_instance, primal.x)
    rng = np.random.default_rng(7)
    found = 0
    while found < 100:
        x = {ki: float(rng.uniform(0.0, 10.0)) for ki in chain_instance.agents}
        m = {}
        for (k, lid), members in chain_instance.members_on_link.items():
            m[(k, lid)] = max(
                chain_instance.alpha[(AgentId(k, i), lid)] * x[AgentId(k, i)]
                for i in members
            )
        if constraint_violation(chain_instance, x, m) > 0.0:
            continue
        found += 1
        assert welfare(chain_instance, x) <= best + 1e-9


def test_some_link_is_tight_at_optimum():
    for seed in (21, 22, 23):
        inst = random_instance(seed, n_groups=3, max_group_size=2, n_links=2)
        primal, _ = solve_cp(inst, tol=1e-9)
        slacks = []
        for lid in inst.link_ids:
            used = sum(primal.m[(k, lid)] for k in inst.groups_on_link[lid])
            slacks.append((inst.capacity[lid] - used) / inst.capacity[lid])
        assert min(slacks) <= 1e-8


def test_solution_export_deterministic(symmetric_instance, solved_symmetric):
    primal, dual = solved_symmetric
    a = solution_to_json(symmetric_instance, primal, dual)
    b = solution_to_json(symmetric_instance, primal, dual)
    assert a == b
    assert a.endswith("\n")


def test_tolerance_must_be_positive(symmetric_instance):
    with pytest.raises((ValueError, SolverError)):
        solve_cp(symmetric_instance, tol=0.0)
