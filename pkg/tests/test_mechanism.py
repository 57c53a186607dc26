"""Message -> outcome maps, checked against an independent re-implementation.

The oracle below recomputes the allocation and every tax term with plain
loops and the published algebra, sharing no code with the package, so a
bookkeeping slip in either implementation shows up as a mismatch.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcastmech import (
    LOG_SAT,
    AgentId,
    DeviationEvaluator,
    MechanismParams,
    Message,
    allocate,
    evaluate,
    group_prices,
    profile_from_json,
    profile_to_json,
    random_instance,
    tax_sbb,
    tax_wbb,
    utilities,
    utility,
    zero_message,
)
from mcastmech.errors import MessageShapeError
from mcastmech.mechanism import NO_BOUND, group_maxima, link_scaling

from conftest import make_instance

WBB = MechanismParams(variant="wbb")
SBB = MechanismParams(variant="sbb")


# ---------------------------------------------------------------------------
# oracle


def _oracle_allocation(inst, profile):
    y = {ki: profile[ki].y for ki in inst.agents}
    peaks, r_links = {}, {}
    for lid in inst.link_ids:
        cap = inst.capacity[lid]
        active = []
        for k in inst.groups_on_link[lid]:
            best = 0.0
            for i in inst.members_on_link[(k, lid)]:
                ki = AgentId(k, i)
                best = max(best, inst.alpha[(ki, lid)] * y[ki])
            peaks[(k, lid)] = best
            if any(y[AgentId(k, i)] > 0.0 for i in inst.members_on_link[(k, lid)]):
                active.append(k)
        if len(active) >= 2:
            r_links[lid] = cap / sum(peaks[(k, lid)] for k in inst.groups_on_link[lid])
        elif len(active) == 1:
            n = peaks[(active[0], lid)]
            # two-term published form, not the simplified quotient
            r_links[lid] = cap / n - cap / (n * (n + 1.0))
        else:
            r_links[lid] = None
    bounded = [v for v in r_links.values() if v is not None]
    r = min(bounded) if bounded else 0.0
    x = {ki: r * y[ki] for ki in inst.agents}
    m = {key: r * peaks[key] for key in peaks}
    return r, x, m, peaks


def _oracle_price_factor(inst, profile, w_bar, ki, lid):
    members = inst.members_on_link[(ki.group, lid)]
    if len(members) == 1:
        return w_bar[(ki.group, lid)]
    pos = members.index(ki.member)
    pred = AgentId(ki.group, members[pos - 1])
    return profile[pred].q[lid][1]


def oracle_taxes(inst, profile, params):
    """Per-agent, per-link six-term tax tuples plus the per-agent extras."""
    sbb = params.variant == "sbb"
    r, x, m, _ = _oracle_allocation(inst, profile)

    w, w_bar = {}, {}
    for lid in inst.link_ids:
        groups = inst.groups_on_link[lid]
        for k in groups:
            w[(k, lid)] = sum(
                profile[AgentId(k, i)].q[lid][0] for i in inst.members_on_link[(k, lid)]
            )
        for k in groups:
            others = [w[(g, lid)] for g in groups if g != k]
            w_bar[(k, lid)] = sum(others) / len(others)

    if sbb:
        n_tot = len(inst.agents)
        rho_bar = {
            ki: sum(profile[b].rho for b in inst.agents if b != ki) / (n_tot - 1)
            for ki in inst.agents
        }

    per_link = {}
    totals = {}
    zeta_terms = {}
    for ki in inst.agents:
        total = 0.0
        for lid in inst.links_of[ki]:
            k, cap = ki.group, inst.capacity[lid]
            alpha = inst.alpha[(ki, lid)]
            members = inst.members_on_link[(k, lid)]
            q1, q2 = profile[ki].q[lid]
            pf = _oracle_price_factor(inst, profile, w_bar, ki, lid)
            if len(members) == 1:
                t2 = 0.0
            else:
                pos = members.index(ki.member)
                succ = AgentId(k, members[(pos + 1) % len(members)])
                t2 = (q2 - profile[succ].q[lid][0]) ** 2
            link_load = sum(m[(g, lid)] for g in inst.groups_on_link[lid])
            t1 = x[ki] * alpha * pf
            t3 = (w[(k, lid)] - w_bar[(k, lid)]) ** 2
            t4 = params.eta * pf * (q1 - pf) * (m[(k, lid)] - alpha * x[ki])
            t5 = params.xi * w_bar[(k, lid)] * (w[(k, lid)] - w_bar[(k, lid)]) * (cap - link_load)
            t6 = 0.0
            if sbb:
                n_l = len(inst.agents_on_link[lid])
                rebate = 0.0
                for b in inst.agents_on_link[lid]:
                    if b == ki:
                        continue
                    pf_b = _oracle_price_factor(inst, profile, w_bar, b, lid)
                    rebate += inst.alpha[(b, lid)] * pf_b * profile[b].y
                t6 = -(rho_bar[ki] / (n_l - 1)) * rebate
            per_link[(ki, lid)] = (t1, t2, t3, t4, t5, t6)
            total += t1 + t2 + t3 + t4 + t5 + t6
        zt = params.zeta * (profile[ki].rho - r) ** 2 if sbb else 0.0
        zeta_terms[ki] = zt
        totals[ki] = total + zt
    return totals, per_link, zeta_terms


def random_profile(inst, rng, variant, zero_rate=0.0, q_hi=2.0, y_hi=2.0):
    profile = {}
    for ki in inst.agents:
        y = 0.0 if rng.random() < zero_rate else float(rng.uniform(0.0, y_hi))
        q = {
            lid: (float(rng.uniform(0.0, q_hi)), float(rng.uniform(0.0, q_hi)))
            for lid in inst.links_of[ki]
        }
        rho = float(rng.uniform(0.0, 2.0)) if variant == "sbb" else None
        profile[ki] = Message(y, q, rho)
    return profile


# ---------------------------------------------------------------------------
# allocation map


def test_group_maxima_plain_and_weighted(two_member_instance):
    inst = two_member_instance
    y = {AgentId(1, 1): 4.0, AgentId(1, 2): 6.0, AgentId(2, 1): 0.0}
    peaks, active = group_maxima(inst, y)
    assert peaks[(1, "l1")] == 6.0
    assert active["l1"] == {1}

    weighted = make_instance(
        {"l1": 10.0},
        [
            (1, 1, LOG_SAT, 1.0, 1.0, {"l1": 2.0}),
            (1, 2, LOG_SAT, 1.0, 1.0, {"l1": 1.0}),
            (2, 1, LOG_SAT, 1.0, 1.0, {"l1": 1.0}),
        ],
    )
    y = {AgentId(1, 1): 3.0, AgentId(1, 2): 5.0, AgentId(2, 1): 1.0}
    peaks, active = group_maxima(weighted, y)
    assert peaks[(1, "l1")] == 6.0
    assert active["l1"] == {1, 2}


def test_group_maxima_all_zero(symmetric_instance):
    y = {ki: 0.0 for ki in symmetric_instance.agents}
    peaks, active = group_maxima(symmetric_instance, y)
    assert all(v == 0.0 for v in peaks.values())
    assert active["l1"] == set()


def test_link_scaling_two_active(symmetric_instance):
    peaks = {(1, "l1"): 4.0, (2, "l1"): 6.0}
    assert link_scaling(symmetric_instance, peaks, {"l1": {1, 2}}, "l1") == pytest.approx(1.0)


def test_link_scaling_single_active_uses_damped_branch():
    inst = make_instance(
        {"l1": 12.0},
        [
            (1, 1, LOG_SAT, 1.0, 1.0, {"l1": 1.0}),
            (2, 1, LOG_SAT, 1.0, 1.0, {"l1": 1.0}),
        ],
    )
    peaks = {(1, "l1"): 3.0, (2, "l1"): 0.0}
    # 12/3 - 12/(3*4) = 3, strictly below the naive 12/3
    assert link_scaling(inst, peaks, {"l1": {1}}, "l1") == pytest.approx(3.0)


def test_link_scaling_no_active_is_unbounded(symmetric_instance):
    peaks = {(1, "l1"): 0.0, (2, "l1"): 0.0}
    assert link_scaling(symmetric_instance, peaks, {"l1": set()}, "l1") == NO_BOUND


def test_allocate_zero_profile(symmetric_instance):
    alloc = allocate(symmetric_instance, {ki: 0.0 for ki in symmetric_instance.agents})
    assert alloc.r == 0.0
    assert all(v == 0.0 for v in alloc.x.values())
    assert all(v == 0.0 for v in alloc.m.values())
    assert alloc.r_per_link["l1"] == NO_BOUND


def test_allocate_boundary_exact(symmetric_instance):
    y = {AgentId(1, 1): 4.0, AgentId(2, 1): 6.0}
    alloc = allocate(symmetric_instance, y)
    assert alloc.r == pytest.approx(1.0)
    assert alloc.x[AgentId(1, 1)] == pytest.approx(4.0)
    assert sum(alloc.m.values()) == pytest.approx(10.0)


def test_allocate_takes_min_across_links(chain_instance):
    y = {AgentId(1, 1): 4.0, AgentId(2, 1): 6.0, AgentId(3, 1): 10.0}
    alloc = allocate(chain_instance, y)
    # l1: 10/(4+6) = 1, l2: 8/(6+10) = 0.5
    assert alloc.r_per_link["l1"] == pytest.approx(1.0)
    assert alloc.r_per_link["l2"] == pytest.approx(0.5)
    assert alloc.r == pytest.approx(0.5)
    assert alloc.x[AgentId(1, 1)] == pytest.approx(2.0)
    assert alloc.x[AgentId(3, 1)] == pytest.approx(5.0)


def test_feasible_for_every_profile(chain_instance):
    rng = np.random.default_rng(5)
    inst = chain_instance
    for _ in range(400):
        y = {ki: float(rng.uniform(0.0, 20.0)) for ki in inst.agents}
        if rng.random() < 0.25:
            y[inst.agents[int(rng.integers(len(inst.agents)))]] = 0.0
        alloc = allocate(inst, y)
        for lid in inst.link_ids:
            load = sum(alloc.m[(k, lid)] for k in inst.groups_on_link[lid])
            assert load <= inst.capacity[lid] + 1e-12
        for ki in inst.agents:
            for lid in inst.links_of[ki]:
                assert inst.alpha[(ki, lid)] * alloc.x[ki] <= alloc.m[(ki.group, lid)] + 1e-12


def test_scaling_quasi_invariance(chain_instance):
    inst = chain_instance
    y = {AgentId(1, 1): 4.0, AgentId(2, 1): 6.0, AgentId(3, 1): 10.0}
    base = allocate(inst, y)
    for c in (0.5, 2.0, 10.0):
        scaled = allocate(inst, {ki: c * v for ki, v in y.items()})
        for ki in inst.agents:
            assert scaled.x[ki] == pytest.approx(base.x[ki], rel=1e-12)


def test_boundary_attained_at_argmin_link(chain_instance):
    y = {AgentId(1, 1): 4.0, AgentId(2, 1): 6.0, AgentId(3, 1): 10.0}
    alloc = allocate(chain_instance, y)
    load = sum(alloc.m[(k, "l2")] for k in chain_instance.groups_on_link["l2"])
    assert load == pytest.approx(chain_instance.capacity["l2"], abs=1e-12)


# ---------------------------------------------------------------------------
# prices


def test_group_prices_two_groups(symmetric_instance):
    profile = {
        AgentId(1, 1): Message(1.0, {"l1": (3.0, 0.0)}),
        AgentId(2, 1): Message(1.0, {"l1": (5.0, 0.0)}),
    }
    w, w_bar = group_prices(symmetric_instance, profile)
    assert w[(1, "l1")] == 3.0 and w[(2, "l1")] == 5.0
    assert w_bar[(1, "l1")] == 5.0 and w_bar[(2, "l1")] == 3.0


def test_group_prices_three_group_mean(three_group_instance):
    profile = {
        AgentId(1, 1): Message(0.0, {"l1": (2.0, 0.0)}),
        AgentId(2, 1): Message(0.0, {"l1": (4.0, 0.0)}),
        AgentId(3, 1): Message(0.0, {"l1": (6.0, 0.0)}),
    }
    _, w_bar = group_prices(three_group_instance, profile)
    assert w_bar[(1, "l1")] == pytest.approx(5.0)
    assert w_bar[(2, "l1")] == pytest.approx(4.0)


def test_group_prices_sum_members(two_member_instance):
    profile = {
        AgentId(1, 1): Message(0.0, {"l1": (1.5, 0.0)}),
        AgentId(1, 2): Message(0.0, {"l1": (2.5, 0.0)}),
        AgentId(2, 1): Message(0.0, {"l1": (0.0, 0.0)}),
    }
    w, w_bar = group_prices(two_member_instance, profile)
    assert w[(1, "l1")] == pytest.approx(4.0)
    assert w_bar[(2, "l1")] == pytest.approx(4.0)
    assert w_bar[(1, "l1")] == pytest.approx(0.0)


# ---------------------------------------------------------------------------
# taxes vs oracle


@pytest.mark.parametrize("variant", ["wbb", "sbb"])
def test_taxes_match_oracle(variant, two_member_instance, chain_instance):
    params = MechanismParams(variant=variant)
    rng = np.random.default_rng(12)
    cases = [(two_member_instance, 350), (chain_instance, 350)]
    cases.append((random_instance(31, n_groups=3, max_group_size=2, n_links=2), 300))
    for inst, n_profiles in cases:
        for _ in range(n_profiles):
            profile = random_profile(inst, rng, variant, zero_rate=0.2)
            totals, per_link, zeta_terms = oracle_taxes(inst, profile, params)
            out = evaluate(inst, profile, params)
            for ki in inst.agents:
                tb = out.taxes[ki]
                for lid in inst.links_of[ki]:
                    got = tb.per_link[lid]
                    want = per_link[(ki, lid)]
                    for j in range(6):
                        assert got[j] == pytest.approx(want[j], abs=1e-12), (
                            f"term {j + 1} for {ki.label} on {lid}"
                        )
                assert tb.zeta_term == pytest.approx(zeta_terms[ki], abs=1e-12)
                assert tb.total == pytest.approx(totals[ki], abs=1e-11)


def test_tax_entry_points_check_variant(symmetric_instance):
    profile = {ki: zero_message(symmetric_instance, ki, "wbb") for ki in symmetric_instance.agents}
    assert tax_wbb(symmetric_instance, profile, WBB)
    with pytest.raises(MessageShapeError):
        tax_wbb(symmetric_instance, profile, SBB)
    with pytest.raises(MessageShapeError):
        tax_sbb(symmetric_instance, profile, WBB)


def test_quote_mismatch_term_example(two_member_instance):
    # group of two: agent 1.1's second quote 3 vs successor 1.2's first quote 1
    profile = {
        AgentId(1, 1): Message(0.0, {"l1": (0.0, 3.0)}),
        AgentId(1, 2): Message(0.0, {"l1": (1.0, 0.0)}),
        AgentId(2, 1): Message(0.0, {"l1": (1.0, 0.0)}),
    }
    out = evaluate(two_member_instance, profile, WBB)
    assert out.taxes[AgentId(1, 1)].per_link["l1"][1] == pytest.approx(4.0)


def test_equal_prices_tight_link_leaves_only_payment(two_member_instance):
    # everyone quotes p=0.25 coherently; demands fill the link exactly
    p = 0.25
    profile = {
        AgentId(1, 1): Message(7.0, {"l1": (p / 2, p / 2)}),
        AgentId(1, 2): Message(7.0, {"l1": (p / 2, p / 2)}),
        AgentId(2, 1): Message(3.0, {"l1": (p, p)}),
    }
    # w = (0.25, 0.25) for both groups, w_bar likewise; r = 10/(7+3) = 1
    out = evaluate(two_member_instance, profile, WBB)
    for ki in two_member_instance.agents:
        t = out.taxes[ki].per_link["l1"]
        alpha_price = out.x[ki] * 1.0 * (p / 2 if ki.group == 1 else p)
        assert t[0] == pytest.approx(alpha_price, abs=1e-12)
        assert t[1:] == pytest.approx((0.0,) * 5, abs=1e-15)


def test_zero_demand_profile_keeps_only_price_terms(two_member_instance):
    rng = np.random.default_rng(3)
    profile = random_profile(two_member_instance, rng, "wbb")
    for ki in profile:
        profile[ki] = Message(0.0, profile[ki].q, None)
    out = evaluate(two_member_instance, profile, WBB)
    for ki in two_member_instance.agents:
        t1, t2, t3, t4, t5, t6 = out.taxes[ki].per_link["l1"]
        assert t1 == 0.0 and t4 == 0.0 and t6 == 0.0
        u = utility(two_member_instance, profile, WBB, ki)
        assert u == pytest.approx(-(t2 + t3 + t5))


def test_sbb_cancellation_with_consensus_rho(three_group_instance):
    """Payment/redistribution double sum telescopes when rho agrees with r."""
    inst = three_group_instance
    rng = np.random.default_rng(8)
    for _ in range(300):
        profile = random_profile(inst, rng, "sbb", zero_rate=0.15)
        r = allocate(inst, {ki: profile[ki].y for ki in inst.agents}).r
        for ki in inst.agents:
            profile[ki] = Message(profile[ki].y, profile[ki].q, r)
        out = evaluate(inst, profile, SBB)
        total_t1 = sum(out.taxes[ki].per_link["l1"][0] for ki in inst.agents)
        total_t6 = sum(out.taxes[ki].per_link["l1"][5] for ki in inst.agents)
        assert total_t1 + total_t6 == pytest.approx(0.0, abs=1e-12)
        # with every rho equal to r the zeta terms vanish as well
        assert all(out.taxes[ki].zeta_term == 0.0 for ki in inst.agents)


def test_sbb_brute_force_double_sum(three_group_instance):
    """The rebate really is the others' payments counted (N-1) times."""
    inst = three_group_instance
    rng = np.random.default_rng(21)
    profile = random_profile(inst, rng, "sbb")
    out = evaluate(inst, profile, SBB)
    n_l = len(inst.agents_on_link["l1"])
    _, per_link, _ = oracle_taxes(inst, profile, SBB)
    for ki in inst.agents:
        rho_bar = out.rho_bar[ki]
        others_pay = sum(
            per_link[(b, "l1")][0] / out.r if out.r > 0 else 0.0
            for b in inst.agents
            if b != ki
        )
        expect = -(rho_bar / (n_l - 1)) * others_pay
        assert out.taxes[ki].per_link["l1"][5] == pytest.approx(expect, rel=1e-9)


# ---------------------------------------------------------------------------
# utility and evaluation plumbing


@given(seed=st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_utility_finite_everywhere(seed, chain_instance):
    rng = np.random.default_rng(seed)
    profile = random_profile(chain_instance, rng, "wbb", zero_rate=0.3, q_hi=5.0, y_hi=30.0)
    for ki in chain_instance.agents:
        assert np.isfinite(utility(chain_instance, profile, WBB, ki))


def test_utilities_match_single_agent_calls(two_member_instance):
    rng = np.random.default_rng(17)
    profile = random_profile(two_member_instance, rng, "sbb")
    all_at_once = utilities(two_member_instance, profile, SBB)
    for ki in two_member_instance.agents:
        assert all_at_once[ki] == pytest.approx(
            utility(two_member_instance, profile, SBB, ki), abs=1e-14
        )


def test_deviation_evaluator_agrees_with_evaluate(chain_instance):
    rng = np.random.default_rng(9)
    profile = random_profile(chain_instance, rng, "wbb")
    ki = chain_instance.agents[1]
    ev = DeviationEvaluator(chain_instance, profile, WBB, ki)
    assert ev.evals == 0
    for _ in range(25):
        trial = random_profile(chain_instance, rng, "wbb")[ki]
        patched = dict(profile)
        patched[ki] = trial
        assert ev.utility(trial) == pytest.approx(
            utility(chain_instance, patched, WBB, ki), abs=1e-12
        )
    assert ev.evals == 25


def test_profile_round_trip_byte_stable(chain_instance):
    rng = np.random.default_rng(2)
    profile = random_profile(chain_instance, rng, "sbb")
    text = profile_to_json(profile)
    assert profile_to_json(profile_from_json(text, chain_instance)) == text


def test_profile_shape_errors(symmetric_instance, two_member_instance):
    inst = symmetric_instance
    good = {ki: zero_message(inst, ki, "wbb") for ki in inst.agents}

    missing_agent = dict(good)
    del missing_agent[AgentId(2, 1)]
    with pytest.raises(MessageShapeError):
        evaluate(inst, missing_agent, WBB)

    wrong_links = dict(good)
    wrong_links[AgentId(1, 1)] = Message(0.0, {"nope": (0.0, 0.0)})
    with pytest.raises(MessageShapeError):
        evaluate(inst, wrong_links, WBB)

    rho_under_wbb = dict(good)
    rho_under_wbb[AgentId(1, 1)] = Message(0.0, {"l1": (0.0, 0.0)}, 1.0)
    with pytest.raises(MessageShapeError):
        evaluate(inst, rho_under_wbb, WBB)

    with pytest.raises(MessageShapeError):
        evaluate(inst, good, SBB)  # rho missing under sbb

    negative = dict(good)
    negative[AgentId(1, 1)] = Message(-1.0, {"l1": (0.0, 0.0)})
    with pytest.raises(MessageShapeError):
        evaluate(inst, negative, WBB)
