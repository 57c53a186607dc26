"""Message space, allocation map, and tax schemes.

Each agent reports a demand y >= 0 and, per route link, a pair of price
quotes (q1, q2): q1 prices the agent's own bounding constraint, q2 prices
the constraint of its cyclic group successor on that link. The strong
budget balance (SBB) variant adds a scaling estimate rho.

Allocation: per link, each group's weighted peak demand n = max alpha*y is
computed; a link with two or more demanding groups offers scale c / sum(n),
a link with exactly one demanding group offers c / (n + 1) (the shaved
offer keeps a lone group from absorbing the full capacity), and an idle
link offers no bound. The realized scale r is the smallest finite offer
and every rate is x = r*y, every group reservation m = r*n. All-zero
demand yields r = 0 so that x = r*y still holds and taxes stay finite.

Taxes decompose per link into six slots:
  1. payment: x * alpha * (predecessor's q2), group-mean rival price w_bar
     substituted when the agent is alone in its group on the link;
  2. quote matching: (own q2 - successor's q1)^2, zero for singletons;
  3. price coherence: (w - w_bar)^2 on the group price sums;
  4. eta-weighted consistency: couples own q1 to the reservation gap;
  5. xi-weighted capacity: couples the group price gap to link slack;
  6. SBB redistribution rebate (0 under WBB).
SBB adds a per-agent zeta*(rho - r)^2 consensus term on top.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from .errors import MessageShapeError
from .model import AgentId, NetworkInstance

VARIANT_WBB = "wbb"
VARIANT_SBB = "sbb"
VARIANTS = (VARIANT_WBB, VARIANT_SBB)

NO_BOUND = math.inf  # per-link sentinel: nothing on the link constrains r


@dataclass(frozen=True)
class MechanismParams:
    """Coupling weights for the consistency terms and the SBB consensus."""

    eta: float = 1e-2
    xi: float = 1e-2
    zeta: float = 1e-2
    variant: str = VARIANT_WBB

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.eta, self.xi) <= 0.0 or (self.variant == VARIANT_SBB and self.zeta <= 0.0):
            raise ValueError("coupling weights must be positive")

    def halved(self) -> "MechanismParams":
        return replace(self, eta=self.eta / 2, xi=self.xi / 2, zeta=self.zeta / 2)


@dataclass
class Message:
    y: float
    q: Dict[str, Tuple[float, float]]
    rho: Optional[float] = None

    def copy(self) -> "Message":
        return Message(self.y, dict(self.q), self.rho)


Profile = Dict[AgentId, Message]


@dataclass
class TaxBreakdown:
    per_link: Dict[str, Tuple[float, float, float, float, float, float]]
    zeta_term: float
    total: float


@dataclass
class AllocationResult:
    r: float
    r_per_link: Dict[str, float]
    n: Dict[Tuple[int, str], float]
    x: Dict[AgentId, float]
    m: Dict[Tuple[int, str], float]


@dataclass
class Outcome:
    r: float
    r_per_link: Dict[str, float]
    n: Dict[Tuple[int, str], float]
    m: Dict[Tuple[int, str], float]
    x: Dict[AgentId, float]
    w: Dict[Tuple[int, str], float]
    w_bar: Dict[Tuple[int, str], float]
    rho_bar: Dict[AgentId, float]
    taxes: Dict[AgentId, TaxBreakdown]
    total_tax: float


def zero_message(instance: NetworkInstance, ki: AgentId, variant: str) -> Message:
    q = {lid: (0.0, 0.0) for lid in instance.links_of[ki]}
    return Message(0.0, q, 0.0 if variant == VARIANT_SBB else None)


def validate_profile(instance: NetworkInstance, profile: Profile, variant: str) -> None:
    if variant not in VARIANTS:
        raise MessageShapeError(f"unknown variant {variant!r}")
    missing = set(instance.agents) - set(profile)
    if missing:
        raise MessageShapeError(
            "profile missing agents: " + ", ".join(ki.label for ki in sorted(missing)))
    for ki in instance.agents:
        msg = profile[ki]
        want = set(instance.links_of[ki])
        got = set(msg.q)
        if want != got:
            raise MessageShapeError(
                f"agent {ki.label}: quotes keyed by {sorted(got)}, route is {sorted(want)}")
        if not (msg.y >= 0.0 and math.isfinite(msg.y)):
            raise MessageShapeError(f"agent {ki.label}: demand {msg.y} invalid")
        for lid, pair in msg.q.items():
            if len(pair) != 2 or not all(v >= 0.0 and math.isfinite(v) for v in pair):
                raise MessageShapeError(f"agent {ki.label}: bad quote pair on {lid}")
        if variant == VARIANT_SBB:
            if msg.rho is None or not (msg.rho >= 0.0 and math.isfinite(msg.rho)):
                raise MessageShapeError(f"agent {ki.label}: SBB requires rho >= 0")
            for lid in instance.links_of[ki]:
                if len(instance.agents_on_link[lid]) < 2:
                    raise MessageShapeError(
                        f"link {lid} carries a single agent, SBB rebate undefined")
        elif msg.rho is not None:
            raise MessageShapeError(f"agent {ki.label}: rho present under WBB")


# ---------------------------------------------------------------------------
# Allocation

def group_maxima(instance: NetworkInstance, y: Dict[AgentId, float]):
    """Weighted per-(group, link) peaks and the demanding-group sets."""
    peaks: Dict[Tuple[int, str], float] = {}
    active: Dict[str, set] = {lid: set() for lid in instance.link_ids}
    for (k, lid), members in instance.members_on_link.items():
        best = 0.0
        demanding = False
        for i in members:
            ki = AgentId(k, i)
            yv = y[ki]
            if yv > 0.0:
                demanding = True
            v = instance.alpha[(ki, lid)] * yv
            if v > best:
                best = v
        peaks[(k, lid)] = best
        if demanding:
            active[lid].add(k)
    return peaks, active


def link_scaling(instance: NetworkInstance, peaks, active, lid: str) -> float:
    """Scale offered by one link; NO_BOUND when nothing is demanded on it."""
    demanding = active[lid]
    if not demanding:
        return NO_BOUND
    total = 0.0
    for k in instance.groups_on_link[lid]:
        total += peaks[(k, lid)]
    if len(demanding) >= 2:
        return instance.capacity[lid] / total
    return instance.capacity[lid] / (total + 1.0)


def allocate(instance: NetworkInstance, y: Dict[AgentId, float]) -> AllocationResult:
    peaks, active = group_maxima(instance, y)
    r_per_link = {lid: link_scaling(instance, peaks, active, lid)
                  for lid in instance.link_ids}
    finite = [v for v in r_per_link.values() if v != NO_BOUND]
    r = min(finite) if finite else 0.0  # all-zero demand collapses to x = 0
    x = {ki: r * y[ki] for ki in instance.agents}
    m = {p: r * peaks[p] for p in peaks}
    return AllocationResult(r, r_per_link, peaks, x, m)


# ---------------------------------------------------------------------------
# Prices

def group_prices(instance: NetworkInstance, profile: Profile):
    """Group price sums w and leave-one-group-out means w_bar, per link."""
    w: Dict[Tuple[int, str], float] = {}
    for (k, lid), members in instance.members_on_link.items():
        w[(k, lid)] = sum(profile[AgentId(k, i)].q[lid][0] for i in members)
    w_bar: Dict[Tuple[int, str], float] = {}
    for lid in instance.link_ids:
        groups = instance.groups_on_link[lid]
        if len(groups) < 2:
            raise MessageShapeError(
                f"link {lid} carries one group, rival mean undefined; validation should "
                f"have rejected this instance")
        total = sum(w[(k, lid)] for k in groups)
        for k in groups:
            w_bar[(k, lid)] = (total - w[(k, lid)]) / (len(groups) - 1)
    return w, w_bar


# ---------------------------------------------------------------------------
# Taxes

def _price_factor(instance: NetworkInstance, profile: Profile,
                  w_bar, ki: AgentId, lid: str) -> float:
    """Price applied to ki's allocation on a link: predecessor's second
    quote, or the rival group mean when ki is alone in its group there."""
    if len(instance.members_on_link[(ki.group, lid)]) >= 2:
        pred = instance.pred_on_link[(ki, lid)]
        return profile[pred].q[lid][1]
    return w_bar[(ki.group, lid)]


def _rebate_pool(instance: NetworkInstance, profile: Profile, w_bar, lid: str):
    """Per-link rebate ingredients: alpha * price factor * demand per agent,
    and their sum. Shared by the SBB rebate and by term 1 (same products,
    so the cross-agent cancellation is exact in floating point too)."""
    contrib = {}
    total = 0.0
    for b in instance.agents_on_link[lid]:
        c = instance.alpha[(b, lid)] * _price_factor(instance, profile, w_bar, b, lid) \
            * profile[b].y
        contrib[b] = c
        total += c
    return contrib, total


def agent_tax(instance: NetworkInstance, profile: Profile, params: MechanismParams,
              ki: AgentId, alloc: AllocationResult, w, w_bar,
              m_sum: Dict[str, float], rho_bar_ki: Optional[float],
              pools: Dict[str, Tuple[Dict[AgentId, float], float]]) -> TaxBreakdown:
    sbb = params.variant == VARIANT_SBB
    k = ki.group
    per_link = {}
    total = 0.0
    x_ki = alloc.x[ki]
    for lid in instance.links_of[ki]:
        a = instance.alpha[(ki, lid)]
        m_k = alloc.m[(k, lid)]
        wk = w[(k, lid)]
        wb = w_bar[(k, lid)]
        slack = instance.capacity[lid] - m_sum[lid]
        q1_own, q2_own = profile[ki].q[lid]
        contrib, pool_total = pools[lid]
        singleton = len(instance.members_on_link[(k, lid)]) == 1
        if singleton:
            pf = wb
            t2 = 0.0
        else:
            pf = profile[instance.pred_on_link[(ki, lid)]].q[lid][1]
            succ = instance.succ_on_link[(ki, lid)]
            t2 = (q2_own - profile[succ].q[lid][0]) ** 2
        t1 = alloc.r * contrib[ki]  # = x * alpha * pf, shared product chain
        t3 = (wk - wb) ** 2
        t4 = params.eta * pf * (q1_own - pf) * (m_k - a * x_ki)
        t5 = params.xi * wb * (wk - wb) * slack
        t6 = 0.0
        if sbb:
            n_l = len(instance.agents_on_link[lid])
            t6 = -(rho_bar_ki / (n_l - 1)) * (pool_total - contrib[ki])
        per_link[lid] = (t1, t2, t3, t4, t5, t6)
        total += t1 + t2 + t3 + t4 + t5 + t6
    zeta_term = 0.0
    if sbb:
        zeta_term = params.zeta * (profile[ki].rho - alloc.r) ** 2
        total += zeta_term
    return TaxBreakdown(per_link, zeta_term, total)


def _tax_context(instance: NetworkInstance, profile: Profile, params: MechanismParams,
                 alloc: AllocationResult):
    w, w_bar = group_prices(instance, profile)
    m_sum = {lid: sum(alloc.m[(k, lid)] for k in instance.groups_on_link[lid])
             for lid in instance.link_ids}
    pools = {lid: _rebate_pool(instance, profile, w_bar, lid)
             for lid in instance.link_ids}
    rho_bar: Dict[AgentId, float] = {}
    if params.variant == VARIANT_SBB:
        n_agents = len(instance.agents)
        rho_total = sum(profile[b].rho for b in instance.agents)
        rho_bar = {b: (rho_total - profile[b].rho) / (n_agents - 1)
                   for b in instance.agents}
    return w, w_bar, m_sum, pools, rho_bar


def evaluate(instance: NetworkInstance, profile: Profile, params: MechanismParams,
             check: bool = True) -> Outcome:
    """Full outcome for a message profile: allocation, prices, all taxes."""
    if check:
        validate_profile(instance, profile, params.variant)
    y = {ki: profile[ki].y for ki in instance.agents}
    alloc = allocate(instance, y)
    w, w_bar, m_sum, pools, rho_bar = _tax_context(instance, profile, params, alloc)
    taxes = {}
    total_tax = 0.0
    for ki in instance.agents:
        tb = agent_tax(instance, profile, params, ki, alloc, w, w_bar, m_sum,
                       rho_bar.get(ki), pools)
        taxes[ki] = tb
        total_tax += tb.total
    return Outcome(alloc.r, alloc.r_per_link, alloc.n, alloc.m, alloc.x,
                   w, w_bar, rho_bar, taxes, total_tax)


def tax_wbb(instance: NetworkInstance, profile: Profile,
            params: MechanismParams) -> Dict[AgentId, TaxBreakdown]:
    if params.variant != VARIANT_WBB:
        raise MessageShapeError("tax_wbb called with non-WBB params")
    return evaluate(instance, profile, params).taxes


def tax_sbb(instance: NetworkInstance, profile: Profile,
            params: MechanismParams) -> Dict[AgentId, TaxBreakdown]:
    if params.variant != VARIANT_SBB:
        raise MessageShapeError("tax_sbb called with non-SBB params")
    return evaluate(instance, profile, params).taxes


def utility(instance: NetworkInstance, profile: Profile, params: MechanismParams,
            ki: AgentId, check: bool = True) -> float:
    if check:
        validate_profile(instance, profile, params.variant)
    y = {b: profile[b].y for b in instance.agents}
    alloc = allocate(instance, y)
    w, w_bar, m_sum, pools, rho_bar = _tax_context(instance, profile, params, alloc)
    tb = agent_tax(instance, profile, params, ki, alloc, w, w_bar, m_sum,
                   rho_bar.get(ki), pools)
    return instance.valuation(ki).value(alloc.x[ki]) - tb.total


def utilities(instance: NetworkInstance, profile: Profile,
              params: MechanismParams, check: bool = True) -> Dict[AgentId, float]:
    if check:
        validate_profile(instance, profile, params.variant)
    out = evaluate(instance, profile, params, check=False)
    return {ki: instance.valuation(ki).value(out.x[ki]) - out.taxes[ki].total
            for ki in instance.agents}


class DeviationEvaluator:
    """Counts utility evaluations of one agent's candidate messages while
    the rest of the profile stays fixed. Single source of truth: it runs the
    same allocation and tax arithmetic as evaluate(), restricted to the one
    agent whose utility is needed."""

    def __init__(self, instance: NetworkInstance, profile: Profile,
                 params: MechanismParams, ki: AgentId):
        self.instance = instance
        self.params = params
        self.ki = ki
        self.profile: Profile = dict(profile)
        self.y = {b: profile[b].y for b in instance.agents}
        self.evals = 0

    def utility(self, msg: Message) -> float:
        self.evals += 1
        inst = self.instance
        ki = self.ki
        self.profile[ki] = msg
        self.y[ki] = msg.y
        alloc = allocate(inst, self.y)
        w, w_bar, m_sum, pools, rho_bar = _tax_context(
            inst, self.profile, self.params, alloc)
        tb = agent_tax(inst, self.profile, self.params, ki, alloc, w, w_bar,
                       m_sum, rho_bar.get(ki), pools)
        return inst.valuation(ki).value(alloc.x[ki]) - tb.total


# ---------------------------------------------------------------------------
# One-sided allocation sensitivities (piecewise structure aware)

@dataclass
class AllocationSlopes:
    """One-sided sensitivities of the allocation to one agent's demand.

    Conventional one-sided partial derivatives in y_ki for the requested
    side (+1 right, -1 left): dr, dx (own rate), dn (own group peak per
    route link), dm[(k', l)] for every group on every route link, and
    dm_sum[l]. `jumped` marks a branch change (the scale itself is
    discontinuous there and no derivative is reported)."""

    side: int
    r: float
    dr: float
    dx: float
    dn: Dict[str, float]
    dm: Dict[Tuple[int, str], float]
    dm_sum: Dict[str, float]
    jumped: bool


def allocation_slopes(instance: NetworkInstance, y: Dict[AgentId, float],
                      ki: AgentId, side: int) -> AllocationSlopes:
    if side not in (+1, -1):
        raise ValueError("side must be +1 or -1")
    if side == -1 and y[ki] <= 0.0:
        raise ValueError("left slope undefined at y = 0")
    peaks, active = group_maxima(instance, y)
    k = ki.group
    route = instance.links_of[ki]

    # Directional slope of the own-group peak on each route link.
    a_own = {lid: instance.alpha[(ki, lid)] for lid in route}
    peak_others = {}
    for lid in route:
        best = 0.0
        for i in instance.members_on_link[(k, lid)]:
            b = AgentId(k, i)
            if b == ki:
                continue
            v = instance.alpha[(b, lid)] * y[b]
            if v > best:
                best = v
        peak_others[lid] = best
    d_peak = {}
    for lid in route:
        own = a_own[lid] * y[ki]
        if side == +1:
            d_peak[lid] = a_own[lid] if own >= peak_others[lid] else 0.0
        else:
            d_peak[lid] = -a_own[lid] if own > peak_others[lid] else 0.0

    # Side-limit value and directional slope of each link's offer.
    cur = {lid: link_scaling(instance, peaks, active, lid)
           for lid in instance.link_ids}
    limit = dict(cur)
    slope = {lid: 0.0 for lid in instance.link_ids}
    for lid in route:
        others_demanding = set(active[lid])
        group_others_demand = any(
            y[AgentId(k, i)] > 0.0
            for i in instance.members_on_link[(k, lid)] if AgentId(k, i) != ki)
        own_side_active = group_others_demand or (y[ki] > 0.0) or side == +1
        side_set = set(a for a in others_demanding if a != k)
        if own_side_active:
            side_set.add(k)
        total = sum(peaks[(g, lid)] for g in instance.groups_on_link[lid])
        c = instance.capacity[lid]
        if not side_set:
            limit[lid] = NO_BOUND
            slope[lid] = 0.0
        elif len(side_set) >= 2:
            limit[lid] = c / total
            slope[lid] = -c / total ** 2 * d_peak[lid]
        else:
            limit[lid] = c / (total + 1.0)
            slope[lid] = -c / (total + 1.0) ** 2 * d_peak[lid]

    finite_cur = [v for v in cur.values() if v != NO_BOUND]
    r_cur = min(finite_cur) if finite_cur else 0.0
    finite_lim = [v for v in limit.values() if v != NO_BOUND]
    r_lim = min(finite_lim) if finite_lim else 0.0
    jumped = abs(r_lim - r_cur) > 1e-12 * max(1.0, abs(r_cur), abs(r_lim))

    if r_lim <= 0.0:
        d_r_dir = 0.0
    else:
        tol = 1e-12 * max(1.0, r_lim)
        argmin = [lid for lid in instance.link_ids
                  if limit[lid] != NO_BOUND and limit[lid] <= r_lim + tol]
        d_r_dir = min(slope[lid] for lid in argmin)

    # Convert directional slopes to conventional one-sided partials.
    dr = side * d_r_dir
    dx = r_lim + y[ki] * dr
    dn = {lid: side * d_peak[lid] for lid in route}
    dm = {}
    dm_sum = {}
    for lid in route:
        s = 0.0
        for g in instance.groups_on_link[lid]:
            v = dr * peaks[(g, lid)]
            if g == k:
                v += r_lim * dn[lid]
            dm[(g, lid)] = v
            s += v
        dm_sum[lid] = s
    return AllocationSlopes(side, r_lim, dr, dx, dn, dm, dm_sum, jumped)


# ---------------------------------------------------------------------------
# JSON mirrors

def message_to_dict(msg: Message) -> Dict[str, object]:
    d: Dict[str, object] = {"y": msg.y,
                            "q": {lid: list(pair) for lid, pair in sorted(msg.q.items())}}
    if msg.rho is not None:
        d["rho"] = msg.rho
    return d


def profile_to_json(profile: Profile) -> str:
    doc = {ki.label: message_to_dict(profile[ki]) for ki in sorted(profile)}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def profile_from_json(text: str, instance: NetworkInstance) -> Profile:
    from .errors import InstanceFormatError
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"profile not valid JSON: {exc}") from exc
    profile: Profile = {}
    try:
        for label, entry in doc.items():
            ki = AgentId.from_label(label)
            q = {str(lid): (float(pair[0]), float(pair[1]))
                 for lid, pair in entry["q"].items()}
            rho = float(entry["rho"]) if "rho" in entry else None
            profile[ki] = Message(float(entry["y"]), q, rho)
    except InstanceFormatError:
        raise
    except Exception as exc:
        raise InstanceFormatError(f"profile document malformed: {exc}") from exc
    return profile


def outcome_to_dict(instance: NetworkInstance, out: Outcome) -> Dict[str, object]:
    def fin(v: float):
        return "inf" if v == NO_BOUND else v

    return {
        "r": fin(out.r),
        "r_per_link": {lid: fin(out.r_per_link[lid]) for lid in instance.link_ids},
        "n": {f"{k}|{lid}": out.n[(k, lid)] for (k, lid) in sorted(out.n)},
        "m": {f"{k}|{lid}": out.m[(k, lid)] for (k, lid) in sorted(out.m)},
        "x": {ki.label: out.x[ki] for ki in instance.agents},
        "w": {f"{k}|{lid}": out.w[(k, lid)] for (k, lid) in sorted(out.w)},
        "w_bar": {f"{k}|{lid}": out.w_bar[(k, lid)] for (k, lid) in sorted(out.w_bar)},
        "rho_bar": {ki.label: out.rho_bar[ki] for ki in sorted(out.rho_bar)},
        "taxes": {
            ki.label: {
                "per_link": {lid: list(terms)
                             for lid, terms in sorted(out.taxes[ki].per_link.items())},
                "zeta_term": out.taxes[ki].zeta_term,
                "total": out.taxes[ki].total,
            }
            for ki in instance.agents
        },
        "total_tax": out.total_tax,
    }


def outcome_to_json(instance: NetworkInstance, out: Outcome) -> str:
    return json.dumps(outcome_to_dict(instance, out), indent=2, sort_keys=True) + "\n"
